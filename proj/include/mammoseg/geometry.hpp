#pragma once

// Polygon <-> raster conversions and the Otsu breast-contour initializer.

#include <mammoseg/core.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

namespace mammoseg {

using BinaryMask = Image<std::uint8_t>;

/// Even-odd fill sampled at pixel centres (x+0.5, y+0.5). Crossings use the
/// half-open rule (y_i > py) != (y_j > py), so a centre exactly on a
/// horizontal edge is never double counted.
inline void paint_polygon(Image<StructureClass>& target, const Polygon& poly, StructureClass value) {
    const auto& v = poly.vertices;
    const std::size_t n = v.size();
    if (n < 3) return;
    double ymin = v[0].y, ymax = v[0].y;
    for (const auto& p : v) {
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    const int row0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int row1 = std::min(target.height() - 1, static_cast<int>(std::ceil(ymax)));
    std::vector<double> xs;
    for (int y = row0; y <= row1; ++y) {
        const double py = y + 0.5;
        xs.clear();
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
            if ((v[i].y > py) != (v[j].y > py))
                xs.push_back((v[j].x - v[i].x) * (py - v[i].y) / (v[j].y - v[i].y) + v[i].x);
        }
        std::sort(xs.begin(), xs.end());
        // centre px is inside iff an odd number of crossings lie strictly right of it,
        // i.e. xs[2m] <= px < xs[2m+1]
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            int x = std::max(0, static_cast<int>(std::floor(xs[k])) - 1);
            while (x < target.width() && x + 0.5 < xs[k]) ++x;
            for (; x < target.width() && x + 0.5 < xs[k + 1]; ++x) target.at(x, y) = value;
        }
    }
}

inline bool polygon_within(const Polygon& poly, int width, int height, double margin) {
    return std::all_of(poly.vertices.begin(), poly.vertices.end(), [&](const Point& p) {
        return p.x >= -margin && p.y >= -margin && p.x <= width + margin && p.y <= height + margin;
    });
}

/// Background fill, then fatty, fibroglandular, pectoral (if any), nipple; later layers overwrite.
inline LabelMap rasterize_annotations(const AnnotationSet& ann, int width, int height, double margin = 2.0) {
    if (width <= 0 || height <= 0) throw Error("geometry", "InvalidSize", "label map size must be positive");
    auto check = [&](const Polygon& p, const char* name) {
        if (!polygon_within(p, width, height, margin))
            throw Error("geometry", "PolygonOutOfBounds", std::string(name) + " has a vertex outside the image");
    };
    check(ann.fatty, "fatty");
    check(ann.fibroglandular, "fibroglandular");
    check(ann.nipple, "nipple");
    if (ann.pectoral) check(*ann.pectoral, "pectoral");

    LabelMap labels(width, height, StructureClass::background);
    paint_polygon(labels, ann.fatty, StructureClass::fatty);
    paint_polygon(labels, ann.fibroglandular, StructureClass::fibroglandular);
    if (ann.pectoral) paint_polygon(labels, *ann.pectoral, StructureClass::pectoral);
    paint_polygon(labels, ann.nipple, StructureClass::nipple);
    return labels;
}

inline ProbabilityMaps one_hot(const LabelMap& labels, int num_classes = kNumClasses) {
    if (num_classes != kNumClasses) throw Error("geometry", "CodeOutOfRange", "exactly 5 classes are supported");
    ProbabilityMaps out(labels.width(), labels.height());
    const auto px = labels.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) {
        const int c = code(px[i]);
        if (c < 0 || c >= num_classes) throw Error("geometry", "CodeOutOfRange", "label code " + std::to_string(c));
        out.plane(c)[i] = 1.0f;
    }
    return out;
}

/// Per-pixel arg max; ties go to the lowest class code.
inline LabelMap argmax_labels(const ProbabilityMaps& probs) {
    LabelMap out(probs.width(), probs.height(), StructureClass::background);
    auto dst = out.pixels();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        int best = 0;
        float best_v = probs.plane(0)[i];
        for (int c = 1; c < kNumClasses; ++c) {
            const float v = probs.plane(c)[i];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        dst[i] = static_cast<StructureClass>(best);
    }
    return out;
}

inline BinaryMask class_mask(const LabelMap& labels, StructureClass c) {
    BinaryMask m(labels.width(), labels.height(), 0);
    auto src = labels.pixels();
    auto dst = m.pixels();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == c ? 1 : 0;
    return m;
}

namespace detail {

// sigma_a > sigma_b for sigma = D^2 / (n0 n1), compared exactly while the
// products fit in 128 bits.
inline bool variance_greater(__int128 da, __int128 wa, __int128 db, __int128 wb) {
    __int128 lhs, rhs, da2, db2;
    if (!__builtin_mul_overflow(da, da, &da2) && !__builtin_mul_overflow(db, db, &db2) &&
        !__builtin_mul_overflow(da2, wb, &lhs) && !__builtin_mul_overflow(db2, wa, &rhs))
        return lhs > rhs;
    const long double a = static_cast<long double>(da) * static_cast<long double>(da) / static_cast<long double>(wa);
    const long double b = static_cast<long double>(db) * static_cast<long double>(db) / static_cast<long double>(wb);
    return a > b;
}

}  // namespace detail

/// Otsu threshold over a `bins`-bin histogram spanning [min, max]. Returns t
/// such that foreground = value > t. The first maximizer wins ties.
template <class T>
double otsu_threshold(const Image<T>& pixels, int bins = 256) {
    if (pixels.empty()) throw Error("geometry", "DegenerateImage", "empty image");
    if (bins < 2) throw Error("geometry", "InvalidArgument", "need at least 2 bins");
    const auto px = pixels.pixels();
    const auto [mn_it, mx_it] = std::minmax_element(px.begin(), px.end());
    const std::int64_t mn = static_cast<std::int64_t>(*mn_it);
    const std::int64_t mx = static_cast<std::int64_t>(*mx_it);
    if (mn == mx) throw Error("geometry", "DegenerateImage", "image has a single distinct value");
    const std::int64_t range = mx - mn + 1;

    std::vector<std::int64_t> hist(bins, 0);
    for (const auto v : px) hist[static_cast<std::size_t>((static_cast<std::int64_t>(v) - mn) * bins / range)]++;

    __int128 n_total = 0, s_total = 0;
    for (int b = 0; b < bins; ++b) {
        n_total += hist[b];
        s_total += static_cast<__int128>(hist[b]) * b;
    }
    __int128 n0 = 0, s0 = 0;
    int best_k = -1;
    __int128 best_d = 0, best_w = 1;
    for (int k = 0; k + 1 < bins; ++k) {
        n0 += hist[k];
        s0 += static_cast<__int128>(hist[k]) * k;
        const __int128 n1 = n_total - n0;
        if (n0 == 0 || n1 == 0) continue;
        const __int128 d = n1 * s0 - n0 * (s_total - s0);
        const __int128 w = n0 * n1;
        if (best_k < 0 || detail::variance_greater(d, w, best_d, best_w)) {
            best_k = k;
            best_d = d;
            best_w = w;
        }
    }
    // foreground bins are > best_k, i.e. v >= mn + (best_k+1)*range/bins
    const std::int64_t num = (best_k + 1) * range;
    const std::int64_t first_fg = mn + (num + bins - 1) / bins;
    return static_cast<double>(first_fg - 1);
}

struct Components {
    Image<int> labels;        // 0 = background, 1..count
    std::vector<int> area;    // area[i] for label i+1
    std::vector<int> first;   // raster index of the first pixel of label i+1
};

/// 8-connected labeling of nonzero pixels, labels assigned in raster order.
inline Components label_components(const BinaryMask& mask) {
    Components c{Image<int>(mask.width(), mask.height(), 0), {}, {}};
    const int w = mask.width(), h = mask.height();
    std::vector<int> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y) || c.labels.at(x, y)) continue;
            const int id = static_cast<int>(c.area.size()) + 1;
            c.area.push_back(0);
            c.first.push_back(y * w + x);
            c.labels.at(x, y) = id;
            stack.assign(1, y * w + x);
            while (!stack.empty()) {
                const int idx = stack.back();
                stack.pop_back();
                c.area.back()++;
                const int cx = idx % w, cy = idx / w;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = cx + dx, ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        if (mask.at(nx, ny) && !c.labels.at(nx, ny)) {
                            c.labels.at(nx, ny) = id;
                            stack.push_back(ny * w + nx);
                        }
                    }
                }
            }
        }
    }
    return c;
}

/// External boundary of component `id` as a polygon on the pixel-corner
/// lattice. Starts at the top-left corner of the component's first raster
/// pixel and follows cracks clockwise with the component on the right,
/// turning left whenever the ahead-left pixel belongs to the component so
/// diagonal (8-connected) links stay inside one outline. Only corners are
/// emitted. Re-filling the result at pixel centres gives back the component
/// with its holes filled.
inline Polygon trace_boundary(const Image<int>& labels, int id, int first_index) {
    const int w = labels.width(), h = labels.height();
    auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && labels.at(x, y) == id; };
    // pixel touching corner (cx,cy) on the side given by quadrant vector (qx,qy)
    auto pixel_in_quadrant = [&](int cx, int cy, int qx, int qy) {
        return inside(qx > 0 ? cx : cx - 1, qy > 0 ? cy : cy - 1);
    };
    const int x0 = first_index % w, y0 = first_index / w;
    int cx = x0, cy = y0, dx = 1, dy = 0;
    Polygon poly;
    poly.vertices.push_back({static_cast<double>(cx), static_cast<double>(cy)});
    const std::size_t guard = 4 * static_cast<std::size_t>(w + 1) * static_cast<std::size_t>(h + 1) + 8;
    for (std::size_t step = 0; step < guard; ++step) {
        cx += dx;
        cy += dy;
        const int lx = dy, ly = -dx;  // left of heading
        const int rx = -dy, ry = dx;  // right of heading
        const bool ahead_left = pixel_in_quadrant(cx, cy, dx + lx, dy + ly);
        const bool ahead_right = pixel_in_quadrant(cx, cy, dx + rx, dy + ry);
        int ndx = dx, ndy = dy;
        if (ahead_left) {
            ndx = lx;
            ndy = ly;
        } else if (!ahead_right) {
            ndx = rx;
            ndy = ry;
        }
        if (cx == x0 && cy == y0 && ndx == 1 && ndy == 0) break;
        if (ndx != dx || ndy != dy) poly.vertices.push_back({static_cast<double>(cx), static_cast<double>(cy)});
        dx = ndx;
        dy = ndy;
    }
    return poly;
}

namespace detail {

inline double point_segment_distance(const Point& p, const Point& a, const Point& b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    if (len2 == 0.0) return std::hypot(p.x - a.x, p.y - a.y);
    const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / len2, 0.0, 1.0);
    return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

// Douglas-Peucker over the open chain pts[first..last]; marks kept points.
inline void simplify_chain(const std::vector<Point>& pts, std::size_t first, std::size_t last, double tol,
                           std::vector<char>& keep) {
    std::vector<std::pair<std::size_t, std::size_t>> stack{{first, last}};
    while (!stack.empty()) {
        auto [a, b] = stack.back();
        stack.pop_back();
        if (b <= a + 1) continue;
        double worst = -1.0;
        std::size_t idx = a;
        for (std::size_t i = a + 1; i < b; ++i) {
            const double d = point_segment_distance(pts[i], pts[a], pts[b]);
            if (d > worst) {
                worst = d;
                idx = i;
            }
        }
        if (worst > tol) {
            keep[idx] = 1;
            stack.push_back({a, idx});
            stack.push_back({idx, b});
        }
    }
}

}  // namespace detail

/// Douglas-Peucker for a closed ring, split at vertex 0 and the vertex farthest from it.
inline Polygon simplify_polygon(const Polygon& poly, double tolerance) {
    const auto& v = poly.vertices;
    const std::size_t n = v.size();
    if (n <= 3) return poly;
    std::size_t far = 0;
    double far_d = -1;
    for (std::size_t i = 1; i < n; ++i) {
        const double d = std::hypot(v[i].x - v[0].x, v[i].y - v[0].y);
        if (d > far_d) {
            far_d = d;
            far = i;
        }
    }
    std::vector<Point> ring(v.begin(), v.end());
    ring.push_back(v[0]);
    std::vector<char> keep(ring.size(), 0);
    keep[0] = keep[far] = keep[n] = 1;
    detail::simplify_chain(ring, 0, far, tolerance, keep);
    detail::simplify_chain(ring, far, n, tolerance, keep);
    Polygon out;
    for (std::size_t i = 0; i < n; ++i)
        if (keep[i]) out.vertices.push_back(ring[i]);
    if (out.size() < 3) {
        // keep the vertex farthest from the chord so the ring stays a polygon
        std::size_t best = 0;
        double best_d = -1;
        for (std::size_t i = 0; i < n; ++i) {
            if (keep[i]) continue;
            const double d = detail::point_segment_distance(v[i], v[0], v[far]);
            if (d > best_d) {
                best_d = d;
                best = i;
            }
        }
        keep[best] = 1;
        out.vertices.clear();
        for (std::size_t i = 0; i < n; ++i)
            if (keep[i]) out.vertices.push_back(v[i]);
    }
    return out;
}

inline constexpr int kMinContourArea = 4;

/// One external outline per 8-connected component (area >= 4), largest first.
inline std::vector<Polygon> extract_contours(const BinaryMask& mask, double simplify_tolerance_px = 1.0) {
    const Components comps = label_components(mask);
    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(comps.area.size()); ++i)
        if (comps.area[i] >= kMinContourArea) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return comps.area[a] > comps.area[b]; });
    std::vector<Polygon> out;
    out.reserve(order.size());
    for (int i : order) {
        Polygon p = trace_boundary(comps.labels, i + 1, comps.first[i]);
        out.push_back(simplify_tolerance_px > 0 ? simplify_polygon(p, simplify_tolerance_px) : p);
    }
    return out;
}

/// Largest outline per structure, indexed by class code. Fatty outlines the union of all
/// non-background classes, matching the annotation layering.
inline std::array<std::optional<Polygon>, kNumClasses> label_outlines(const LabelMap& labels,
                                                                      double simplify_tolerance_px = 1.0) {
    std::array<std::optional<Polygon>, kNumClasses> out;
    for (auto c : {StructureClass::fatty, StructureClass::fibroglandular, StructureClass::pectoral,
                   StructureClass::nipple}) {
        BinaryMask mask = class_mask(labels, c);
        if (c == StructureClass::fatty) {
            auto m = mask.pixels();
            const auto l = labels.pixels();
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = l[i] != StructureClass::background;
        }
        auto contours = extract_contours(mask, simplify_tolerance_px);
        if (!contours.empty()) out[code(c)] = std::move(contours.front());
    }
    return out;
}

/// Otsu binarization, largest 8-connected component, external boundary.
inline Polygon breast_contour_init(const ImageRecord& record, double simplify_tolerance_px = 1.0, int bins = 256) {
    const double t = otsu_threshold(record.pixels, bins);
    BinaryMask fg(record.pixels.width(), record.pixels.height(), 0);
    const auto src = record.pixels.pixels();
    auto dst = fg.pixels();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]) > t ? 1 : 0;
    const Components comps = label_components(fg);
    if (comps.area.empty()) throw Error("geometry", "NoForeground", "threshold left no foreground pixels");
    const auto largest = static_cast<int>(std::max_element(comps.area.begin(), comps.area.end()) - comps.area.begin());
    Polygon p = trace_boundary(comps.labels, largest + 1, comps.first[largest]);
    return simplify_tolerance_px > 0 ? simplify_polygon(p, simplify_tolerance_px) : p;
}

inline BinaryMask fill_polygon_mask(const Polygon& poly, int width, int height) {
    Image<StructureClass> tmp(width, height, StructureClass::background);
    paint_polygon(tmp, poly, StructureClass::fatty);
    BinaryMask m(width, height, 0);
    auto src = tmp.pixels();
    auto dst = m.pixels();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == StructureClass::fatty ? 1 : 0;
    return m;
}

}  // namespace mammoseg
