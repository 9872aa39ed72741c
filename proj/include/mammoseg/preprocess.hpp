#pragma once

// Image preparation: percentile windowing, CLAHE, byte rescale, left/right
// canonicalization and resize to the model grid.

#include <mammoseg/core.hpp>
#include <mammoseg/serialization.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace mammoseg {

struct PreprocConfig {
    double p_low = 2.0;
    double p_high = 98.0;
    double clahe_kernel_fraction = 1.0 / 8.0;
    double clahe_clip_limit = 0.01;
    int clahe_bins = 256;
    int model_size = 384;

    void validate() const {
        if (!(0.0 <= p_low && p_low < p_high && p_high <= 100.0))
            throw Error("preprocess", "InvalidConfig", "need 0 <= p_low < p_high <= 100");
        if (!(clahe_kernel_fraction > 0.0 && clahe_kernel_fraction <= 1.0))
            throw Error("preprocess", "InvalidConfig", "clahe_kernel_fraction must be in (0, 1]");
        if (!(clahe_clip_limit > 0.0)) throw Error("preprocess", "InvalidConfig", "clahe_clip_limit must be positive");
        if (clahe_bins < 2) throw Error("preprocess", "InvalidConfig", "clahe_bins must be >= 2");
        if (model_size <= 0) throw Error("preprocess", "InvalidConfig", "model_size must be positive");
    }

    friend bool operator==(const PreprocConfig&, const PreprocConfig&) = default;
};

inline json to_json(const PreprocConfig& c) {
    return json{{"p_low", c.p_low},
                {"p_high", c.p_high},
                {"clahe_kernel_fraction", c.clahe_kernel_fraction},
                {"clahe_clip_limit", c.clahe_clip_limit},
                {"clahe_bins", c.clahe_bins},
                {"model_size", c.model_size}};
}

/// Missing keys keep the values already in `c`. Errors: preprocess.InvalidConfig.
inline PreprocConfig preproc_config_from_json(const json& j, PreprocConfig c = {}) {
    try {
        c.p_low = j.value("p_low", c.p_low);
        c.p_high = j.value("p_high", c.p_high);
        c.clahe_kernel_fraction = j.value("clahe_kernel_fraction", c.clahe_kernel_fraction);
        c.clahe_clip_limit = j.value("clahe_clip_limit", c.clahe_clip_limit);
        c.clahe_bins = j.value("clahe_bins", c.clahe_bins);
        c.model_size = j.value("model_size", c.model_size);
    } catch (const json::exception& e) {
        throw Error("preprocess", "InvalidConfig", e.what());
    }
    c.validate();
    return c;
}

namespace detail {

// Percentile as base + step*frac, base taken from the data.
struct PercentileParts {
    double base;
    double step;
    double frac;
    double value() const { return base + step * frac; }
};

template <class T>
PercentileParts percentile_parts(std::vector<T>& values, double q) {
    const std::size_t n = values.size();
    const double pos = q / 100.0 * static_cast<double>(n - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    lo = std::min(lo, n - 1);
    const std::size_t hi = std::min(lo + 1, n - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = static_cast<double>(values[lo]);
    double b = a;
    if (hi != lo) b = static_cast<double>(*std::min_element(values.begin() + static_cast<std::ptrdiff_t>(hi), values.end()));
    return {a, b - a, pos - static_cast<double>(lo)};
}

}  // namespace detail

/// Linear-interpolation percentile of an arbitrary sample (numpy "linear" method).
template <class T>
double percentile(std::span<const T> values, double q) {
    if (values.empty()) throw Error("preprocess", "EmptyImage", "percentile of an empty sample");
    std::vector<T> work(values.begin(), values.end());
    return detail::percentile_parts(work, q).value();
}

/// clip((v - P_low) / (P_high - P_low), 0, 1); all zeros when the percentiles coincide.
template <class T>
ImageD percentile_normalize(const Image<T>& pixels, double p_low, double p_high) {
    if (pixels.empty()) throw Error("preprocess", "EmptyImage", "cannot normalize an empty image");
    std::vector<T> work(pixels.pixels().begin(), pixels.pixels().end());
    const auto lo = detail::percentile_parts(work, p_low);
    const auto hi = detail::percentile_parts(work, p_high);
    ImageD out(pixels.width(), pixels.height(), 0.0);
    const double span = (hi.base - lo.base) + (hi.step * hi.frac - lo.step * lo.frac);
    if (!(span > 0.0)) return out;
    auto src = pixels.pixels();
    auto dst = out.pixels();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double num = (static_cast<double>(src[i]) - lo.base) - lo.step * lo.frac;
        dst[i] = std::clamp(num / span, 0.0, 1.0);
    }
    return out;
}

namespace detail {

struct TileGrid {
    int count;
    std::vector<int> start;
    std::vector<int> extent;
    std::vector<double> center;
};

inline TileGrid make_tile_grid(int length, double fraction) {
    const int tile = std::max(1, static_cast<int>(std::ceil(length * fraction - 1e-9)));
    TileGrid g;
    g.count = (length + tile - 1) / tile;
    for (int i = 0; i < g.count; ++i) {
        const int s = i * tile;
        const int e = std::min(length, s + tile) - s;
        g.start.push_back(s);
        g.extent.push_back(e);
        g.center.push_back(s + 0.5 * e - 0.5);
    }
    return g;
}

// Lower tile index and interpolation weight toward the next tile.
inline std::pair<int, double> locate(const TileGrid& g, int p) {
    if (g.count == 1 || p <= g.center.front()) return {0, 0.0};
    if (p >= g.center.back()) return {g.count - 1, 0.0};
    int i = 0;
    while (i + 1 < g.count && g.center[i + 1] <= p) ++i;
    return {i, (p - g.center[i]) / (g.center[i + 1] - g.center[i])};
}

inline int quantize(double v, int bins) {
    const int b = static_cast<int>(std::floor(v * bins));
    return std::clamp(b, 0, bins - 1);
}

}  // namespace detail

/// Contrast-limited adaptive histogram equalization on a [0,1] image.
///
/// Tiles measure ceil(H*f) x ceil(W*f) pixels (f = clahe_kernel_fraction);
/// trailing tiles may be smaller. Each tile histogram is clipped at
/// clip_limit * tile_pixels counts (at least 1), the excess is spread
/// uniformly over all bins, and its normalized CDF becomes the tile mapping.
/// Pixels blend the mappings of the four nearest tile centres bilinearly;
/// pixels outside the outermost centres use the nearest tiles only.
inline ImageD clahe(const ImageD& img, const PreprocConfig& cfg) {
    if (img.empty()) throw Error("preprocess", "EmptyImage", "cannot equalize an empty image");
    const int bins = cfg.clahe_bins;
    const auto gy = detail::make_tile_grid(img.height(), cfg.clahe_kernel_fraction);
    const auto gx = detail::make_tile_grid(img.width(), cfg.clahe_kernel_fraction);

    std::vector<std::vector<double>> maps(static_cast<std::size_t>(gy.count) * gx.count);
    for (int ty = 0; ty < gy.count; ++ty) {
        for (int tx = 0; tx < gx.count; ++tx) {
            std::vector<double> hist(bins, 0.0);
            for (int y = gy.start[ty]; y < gy.start[ty] + gy.extent[ty]; ++y)
                for (int x = gx.start[tx]; x < gx.start[tx] + gx.extent[tx]; ++x)
                    hist[detail::quantize(img.at(x, y), bins)] += 1.0;
            const double n = static_cast<double>(gy.extent[ty]) * gx.extent[tx];
            const double limit = std::max(1.0, cfg.clahe_clip_limit * n);
            double excess = 0.0;
            for (double& h : hist) {
                if (h > limit) {
                    excess += h - limit;
                    h = limit;
                }
            }
            const double share = excess / bins;
            auto& map = maps[static_cast<std::size_t>(ty) * gx.count + tx];
            map.resize(bins);
            double cdf = 0.0;
            for (int b = 0; b < bins; ++b) {
                cdf += hist[b] + share;
                map[b] = std::clamp(cdf / n, 0.0, 1.0);
            }
        }
    }

    ImageD out(img.width(), img.height(), 0.0);
    std::vector<std::pair<int, double>> col(img.width());
    for (int x = 0; x < img.width(); ++x) col[x] = detail::locate(gx, x);
    for (int y = 0; y < img.height(); ++y) {
        const auto [ty0, wy] = detail::locate(gy, y);
        const int ty1 = std::min(ty0 + 1, gy.count - 1);
        for (int x = 0; x < img.width(); ++x) {
            const auto [tx0, wx] = col[x];
            const int tx1 = std::min(tx0 + 1, gx.count - 1);
            const int b = detail::quantize(img.at(x, y), bins);
            auto m = [&](int ty, int tx) { return maps[static_cast<std::size_t>(ty) * gx.count + tx][b]; };
            const double top = (1.0 - wx) * m(ty0, tx0) + wx * m(ty0, tx1);
            const double bottom = (1.0 - wx) * m(ty1, tx0) + wx * m(ty1, tx1);
            out.at(x, y) = std::clamp((1.0 - wy) * top + wy * bottom, 0.0, 1.0);
        }
    }
    return out;
}

/// round(v * 255), half away from zero.
inline ImageU8 rescale_to_bytes(const ImageD& img) {
    ImageU8 out(img.width(), img.height(), 0);
    auto src = img.pixels();
    auto dst = out.pixels();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0), 0L, 255L));
    return out;
}

template <class T>
Image<T> flip_horizontal(const Image<T>& img) {
    Image<T> out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) out.at(img.width() - 1 - x, y) = img.at(x, y);
    return out;
}

/// Left breasts are mirrored so every image presents as a right breast.
template <class T>
Image<T> standardize_orientation(const Image<T>& img, Laterality laterality) {
    return laterality == Laterality::L ? flip_horizontal(img) : img;
}

inline Polygon flip_polygon(const Polygon& poly, double width) {
    Polygon out = poly;
    for (auto& p : out.vertices) p.x = width - p.x;
    return out;
}

inline AnnotationSet standardize_orientation(const AnnotationSet& ann, int width) {
    if (ann.laterality == Laterality::R) return ann;
    AnnotationSet out = ann;
    out.fatty = flip_polygon(ann.fatty, width);
    out.fibroglandular = flip_polygon(ann.fibroglandular, width);
    out.nipple = flip_polygon(ann.nipple, width);
    if (ann.pectoral) out.pectoral = flip_polygon(*ann.pectoral, width);
    return out;
}

/// Bilinear resize with half-pixel centres (edge-clamped).
inline ImageF resize_bilinear(const ImageF& img, int width, int height) {
    if (img.empty()) throw Error("preprocess", "EmptyImage", "cannot resize an empty image");
    ImageF out(width, height, 0.0f);
    const double sx = static_cast<double>(img.width()) / width;
    const double sy = static_cast<double>(img.height()) / height;
    for (int y = 0; y < height; ++y) {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, img.height() - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, img.width() - 1);
            const double wx = fx - x0;
            const double top = (1 - wx) * img.at(x0, y0) + wx * img.at(x1, y0);
            const double bot = (1 - wx) * img.at(x0, y1) + wx * img.at(x1, y1);
            out.at(x, y) = static_cast<float>((1 - wy) * top + wy * bot);
        }
    }
    return out;
}

template <class T>
Image<T> resize_nearest(const Image<T>& img, int width, int height) {
    if (img.empty()) throw Error("preprocess", "EmptyImage", "cannot resize an empty image");
    Image<T> out(width, height);
    std::vector<int> xs(width);
    for (int x = 0; x < width; ++x)
        xs[x] = std::min(img.width() - 1, static_cast<int>(std::floor((x + 0.5) * img.width() / width)));
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(img.height() - 1, static_cast<int>(std::floor((y + 0.5) * img.height() / height)));
        for (int x = 0; x < width; ++x) out.at(x, y) = img.at(xs[x], sy);
    }
    return out;
}

/// Byte image -> [0,1] floats on the square model grid. Aspect ratio is not kept.
inline ImageF resize_for_model(const ImageU8& img, int model_size) {
    ImageF f(img.width(), img.height(), 0.0f);
    auto src = img.pixels();
    auto dst = f.pixels();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
    if (img.width() == model_size && img.height() == model_size) return f;
    ImageF r = resize_bilinear(f, model_size, model_size);
    for (float& v : r.pixels()) v = std::clamp(v, 0.0f, 1.0f);
    return r;
}

inline LabelMap resize_for_model(const LabelMap& labels, int model_size) {
    return resize_nearest(labels, model_size, model_size);
}

struct PreprocessResult {
    ImageF model_input;  // model_size^2, [0,1], canonical orientation
    ImageU8 display;     // original geometry and orientation
};

inline ImageU8 display_image(const ImageRecord& record, const PreprocConfig& cfg) {
    cfg.validate();
    const ImageD norm = percentile_normalize(record.pixels, cfg.p_low, cfg.p_high);
    return rescale_to_bytes(clahe(norm, cfg));
}

inline PreprocessResult preprocess_pipeline(const ImageRecord& record, const PreprocConfig& cfg) {
    PreprocessResult r;
    r.display = display_image(record, cfg);
    r.model_input = resize_for_model(standardize_orientation(r.display, record.meta.laterality), cfg.model_size);
    return r;
}

/// Full-resolution ground truth -> canonical orientation on the model grid.
inline LabelMap labels_for_model(const LabelMap& labels, Laterality laterality, int model_size) {
    return resize_for_model(standardize_orientation(labels, laterality), model_size);
}

}  // namespace mammoseg
