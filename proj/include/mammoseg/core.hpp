#pragma once

#include <mammoseg/error.hpp>

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mammoseg {

inline constexpr int kMaxPixelValue = 4095;
inline constexpr int kNumClasses = 5;

/// Dense row-major 2-D raster.
template <class T>
class Image {
public:
    using value_type = T;

    Image() = default;
    Image(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(std::max(width, 0)) * static_cast<std::size_t>(std::max(height, 0)), fill) {}
    Image(int width, int height, std::vector<T> data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
            throw Error("core", "ShapeMismatch", "pixel buffer does not match width*height");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

    std::span<T> pixels() noexcept { return data_; }
    std::span<const T> pixels() const noexcept { return data_; }
    std::vector<T>& buffer() noexcept { return data_; }
    const std::vector<T>& buffer() const noexcept { return data_; }

    bool same_shape(const auto& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    friend bool operator==(const Rgb&, const Rgb&) = default;
};

using ImageU16 = Image<std::uint16_t>;
using ImageU8 = Image<std::uint8_t>;
using ImageF = Image<float>;
using ImageD = Image<double>;

enum class View { MLO, CC };
enum class Laterality { L, R };
enum class DensityClass { A, B, C, D, ND };

/// Class codes double as one-hot plane index and model output channel.
/// Ascending code == rasterization priority.
enum class StructureClass : std::uint8_t {
    background = 0,
    fatty = 1,
    fibroglandular = 2,
    pectoral = 3,
    nipple = 4,
};

inline constexpr std::array<StructureClass, kNumClasses> kAllClasses{
    StructureClass::background, StructureClass::fatty, StructureClass::fibroglandular,
    StructureClass::pectoral, StructureClass::nipple};

inline constexpr std::array<DensityClass, 5> kAllDensities{
    DensityClass::A, DensityClass::B, DensityClass::C, DensityClass::D, DensityClass::ND};

constexpr int code(StructureClass c) noexcept { return static_cast<int>(c); }

inline std::string_view to_string(View v) { return v == View::MLO ? "MLO" : "CC"; }
inline std::string_view to_string(Laterality l) { return l == Laterality::L ? "L" : "R"; }
inline std::string_view to_string(DensityClass d) {
    switch (d) {
        case DensityClass::A: return "A";
        case DensityClass::B: return "B";
        case DensityClass::C: return "C";
        case DensityClass::D: return "D";
        case DensityClass::ND: return "ND";
    }
    return "ND";
}
inline std::string_view to_string(StructureClass c) {
    switch (c) {
        case StructureClass::background: return "background";
        case StructureClass::fatty: return "fatty";
        case StructureClass::fibroglandular: return "fibroglandular";
        case StructureClass::pectoral: return "pectoral";
        case StructureClass::nipple: return "nipple";
    }
    return "background";
}

inline View parse_view(std::string_view s) {
    if (s == "MLO" || s == "mlo") return View::MLO;
    if (s == "CC" || s == "cc") return View::CC;
    throw Error("core", "InvalidValue", "unknown view '" + std::string(s) + "'");
}
inline Laterality parse_laterality(std::string_view s) {
    if (s == "L" || s == "l") return Laterality::L;
    if (s == "R" || s == "r") return Laterality::R;
    throw Error("core", "InvalidValue", "unknown laterality '" + std::string(s) + "'");
}
inline DensityClass parse_density(std::string_view s) {
    if (s == "A") return DensityClass::A;
    if (s == "B") return DensityClass::B;
    if (s == "C") return DensityClass::C;
    if (s == "D") return DensityClass::D;
    if (s == "ND" || s == "N/D" || s.empty()) return DensityClass::ND;
    throw Error("core", "InvalidValue", "unknown density '" + std::string(s) + "'");
}

struct ImageMeta {
    std::string image_id;
    std::string exam_id;
    View view = View::CC;
    Laterality laterality = Laterality::R;
    double pixel_spacing_mm = 0.1;
    int width = 0;
    int height = 0;

    friend bool operator==(const ImageMeta&, const ImageMeta&) = default;
};

/// One mammogram: metadata plus raw 12-bit intensities.
struct ImageRecord {
    ImageMeta meta;
    ImageU16 pixels;

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Point {
    double x = 0;
    double y = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

/// Implicitly closed: the last vertex connects back to the first.
struct Polygon {
    std::vector<Point> vertices;

    std::size_t size() const noexcept { return vertices.size(); }
    friend bool operator==(const Polygon&, const Polygon&) = default;
};

struct AnnotationSet {
    std::string image_id;
    std::string exam_id;
    View view = View::CC;
    Laterality laterality = Laterality::R;
    double pixel_spacing_mm = 0.1;
    DensityClass density = DensityClass::ND;
    int version = 0;
    Polygon fatty;
    Polygon fibroglandular;
    std::optional<Polygon> pectoral;
    Polygon nipple;

    friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

/// Per-pixel class codes; a distinct element type keeps label rasters apart from byte images.
using LabelMap = Image<StructureClass>;

/// kNumClasses planes, each width*height, plane-major.
class ProbabilityMaps {
public:
    ProbabilityMaps() = default;
    ProbabilityMaps(int width, int height)
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(kNumClasses) * width * height, 0.0f) {}

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(width_) * height_; }

    float& at(int c, int x, int y) { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }
    float at(int c, int x, int y) const { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }

    std::span<float> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }
    std::vector<float>& buffer() noexcept { return data_; }
    const std::vector<float>& buffer() const noexcept { return data_; }

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<float> data_;
};

struct Violation {
    std::string field;
    std::string rule;
    friend bool operator==(const Violation&, const Violation&) = default;
};

inline std::vector<Violation> validate_record(const ImageRecord& record) {
    std::vector<Violation> out;
    const auto& m = record.meta;
    if (m.width <= 0) out.push_back({"width", "must be positive"});
    if (m.height <= 0) out.push_back({"height", "must be positive"});
    if (record.pixels.width() != m.width || record.pixels.height() != m.height)
        out.push_back({"pixels", "shape must match width x height"});
    if (!(m.pixel_spacing_mm > 0.0) || !std::isfinite(m.pixel_spacing_mm))
        out.push_back({"pixel_spacing_mm", "must be positive"});
    const auto& px = record.pixels.pixels();
    auto bad = std::find_if(px.begin(), px.end(), [](std::uint16_t v) { return v > kMaxPixelValue; });
    if (bad != px.end())
        out.push_back({"pixels", "values must lie in [0, 4095]"});
    return out;
}

namespace detail {

inline double cross(const Point& o, const Point& a, const Point& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool segments_cross(const Point& a, const Point& b, const Point& c, const Point& d) {
    double d1 = cross(c, d, a), d2 = cross(c, d, b), d3 = cross(a, b, c), d4 = cross(a, b, d);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace detail

/// Proper crossings between non-adjacent edges. O(n^2); polygons here are at most a few thousand vertices.
inline bool self_intersects(const Polygon& poly) {
    const auto& v = poly.vertices;
    const std::size_t n = v.size();
    if (n < 4) return false;
    for (std::size_t i = 0; i < n; ++i) {
        const Point& a = v[i];
        const Point& b = v[(i + 1) % n];
        for (std::size_t j = i + 2; j < n; ++j) {
            if (i == 0 && j == n - 1) continue;
            if (detail::segments_cross(a, b, v[j], v[(j + 1) % n])) return true;
        }
    }
    return false;
}

inline double signed_area(const Polygon& poly) {
    const auto& v = poly.vertices;
    double a = 0;
    for (std::size_t i = 0, n = v.size(); i < n; ++i) {
        const Point& p = v[i];
        const Point& q = v[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * a;
}

inline std::vector<Violation> validate_polygon(const Polygon& poly, const std::string& field) {
    std::vector<Violation> out;
    const auto& v = poly.vertices;
    if (v.size() < 3) {
        out.push_back({field, "polygon needs at least 3 vertices"});
        return out;
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i].x) || !std::isfinite(v[i].y)) {
            out.push_back({field, "vertex coordinates must be finite"});
            return out;
        }
        if (v[i] == v[(i + 1) % v.size()]) {
            out.push_back({field, "consecutive vertices must differ"});
            return out;
        }
    }
    return out;
}

/// Hard violations of the annotation invariants. Self-intersection is not one of them; see annotation_warnings().
inline std::vector<Violation> validate_annotation(const AnnotationSet& ann) {
    std::vector<Violation> out;
    if (ann.image_id.empty()) out.push_back({"image_id", "must not be empty"});
    if (ann.version < 0) out.push_back({"version", "must be non-negative"});
    auto add = [&out](std::vector<Violation> v) { out.insert(out.end(), v.begin(), v.end()); };
    add(validate_polygon(ann.fatty, "structures.fatty"));
    add(validate_polygon(ann.fibroglandular, "structures.fibroglandular"));
    add(validate_polygon(ann.nipple, "structures.nipple"));
    if (ann.pectoral)
        add(validate_polygon(*ann.pectoral, "structures.pectoral"));
    else if (ann.view == View::MLO)
        out.push_back({"structures.pectoral", "required for MLO view"});
    return out;
}

inline std::vector<Violation> annotation_warnings(const AnnotationSet& ann) {
    std::vector<Violation> out;
    auto check = [&out](const Polygon& p, const char* field) {
        if (p.size() >= 4 && self_intersects(p)) out.push_back({field, "self-intersecting polygon"});
    };
    check(ann.fatty, "structures.fatty");
    check(ann.fibroglandular, "structures.fibroglandular");
    check(ann.nipple, "structures.nipple");
    if (ann.pectoral) check(*ann.pectoral, "structures.pectoral");
    return out;
}

/// Clamp to [0,width]x[0,height] and drop consecutive duplicates produced by clamping.
inline Polygon clamp_polygon(const Polygon& poly, int width, int height) {
    Polygon out;
    out.vertices.reserve(poly.size());
    for (const auto& p : poly.vertices) {
        Point q{std::clamp(p.x, 0.0, static_cast<double>(width)), std::clamp(p.y, 0.0, static_cast<double>(height))};
        if (out.vertices.empty() || !(out.vertices.back() == q)) out.vertices.push_back(q);
    }
    while (out.vertices.size() > 1 && out.vertices.front() == out.vertices.back()) out.vertices.pop_back();
    return out;
}

inline AnnotationSet clamp_annotation(AnnotationSet ann, int width, int height) {
    ann.fatty = clamp_polygon(ann.fatty, width, height);
    ann.fibroglandular = clamp_polygon(ann.fibroglandular, width, height);
    ann.nipple = clamp_polygon(ann.nipple, width, height);
    if (ann.pectoral) ann.pectoral = clamp_polygon(*ann.pectoral, width, height);
    return ann;
}

}  // namespace mammoseg
