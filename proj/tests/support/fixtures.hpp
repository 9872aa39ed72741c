#pragma once

#include <mammoseg/core.hpp>
#include <mammoseg/geometry.hpp>
#include <mammoseg/random.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <unistd.h>

namespace fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "mammoseg") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

/// Star-shaped polygon with `n` vertices around (cx, cy), radii in [rmin, rmax].
inline mammoseg::Polygon random_star(mammoseg::Rng& rng, double cx, double cy, double rmin, double rmax, int n) {
    mammoseg::Polygon p;
    for (int i = 0; i < n; ++i) {
        const double t = 2 * std::numbers::pi * (i + 0.8 * rng.uniform()) / n;
        const double r = rng.uniform(rmin, rmax);
        p.vertices.push_back({cx + r * std::cos(t), cy + r * std::sin(t)});
    }
    return p;
}

inline mammoseg::Image<std::uint8_t> random_mask(mammoseg::Rng& rng, int w, int h, double density) {
    mammoseg::Image<std::uint8_t> m(w, h, 0);
    for (auto& v : m.pixels()) v = rng.uniform() < density ? 1 : 0;
    return m;
}

/// Label map -> structure outlines -> label map again.
inline mammoseg::LabelMap contour_round_trip(const mammoseg::LabelMap& labels) {
    using namespace mammoseg;
    const auto o = label_outlines(labels);
    AnnotationSet a;
    a.image_id = "round-trip";
    const Polygon none;
    a.fatty = o[code(StructureClass::fatty)].value_or(none);
    a.fibroglandular = o[code(StructureClass::fibroglandular)].value_or(none);
    a.nipple = o[code(StructureClass::nipple)].value_or(none);
    a.pectoral = o[code(StructureClass::pectoral)];
    return rasterize_annotations(a, labels.width(), labels.height());
}

}  // namespace fixtures
