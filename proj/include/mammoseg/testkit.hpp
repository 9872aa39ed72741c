#pragma once

// Synthetic mammography phantoms with exact ground truth.
//
// Geometry is built for a right breast (chest wall at x = 0) and mirrored for
// left laterality. Structures: half-ellipse breast, fibroglandular star-shaped
// blob, nipple disc centred on the breast outline, pectoral triangle (MLO) or
// thin chest-wall crescent (some CC images).

#include <mammoseg/core.hpp>
#include <mammoseg/geometry.hpp>
#include <mammoseg/preprocess.hpp>
#include <mammoseg/random.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>

namespace mammoseg::testkit {

struct PhantomParams {
    std::uint64_t seed = 7;
    std::string image_id = "phantom";
    std::string exam_id = "phantom";
    int width = 320;
    int height = 384;
    View view = View::MLO;
    Laterality laterality = Laterality::R;
    double pixel_spacing_mm = 0.1;
    double breast_radius_fraction = 0.78;  // breast depth as a fraction of width
    double breast_height_fraction = 0.44;  // vertical semi-axis as a fraction of height
    double pectoral_extent = 0.42;         // MLO triangle base as a fraction of width
    double cc_pectoral_probability = 0.57;
    double cc_pectoral_width = 0.08;
    int fibro_lobes = 3;
    double fibro_spread = 0.25;
    double fibro_scale = 1.0;
    double nipple_radius_fraction = 0.045;  // of min(width, height)
    double noise_sigma = 40.0;
    // background, fatty, fibroglandular, pectoral, nipple
    std::array<int, kNumClasses> intensity{150, 1300, 2300, 3200, 3000};
    double jitter = 0.05;  // relative geometric jitter drawn from the seed

    void validate() const {
        auto bad = [](const char* what) { throw Error("testkit", "InvalidParams", what); };
        if (width < 32 || height < 32) bad("image must be at least 32x32");
        if (!(breast_radius_fraction > 0.2 && breast_radius_fraction < 0.95)) bad("breast_radius_fraction out of range");
        if (!(breast_height_fraction > 0.1 && breast_height_fraction <= 0.5)) bad("breast_height_fraction out of range");
        if (!(pectoral_extent > 0.05 && pectoral_extent < 0.8)) bad("pectoral_extent out of range");
        if (!(cc_pectoral_probability >= 0.0 && cc_pectoral_probability <= 1.0)) bad("cc_pectoral_probability not a probability");
        if (fibro_lobes < 1 || fibro_lobes > 8) bad("fibro_lobes must be in [1, 8]");
        if (!(fibro_spread >= 0.0 && fibro_spread <= 0.5)) bad("fibro_spread must be in [0, 0.5]");
        if (!(fibro_scale > 0.3 && fibro_scale <= 1.4)) bad("fibro_scale must be in (0.3, 1.4]");
        if (!(nipple_radius_fraction > 0.005 && nipple_radius_fraction < 0.15)) bad("nipple_radius_fraction out of range");
        if (noise_sigma < 0.0) bad("noise_sigma must be non-negative");
        if (!(jitter >= 0.0 && jitter < 0.3)) bad("jitter must be in [0, 0.3)");
        for (int i = 1; i < kNumClasses; ++i)
            if (intensity[0] >= intensity[i]) bad("background must be the darkest tissue");
        if (!(intensity[1] < intensity[2] && intensity[2] < intensity[3] && intensity[2] < intensity[4]))
            bad("need fatty < fibroglandular < pectoral, nipple");
        for (int v : intensity)
            if (v < 0 || v > kMaxPixelValue) bad("intensity outside [0, 4095]");
    }
};

struct Phantom {
    ImageRecord record;
    AnnotationSet annotation;
    LabelMap truth;  // exact membership at pixel centres
};

namespace detail {

struct Shapes {
    // breast half-ellipse
    double cy, a, b;
    // fibroglandular star
    double fx, fy, fax, fay;
    std::array<double, 8> phase{};
    int lobes;
    double spread, scale;
    // nipple
    double nx, ny, nr;
    // pectoral
    bool has_pectoral;
    bool triangle;
    double pw, ph;         // triangle legs
    double cw, ch, ccy;    // crescent semi-axes and centre
};

inline double fibro_radius(const Shapes& s, double phi) {
    double acc = 0;
    for (int k = 0; k < s.lobes; ++k) acc += std::cos((k + 2) * phi + s.phase[k]);
    return s.scale * (1.0 + s.spread * acc / s.lobes);
}

inline StructureClass classify(const Shapes& s, double px, double py) {
    StructureClass c = StructureClass::background;
    const double ex = px / s.a, ey = (py - s.cy) / s.b;
    if (px >= 0 && ex * ex + ey * ey < 1.0) c = StructureClass::fatty;
    const double u = (px - s.fx) / s.fax, v = (py - s.fy) / s.fay;
    if (std::sqrt(u * u + v * v) < fibro_radius(s, std::atan2(v, u))) c = StructureClass::fibroglandular;
    if (s.has_pectoral) {
        if (s.triangle) {
            if (px / s.pw + py / s.ph < 1.0) c = StructureClass::pectoral;
        } else {
            const double cx = px / s.cw, cyy = (py - s.ccy) / s.ch;
            if (px >= 0 && cx * cx + cyy * cyy < 1.0) c = StructureClass::pectoral;
        }
    }
    const double dx = px - s.nx, dy = py - s.ny;
    if (dx * dx + dy * dy < s.nr * s.nr) c = StructureClass::nipple;
    return c;
}

inline Polygon half_ellipse(double a, double b, double cy, int n) {
    Polygon p;
    for (int i = 0; i <= n; ++i) {
        const double t = -std::numbers::pi / 2 + std::numbers::pi * i / n;
        p.vertices.push_back({a * std::cos(t), cy + b * std::sin(t)});
    }
    p.vertices.front().x = 0.0;
    p.vertices.back().x = 0.0;
    return p;
}

}  // namespace detail

/// Deterministic in `params` (including the seed).
inline Phantom generate_phantom(const PhantomParams& params) {
    params.validate();
    Rng rng(params.seed);
    auto jit = [&](double v) { return v * (1.0 + params.jitter * (2.0 * rng.uniform() - 1.0)); };
    const double W = params.width, H = params.height;

    detail::Shapes s{};
    s.cy = H / 2.0 + params.jitter * H * (rng.uniform() - 0.5);
    s.a = std::min(0.95 * W, jit(params.breast_radius_fraction * W));
    s.b = std::min(std::min(s.cy, H - s.cy) - 1.0, jit(params.breast_height_fraction * H));
    s.lobes = params.fibro_lobes;
    s.spread = params.fibro_spread;
    s.scale = params.fibro_scale;
    for (int k = 0; k < s.lobes; ++k) s.phase[k] = 2.0 * std::numbers::pi * rng.uniform();
    s.fx = jit(0.45 * s.a);
    s.fy = s.cy + 0.05 * s.b * (2.0 * rng.uniform() - 1.0);
    s.fax = 0.30 * s.a;
    s.fay = 0.42 * s.b;
    s.nr = jit(params.nipple_radius_fraction * std::min(W, H));
    s.nx = s.a;
    s.ny = s.cy;
    s.triangle = params.view == View::MLO;
    if (s.triangle) {
        s.has_pectoral = true;
        s.pw = jit(params.pectoral_extent * W);
        s.ph = std::min(0.75 * H, 1.9 * s.pw);
    } else {
        s.has_pectoral = rng.uniform() < params.cc_pectoral_probability;
        s.cw = jit(params.cc_pectoral_width * W);
        s.ch = 0.6 * s.b;
        s.ccy = s.cy;
    }

    Phantom out;
    auto& meta = out.record.meta;
    meta.image_id = params.image_id;
    meta.exam_id = params.exam_id;
    meta.view = params.view;
    meta.laterality = params.laterality;
    meta.pixel_spacing_mm = params.pixel_spacing_mm;
    meta.width = params.width;
    meta.height = params.height;

    LabelMap truth(params.width, params.height, StructureClass::background);
    for (int y = 0; y < params.height; ++y)
        for (int x = 0; x < params.width; ++x) truth.at(x, y) = detail::classify(s, x + 0.5, y + 0.5);

    AnnotationSet& ann = out.annotation;
    ann.image_id = params.image_id;
    ann.exam_id = params.exam_id;
    ann.view = params.view;
    ann.laterality = params.laterality;
    ann.pixel_spacing_mm = params.pixel_spacing_mm;
    ann.version = 1;
    ann.fatty = detail::half_ellipse(s.a, s.b, s.cy, 720);
    constexpr int kStar = 720;
    for (int i = 0; i < kStar; ++i) {
        const double phi = 2.0 * std::numbers::pi * i / kStar;
        const double r = detail::fibro_radius(s, phi);
        ann.fibroglandular.vertices.push_back({s.fx + s.fax * r * std::cos(phi), s.fy + s.fay * r * std::sin(phi)});
    }
    if (s.has_pectoral) {
        if (s.triangle)
            ann.pectoral = Polygon{{{0.0, 0.0}, {s.pw, 0.0}, {0.0, s.ph}}};
        else
            ann.pectoral = detail::half_ellipse(s.cw, s.ch, s.ccy, 360);
    }
    constexpr int kDisc = 360;
    for (int i = 0; i < kDisc; ++i) {
        const double t = 2.0 * std::numbers::pi * i / kDisc;
        ann.nipple.vertices.push_back({s.nx + s.nr * std::cos(t), s.ny + s.nr * std::sin(t)});
    }
    ann = clamp_annotation(ann, params.width, params.height);

    ImageU16 pixels(params.width, params.height, 0);
    for (int y = 0; y < params.height; ++y) {
        for (int x = 0; x < params.width; ++x) {
            double v = params.intensity[code(truth.at(x, y))] + params.noise_sigma * rng.normal();
            pixels.at(x, y) = static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, static_cast<long>(kMaxPixelValue)));
        }
    }

    if (params.laterality == Laterality::L) {
        truth = flip_horizontal(truth);
        pixels = flip_horizontal(pixels);
        AnnotationSet canonical = ann;
        canonical.laterality = Laterality::L;
        ann = standardize_orientation(canonical, params.width);
    }
    out.record.pixels = std::move(pixels);
    out.truth = std::move(truth);
    return out;
}

/// Fraction of the image covered by fibroglandular tissue in the exact truth.
inline double fibro_fraction(const LabelMap& truth) {
    std::size_t n = 0;
    for (auto c : truth.pixels()) n += c == StructureClass::fibroglandular;
    return static_cast<double>(n) / static_cast<double>(truth.size());
}

struct CorpusParams {
    std::uint64_t seed = 7;
    int width = 320;
    int height = 384;
    double noise_sigma = 40.0;
    double cc_pectoral_probability = 0.57;
    double nd_fraction = 0.0;  // share of exams written without a density
    bool dicom = false;        // write .dcm instead of PNG + sidecar
};

struct CorpusSummary {
    int exams = 0;
    int images = 0;
    std::array<int, 5> density_exams{};  // A, B, C, D, ND
};

/// Writes images/, annotations/ and density.csv under out_dir. Each exam
/// holds four images (R/L x MLO/CC); density follows the quartile of the
/// exam's fibroglandular scale. Defined in the testkit library.
CorpusSummary generate_corpus(int n_exams, const CorpusParams& params, const std::filesystem::path& out_dir);

}  // namespace mammoseg::testkit
