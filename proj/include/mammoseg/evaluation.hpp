#pragma once

#include <mammoseg/core.hpp>
#include <mammoseg/geometry.hpp>
#include <mammoseg/serialization.hpp>

#include <array>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace mammoseg {

/// |P & G| / |P | G| over nonzero pixels; 1.0 when both are empty.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
    if (!pred.same_shape(gt)) throw Error("evaluation", "ShapeMismatch", "mask shapes differ");
    std::size_t inter = 0, uni = 0;
    const auto p = pred.pixels();
    const auto g = gt.pixels();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool a = p[i] != 0, b = g[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// IoU of one class between two label maps without materializing masks.
inline double class_iou(const LabelMap& pred, const LabelMap& gt, StructureClass c) {
    if (!pred.same_shape(gt)) throw Error("evaluation", "ShapeMismatch", "label map shapes differ");
    std::size_t inter = 0, uni = 0;
    const auto p = pred.pixels();
    const auto g = gt.pixels();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool a = p[i] == c, b = g[i] == c;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct ImageScore {
    std::string image_id;
    // empty where the class is absent from ground truth
    std::array<std::optional<double>, kNumClasses> iou{};
};

struct EvalReport {
    std::string name;  // table row label, usually the architecture
    std::string view;
    std::array<std::optional<double>, kNumClasses> class_mean{};
    std::array<int, kNumClasses> class_images{};
    std::optional<double> mean_all;         // background-inclusive, the tables' "Mean"
    std::optional<double> mean_structures;  // nipple, pectoral, fibro, fatty only
    std::vector<ImageScore> per_image;
    json fingerprint = json::object();
};

struct EvalSample {
    std::string image_id;
    ImageF input;  // model grid, canonical orientation
    LabelMap gt;   // same grid
};

namespace detail {

inline std::optional<double> mean_of(std::initializer_list<std::optional<double>> xs) {
    double s = 0;
    int n = 0;
    for (const auto& x : xs)
        if (x) {
            s += *x;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / n;
}

}  // namespace detail

/// Per-image IoU for every class present in ground truth.
inline ImageScore score_image(const std::string& image_id, const LabelMap& pred, const LabelMap& gt) {
    ImageScore s{image_id, {}};
    std::array<bool, kNumClasses> present{};
    for (auto v : gt.pixels()) present[code(v)] = true;
    for (auto c : kAllClasses)
        if (present[code(c)]) s.iou[code(c)] = class_iou(pred, gt, c);
    return s;
}

inline EvalReport aggregate(std::vector<ImageScore> scores, std::string name = {}, std::string view = {}) {
    EvalReport r;
    r.name = std::move(name);
    r.view = std::move(view);
    std::array<double, kNumClasses> sum{};
    for (const auto& s : scores)
        for (int c = 0; c < kNumClasses; ++c)
            if (s.iou[c]) {
                sum[c] += *s.iou[c];
                r.class_images[c]++;
            }
    for (int c = 0; c < kNumClasses; ++c)
        if (r.class_images[c] > 0) r.class_mean[c] = sum[c] / r.class_images[c];
    const auto& m = r.class_mean;
    r.mean_all = detail::mean_of({m[0], m[1], m[2], m[3], m[4]});
    r.mean_structures = detail::mean_of({m[1], m[2], m[3], m[4]});
    r.per_image = std::move(scores);
    return r;
}

/// Forward pass -> arg max -> per-class IoU against ground truth, aggregated
/// per structure over the images where that structure exists.
template <class Predictor>
EvalReport evaluate(Predictor&& predict, const std::vector<EvalSample>& samples, std::string name = {},
                    std::string view = {}) {
    std::vector<ImageScore> scores;
    scores.reserve(samples.size());
    for (const auto& s : samples) {
        const ProbabilityMaps probs = predict(s.input);
        scores.push_back(score_image(s.image_id, argmax_labels(probs), s.gt));
    }
    return aggregate(std::move(scores), std::move(name), std::move(view));
}

enum class ReportFormat { markdown, csv };

namespace detail {

inline std::string fmt2(const std::optional<double>& v) {
    if (!v) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

}  // namespace detail

/// One row per run; columns follow the published tables.
inline std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format) {
    static constexpr std::array<const char*, 5> kHeader{"Nipple", "Pectoral muscle", "Fibro tissue", "Fatty tissue",
                                                        "Mean"};
    std::string out;
    if (format == ReportFormat::markdown) {
        out += "| Architecture |";
        for (const char* h : kHeader) out += std::string(" ") + h + " |";
        out += "\n|---|---|---|---|---|---|\n";
    } else {
        out += "Architecture";
        for (const char* h : kHeader) out += std::string(",") + h;
        out += "\n";
    }
    for (const auto& r : reports) {
        const std::array<std::optional<double>, 5> cells{
            r.class_mean[code(StructureClass::nipple)], r.class_mean[code(StructureClass::pectoral)],
            r.class_mean[code(StructureClass::fibroglandular)], r.class_mean[code(StructureClass::fatty)], r.mean_all};
        if (format == ReportFormat::markdown) {
            out += "| " + r.name + " |";
            for (const auto& c : cells) out += " " + detail::fmt2(c) + " |";
        } else {
            out += r.name;
            for (const auto& c : cells) out += "," + detail::fmt2(c);
        }
        out += "\n";
    }
    return out;
}

inline json to_json(const EvalReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json classes = json::object();
    for (auto c : kAllClasses)
        classes[std::string(to_string(c))] = {{"mean_iou", opt(r.class_mean[code(c)])},
                                              {"images", r.class_images[code(c)]}};
    json images = json::array();
    for (const auto& s : r.per_image) {
        json row{{"image_id", s.image_id}};
        for (auto c : kAllClasses) row[std::string(to_string(c))] = opt(s.iou[code(c)]);
        images.push_back(row);
    }
    return json{{"name", r.name},
                {"view", r.view},
                {"classes", classes},
                {"mean_all_classes", opt(r.mean_all)},
                {"mean_structures", opt(r.mean_structures)},
                {"per_image", images},
                {"fingerprint", r.fingerprint}};
}

/// Fixed class colors, indexed by class code. The browser client uses the same table.
inline constexpr std::array<Rgb, kNumClasses> kClassPalette{{
    {0, 0, 0},        // background
    {240, 200, 90},   // fatty
    {220, 60, 60},    // fibroglandular
    {60, 110, 230},   // pectoral
    {60, 200, 90},    // nipple
}};

/// Preprocessed image | ground truth | prediction, side by side.
inline Image<Rgb> render_overlay(const ImageU8& preprocessed, const LabelMap& gt, const LabelMap& pred) {
    if (!preprocessed.same_shape(gt) || !gt.same_shape(pred))
        throw Error("evaluation", "ShapeMismatch", "overlay inputs must share a shape");
    const int w = gt.width(), h = gt.height();
    Image<Rgb> out(3 * w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::uint8_t v = preprocessed.at(x, y);
            out.at(x, y) = {v, v, v};
            out.at(w + x, y) = kClassPalette[code(gt.at(x, y))];
            out.at(2 * w + x, y) = kClassPalette[code(pred.at(x, y))];
        }
    }
    return out;
}

inline json palette_json() {
    json arr = json::array();
    for (auto c : kAllClasses) {
        const Rgb& p = kClassPalette[code(c)];
        arr.push_back({{"code", code(c)}, {"name", to_string(c)}, {"color", {p.r, p.g, p.b}}});
    }
    return arr;
}

}  // namespace mammoseg
