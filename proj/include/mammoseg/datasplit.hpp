#pragma once

// Exam-grouped, density-balanced train/validation/test assignment.

#include <mammoseg/core.hpp>
#include <mammoseg/random.hpp>
#include <mammoseg/serialization.hpp>

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace mammoseg {

enum class Subset { train = 0, validation = 1, test = 2 };

inline constexpr std::array<Subset, 3> kAllSubsets{Subset::train, Subset::validation, Subset::test};

inline std::string_view to_string(Subset s) {
    switch (s) {
        case Subset::train: return "train";
        case Subset::validation: return "validation";
        case Subset::test: return "test";
    }
    return "train";
}

inline Subset parse_subset(std::string_view s) {
    if (s == "train") return Subset::train;
    if (s == "validation" || s == "val") return Subset::validation;
    if (s == "test") return Subset::test;
    throw Error("datasplit", "InvalidValue", "unknown subset '" + std::string(s) + "'");
}

struct SplitRecord {
    std::string image_id;
    std::string exam_id;
    View view = View::CC;
    DensityClass density = DensityClass::ND;
};

using SplitRatios = std::array<double, 3>;

/// Image counts per view, subset and density column (A, B, C, D, ND).
struct SplitSummary {
    // [view][subset][density]
    std::array<std::array<std::array<int, 5>, 3>, 2> counts{};

    int total(View v, Subset s) const {
        int t = 0;
        for (int d : counts[static_cast<int>(v)][static_cast<int>(s)]) t += d;
        return t;
    }
    int cell(View v, Subset s, DensityClass d) const {
        return counts[static_cast<int>(v)][static_cast<int>(s)][static_cast<int>(d)];
    }
};

struct SplitAssignment {
    std::map<std::string, Subset> exams;
    SplitRatios ratios{};
    std::uint64_t seed = 0;
    SplitSummary summary;

    Subset subset_of(const std::string& exam_id) const {
        auto it = exams.find(exam_id);
        if (it == exams.end()) throw Error("datasplit", "UnknownExam", exam_id);
        return it->second;
    }
};

inline void validate_ratios(const SplitRatios& r) {
    double sum = 0;
    for (double v : r) {
        if (!(v > 0.0) || !std::isfinite(v))
            throw Error("datasplit", "InvalidRatios", "every ratio must be positive");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw Error("datasplit", "InvalidRatios", "ratios must sum to 1");
}

inline SplitSummary summarize_split(const SplitAssignment& assignment, const std::vector<SplitRecord>& records) {
    SplitSummary s;
    for (const auto& r : records) {
        const Subset sub = assignment.subset_of(r.exam_id);
        s.counts[static_cast<int>(r.view)][static_cast<int>(sub)][static_cast<int>(r.density)]++;
    }
    return s;
}

namespace detail {

struct ExamGroup {
    std::string exam_id;
    int images = 0;
    DensityClass density = DensityClass::ND;
};

// Most frequent known density among the exam's images; ND if none is known.
inline DensityClass exam_density(const std::array<int, 5>& votes) {
    int best = 4, best_n = 0;
    for (int d = 0; d < 4; ++d)
        if (votes[d] > best_n) {
            best_n = votes[d];
            best = d;
        }
    return static_cast<DensityClass>(best);
}

// Subset with the largest deficit relative to its target; ties go to the earlier subset.
inline int neediest(const std::array<double, 3>& target, const std::array<int, 3>& current) {
    int best = 0;
    double best_def = -1e300;
    for (int s = 0; s < 3; ++s) {
        const double def = (target[s] - current[s]) / target[s];
        if (def > best_def) {
            best_def = def;
            best = s;
        }
    }
    return best;
}

}  // namespace detail

/// Exams are shuffled with the seed, then dealt class by class (A..D) to
/// whichever subset is furthest below its per-class image target. Exams
/// without a density (ND) go last and balance only the overall image counts.
inline SplitAssignment stratified_split(const std::vector<SplitRecord>& records, const SplitRatios& ratios,
                                        std::uint64_t seed) {
    if (records.empty()) throw Error("datasplit", "EmptyDataset", "no records to split");
    validate_ratios(ratios);

    std::map<std::string, std::pair<int, std::array<int, 5>>> by_exam;
    for (const auto& r : records) {
        auto& e = by_exam[r.exam_id];
        e.first++;
        e.second[static_cast<int>(r.density)]++;
    }
    std::vector<detail::ExamGroup> exams;
    for (const auto& [id, e] : by_exam) exams.push_back({id, e.first, detail::exam_density(e.second)});
    Rng rng(seed);
    rng.shuffle(exams);

    SplitAssignment out;
    out.ratios = ratios;
    out.seed = seed;
    std::array<int, 3> overall{};
    int total_images = 0;
    for (const auto& e : exams) total_images += e.images;

    for (int d = 0; d < 4; ++d) {
        int class_images = 0;
        for (const auto& e : exams)
            if (static_cast<int>(e.density) == d) class_images += e.images;
        if (class_images == 0) continue;
        std::array<double, 3> target{};
        for (int s = 0; s < 3; ++s) target[s] = class_images * ratios[s];
        std::array<int, 3> current{};
        for (const auto& e : exams) {
            if (static_cast<int>(e.density) != d) continue;
            const int s = detail::neediest(target, current);
            current[s] += e.images;
            overall[s] += e.images;
            out.exams[e.exam_id] = static_cast<Subset>(s);
        }
    }
    std::array<double, 3> target{};
    for (int s = 0; s < 3; ++s) target[s] = total_images * ratios[s];
    for (const auto& e : exams) {
        if (e.density != DensityClass::ND) continue;
        const int s = detail::neediest(target, overall);
        overall[s] += e.images;
        out.exams[e.exam_id] = static_cast<Subset>(s);
    }
    out.summary = summarize_split(out, records);
    return out;
}

inline json to_json(const SplitSummary& s) {
    json j = json::object();
    for (View v : {View::MLO, View::CC}) {
        json rows = json::object();
        for (Subset sub : kAllSubsets) {
            json row = json::object();
            for (DensityClass d : kAllDensities) row[std::string(to_string(d))] = s.cell(v, sub, d);
            row["Total"] = s.total(v, sub);
            rows[std::string(to_string(sub))] = row;
        }
        j[std::string(to_string(v))] = rows;
    }
    return j;
}

inline json to_json(const SplitAssignment& a) {
    json exams = json::object();
    for (const auto& [id, s] : a.exams) exams[id] = to_string(s);
    return json{{"seed", a.seed},
                {"ratios", {a.ratios[0], a.ratios[1], a.ratios[2]}},
                {"exams", exams},
                {"summary", to_json(a.summary)}};
}

inline SplitAssignment split_from_json(const json& j) {
    SplitAssignment a;
    try {
        a.seed = j.at("seed").get<std::uint64_t>();
        const auto& r = j.at("ratios");
        for (int i = 0; i < 3; ++i) a.ratios[i] = r.at(i).get<double>();
        for (const auto& [id, s] : j.at("exams").items()) a.exams[id] = parse_subset(s.get<std::string>());
    } catch (const json::exception& e) {
        throw Error("datasplit", "SchemaError", e.what());
    }
    if (const auto it = j.find("summary"); it != j.end()) {
        for (View v : {View::MLO, View::CC})
            for (Subset sub : kAllSubsets)
                for (DensityClass d : kAllDensities)
                    a.summary.counts[static_cast<int>(v)][static_cast<int>(sub)][static_cast<int>(d)] =
                        it->at(std::string(to_string(v))).at(std::string(to_string(sub))).value(std::string(to_string(d)), 0);
    }
    return a;
}

/// Text table in the published layout: one block per view, A..D, N/D, Total.
inline std::string render_split_table(const SplitSummary& s) {
    std::string out;
    for (View v : {View::MLO, View::CC}) {
        out += "| " + std::string(to_string(v)) + " | A | B | C | D | N/D | Total |\n|---|---|---|---|---|---|---|\n";
        for (Subset sub : kAllSubsets) {
            out += "| " + std::string(to_string(sub)) + " |";
            for (DensityClass d : kAllDensities) out += " " + std::to_string(s.cell(v, sub, d)) + " |";
            out += " " + std::to_string(s.total(v, sub)) + " |\n";
        }
        out += "\n";
    }
    return out;
}

}  // namespace mammoseg
