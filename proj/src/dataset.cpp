#include <mammoseg/dataset.hpp>
#include <mammoseg/geometry.hpp>

namespace mammoseg {

std::vector<SplitRecord> split_records(const std::vector<DatasetEntry>& entries) {
    std::vector<SplitRecord> out;
    for (const auto& e : entries) {
        if (!e.annotated()) continue;
        DensityClass d = e.density;
        if (d == DensityClass::ND) d = e.annotation->density;
        out.push_back({e.meta.image_id, e.meta.exam_id, e.meta.view, d});
    }
    return out;
}

std::vector<DatasetEntry> select_entries(const std::vector<DatasetEntry>& entries, const SplitAssignment& split,
                                         View view, Subset subset) {
    std::vector<DatasetEntry> out;
    for (const auto& e : entries) {
        if (!e.annotated() || e.meta.view != view) continue;
        const auto it = split.exams.find(e.meta.exam_id);
        if (it != split.exams.end() && it->second == subset) out.push_back(e);
    }
    return out;
}

EvalSample make_sample(const DatasetEntry& entry, const PreprocConfig& cfg) {
    if (!entry.annotated()) throw Error("dataset", "MissingAnnotation", entry.meta.image_id);
    const ImageRecord record = load_record({entry.image_path, entry.format});
    const PreprocessResult pre = preprocess_pipeline(record, cfg);
    const LabelMap labels = rasterize_annotations(*entry.annotation, record.meta.width, record.meta.height);
    return {record.meta.image_id, pre.model_input, labels_for_model(labels, record.meta.laterality, cfg.model_size)};
}

std::vector<EvalSample> load_samples(const std::vector<DatasetEntry>& entries, const SplitAssignment& split, View view,
                                     Subset subset, const PreprocConfig& cfg) {
    std::vector<EvalSample> out;
    for (const auto& e : select_entries(entries, split, view, subset)) out.push_back(make_sample(e, cfg));
    return out;
}

}  // namespace mammoseg
