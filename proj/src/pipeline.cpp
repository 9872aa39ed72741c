#include <mammoseg/geometry.hpp>
#include <mammoseg/ingest.hpp>
#include <mammoseg/pipeline.hpp>

#include <cmath>

namespace fs = std::filesystem;

namespace mammoseg {

std::string display_name(Architecture a) {
    switch (a) {
        case Architecture::UNet: return "UNet";
        case Architecture::FPN: return "FPN";
        case Architecture::Linknet: return "Linknet";
        case Architecture::PSPNet: return "PSPNet";
    }
    return "UNet";
}

TrainOutcome train_run(const std::vector<DatasetEntry>& entries, const SplitAssignment& split, const RunConfig& run,
                       const fs::path& out_dir, const EpochCallback& on_epoch) {
    if (run.preprocess.model_size != run.model.input_size)
        throw Error("training", "InvalidConfig", "preprocess model_size must equal the model input size");
    const View view = run.train.view;
    const TensorSet train_set = to_tensors(load_samples(entries, split, view, Subset::train, run.preprocess));
    const TensorSet val_set = to_tensors(load_samples(entries, split, view, Subset::validation, run.preprocess));
    if (train_set.size() == 0)
        throw Error("training", "EmptyDataset", "no annotated " + std::string(to_string(view)) + " training images");
    if (val_set.size() == 0)
        throw Error("training", "EmptyDataset", "no annotated " + std::string(to_string(view)) + " validation images");
    TrainOutcome out;
    out.train_images = static_cast<std::size_t>(train_set.size());
    out.val_images = static_cast<std::size_t>(val_set.size());
    out.model = init_model(run.model, run.train.seed);
    out.history = train(out.model, train_set, val_set, run.train, on_epoch);
    if (!out_dir.empty()) write_run(out_dir, run, out.model, out.history);
    return out;
}

EvalReport evaluate_run(const SegmentationPredictor& predictor, const RunConfig& run,
                        const std::vector<DatasetEntry>& entries, const SplitAssignment& split,
                        const EvalOptions& options) {
    const auto samples = load_samples(entries, split, predictor.view(), options.subset, predictor.preprocessing());
    if (options.overlays_dir) {
        std::error_code ec;
        fs::create_directories(*options.overlays_dir, ec);
        if (ec) throw Error("evaluation", "IoError", "cannot create " + options.overlays_dir->string());
    }
    std::vector<ImageScore> scores;
    for (const auto& s : samples) {
        const LabelMap pred = argmax_labels(predictor.predict(s.input));
        scores.push_back(score_image(s.image_id, pred, s.gt));
        if (options.overlays_dir) {
            ImageU8 gray(s.input.width(), s.input.height());
            const auto src = s.input.pixels();
            auto dst = gray.pixels();
            for (std::size_t i = 0; i < src.size(); ++i)
                dst[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
            write_png(*options.overlays_dir / (s.image_id + ".png"), render_overlay(gray, s.gt, pred));
        }
    }
    EvalReport r = aggregate(std::move(scores), display_name(run.model.architecture), std::string(to_string(predictor.view())));
    r.fingerprint = to_json(run);
    r.fingerprint["subset"] = to_string(options.subset);
    r.fingerprint["images"] = samples.size();
    return r;
}

}  // namespace mammoseg
