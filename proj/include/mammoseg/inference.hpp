#pragma once

// Loaded models behind a predictor interface, and run directories on disk.
//
// Run directory layout: config.json (model spec, training and preprocessing
// config), weights.bin (best epoch), history.csv, history.json, manifest.json.

#include <mammoseg/core.hpp>
#include <mammoseg/models.hpp>
#include <mammoseg/preprocess.hpp>
#include <mammoseg/training.hpp>

#include <filesystem>
#include <memory>
#include <string>

namespace mammoseg {

/// Maps a model-grid input (canonical orientation, [0,1]) to class probabilities.
/// Implementations must allow concurrent predict() calls.
class SegmentationPredictor {
public:
    virtual ~SegmentationPredictor() = default;
    virtual ProbabilityMaps predict(const ImageF& input) const = 0;
    virtual View view() const = 0;
    virtual const PreprocConfig& preprocessing() const = 0;
};

class TorchPredictor : public SegmentationPredictor {
public:
    TorchPredictor(SegmentationModel model, View view, PreprocConfig preproc);
    ProbabilityMaps predict(const ImageF& input) const override;
    View view() const override { return view_; }
    const PreprocConfig& preprocessing() const override { return preproc_; }
    const SegmentationModel& model() const { return model_; }

private:
    mutable SegmentationModel model_;  // forward() is logically const in eval mode
    View view_;
    PreprocConfig preproc_;
};

/// (1, 5, S, S) or (5, S, S) tensor -> ProbabilityMaps.
ProbabilityMaps to_probability_maps(const torch::Tensor& probs);

struct RunConfig {
    ModelSpec model;
    TrainConfig train;
    PreprocConfig preprocess;
    json extra = json::object();  // split path, data root, ...
};

json to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);

void write_run(const std::filesystem::path& dir, const RunConfig& config, SegmentationModel& model,
               const TrainHistory& history);
/// Errors: inference.UnknownRun (no config.json / weights.bin), models.* from the weight loader.
RunConfig read_run_config(const std::filesystem::path& dir);
std::shared_ptr<TorchPredictor> load_run(const std::filesystem::path& dir);

}  // namespace mammoseg
