#pragma once

// Dataset -> trained run -> evaluation report, shared by the CLI and the acceptance suite.

#include <mammoseg/dataset.hpp>
#include <mammoseg/evaluation.hpp>
#include <mammoseg/inference.hpp>
#include <mammoseg/training.hpp>

#include <filesystem>
#include <optional>

namespace mammoseg {

/// Table row label: "UNet", "FPN", "Linknet", "PSPNet".
std::string display_name(Architecture a);

struct TrainOutcome {
    SegmentationModel model{nullptr};
    TrainHistory history;
    std::size_t train_images = 0;
    std::size_t val_images = 0;
};

/// Loads the train and validation subsets of `run.train.view`, trains, and writes the run
/// directory when `out_dir` is non-empty.
TrainOutcome train_run(const std::vector<DatasetEntry>& entries, const SplitAssignment& split, const RunConfig& run,
                       const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

struct EvalOptions {
    Subset subset = Subset::test;
    std::optional<std::filesystem::path> overlays_dir;
};

/// Runs the predictor over one subset of its view. The fingerprint records the run config.
EvalReport evaluate_run(const SegmentationPredictor& predictor, const RunConfig& run,
                        const std::vector<DatasetEntry>& entries, const SplitAssignment& split,
                        const EvalOptions& options = {});

}  // namespace mammoseg
