#pragma once

// Soft-Jaccard training with Adam and early stopping on validation loss.

#include <mammoseg/core.hpp>
#include <mammoseg/evaluation.hpp>
#include <mammoseg/models.hpp>

#include <torch/torch.h>

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mammoseg {

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 4;
    int max_epochs = 65;
    int patience = 20;
    std::uint64_t seed = 0;
    View view = View::MLO;

    /// Errors: training.InvalidConfig.
    void validate() const;
};

json to_json(const TrainConfig& c);
/// Missing keys keep the values already in `base`.
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    std::array<std::optional<double>, kNumClasses> val_iou{};
    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    std::string optimizer = "adam";
    bool stopped_early = false;

    const EpochRecord& best() const { return epochs.at(static_cast<std::size_t>(best_epoch - 1)); }
    friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

json to_json(const TrainHistory& h);
/// One row per epoch; doubles printed with 17 significant digits so the file round-trips exactly.
std::string history_csv(const TrainHistory& h);

/// Images stacked as (N, 1, S, S) float and labels as (N, S, S) uint8.
struct TensorSet {
    torch::Tensor inputs;
    torch::Tensor labels;
    std::vector<std::string> ids;

    std::int64_t size() const { return inputs.defined() ? inputs.size(0) : 0; }
};

/// Errors: training.ShapeMismatch when samples disagree in size.
TensorSet to_tensors(const std::vector<EvalSample>& samples);

/// (N, S, S) integer labels -> (N, 5, S, S) float one-hot.
torch::Tensor one_hot_batch(const torch::Tensor& labels, torch::Dtype dtype = torch::kFloat32);

/// 1 - mean_c (sum p*g + eps) / (sum p + sum g - sum p*g + eps), sums over batch and pixels.
/// Errors: training.ShapeMismatch.
torch::Tensor jaccard_loss(const torch::Tensor& pred, const torch::Tensor& target, double epsilon = 1.0);

struct ValidationResult {
    double loss = 0;
    std::array<std::optional<double>, kNumClasses> iou{};
};

/// Loss over the whole set in one reduction (same formula as a single giant batch), plus
/// per-class mean IoU of the arg max over images containing the class.
ValidationResult validate_model(SegmentationModel& model, const TensorSet& data, int batch_size = 4);

/// Seeds the torch generator and builds the model, so initial weights depend only on (spec, seed).
SegmentationModel init_model(const ModelSpec& spec, std::uint64_t seed);

using EpochCallback = std::function<void(const EpochRecord&, SegmentationModel&)>;

/// Leaves `model` holding the weights of the best epoch.
/// Errors: training.EmptyDataset, training.DivergedLoss, training.InvalidConfig.
TrainHistory train(SegmentationModel& model, const TensorSet& train_set, const TensorSet& val_set,
                   const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace mammoseg
