#pragma once

// Encoder-decoder segmentation networks with a 5-class softmax head.
// Tensors are NCHW: input (N, 1, S, S) in [0,1], output (N, 5, S, S).

#include <mammoseg/core.hpp>
#include <mammoseg/serialization.hpp>

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace mammoseg {

enum class Architecture { UNet, FPN, Linknet, PSPNet };
enum class EncoderKind { EfficientNetB3, SmallEncoder };

std::string_view to_string(Architecture a);
std::string_view to_string(EncoderKind e);
Architecture parse_architecture(std::string_view s);
EncoderKind parse_encoder(std::string_view s);

struct ModelSpec {
    Architecture architecture = Architecture::UNet;
    EncoderKind encoder = EncoderKind::SmallEncoder;
    int input_size = 384;
    int in_channels = 1;
    int num_classes = kNumClasses;
    bool pretrained_encoder = false;

    // Decoder widths; filled per architecture/encoder by default_spec().
    std::vector<int> decoder_channels;  // UNet blocks, deepest first
    int pyramid_channels = 0;           // FPN lateral width
    int segmentation_channels = 0;      // FPN merge width
    int psp_channels = 0;               // PSPNet bottleneck width
    int prefinal_channels = 0;          // Linknet last block width

    void validate() const;
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Spec with the decoder widths used for the given architecture and encoder.
ModelSpec default_spec(Architecture architecture, EncoderKind encoder, int input_size = 384);

json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const json& j);

/// Multi-scale feature extractor; forward returns features at strides 2, 4, 8, 16, 32.
struct EncoderImpl : torch::nn::Module {
    virtual std::vector<torch::Tensor> features(const torch::Tensor& x) = 0;
    virtual std::vector<int> channels() const = 0;  // one entry per stride
};

class SegmentationModelImpl : public torch::nn::Module {
public:
    explicit SegmentationModelImpl(ModelSpec spec);

    /// Class logits, same spatial size as the input.
    torch::Tensor logits(const torch::Tensor& x);
    /// Softmax probabilities over the class channel.
    torch::Tensor forward(const torch::Tensor& x);

    const ModelSpec& spec() const { return spec_; }
    std::int64_t parameter_count() const;

private:
    ModelSpec spec_;
    std::shared_ptr<EncoderImpl> encoder_;
    std::shared_ptr<torch::nn::Module> decoder_;
    std::function<torch::Tensor(const std::vector<torch::Tensor>&)> decode_;
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(SegmentationModel);

/// Half-pixel bilinear resize of an (N, C, H, W) tensor, differentiable.
torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width);

/// Errors: models.UnsupportedCombination.
SegmentationModel build_model(const ModelSpec& spec);

/// Weight file: magic, JSON header (format version, spec, tensor table), raw
/// little-endian tensor data, FNV-1a checksum of the data.
void save_weights(SegmentationModel& model, const std::filesystem::path& path);
/// Errors: models.SpecMismatch, models.CorruptFile.
SegmentationModel load_weights(const ModelSpec& spec, const std::filesystem::path& path);
/// Spec stored in a weight file header.
ModelSpec read_weights_spec(const std::filesystem::path& path);

/// Deep copy of parameters and buffers, for best-epoch snapshots.
std::vector<torch::Tensor> snapshot_state(SegmentationModel& model);
void restore_state(SegmentationModel& model, const std::vector<torch::Tensor>& state);

}  // namespace mammoseg
