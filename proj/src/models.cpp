#include <mammoseg/models.hpp>

#include <array>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace mammoseg {

std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::UNet: return "unet";
        case Architecture::FPN: return "fpn";
        case Architecture::Linknet: return "linknet";
        case Architecture::PSPNet: return "pspnet";
    }
    return "unet";
}

std::string_view to_string(EncoderKind e) { return e == EncoderKind::EfficientNetB3 ? "efficientnet-b3" : "small"; }

Architecture parse_architecture(std::string_view s) {
    std::string l(s);
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    if (l == "unet") return Architecture::UNet;
    if (l == "fpn") return Architecture::FPN;
    if (l == "linknet") return Architecture::Linknet;
    if (l == "pspnet" || l == "psp") return Architecture::PSPNet;
    throw Error("models", "InvalidValue", "unknown architecture '" + std::string(s) + "'");
}

EncoderKind parse_encoder(std::string_view s) {
    std::string l(s);
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    if (l == "small" || l == "smallencoder") return EncoderKind::SmallEncoder;
    if (l == "efficientnet-b3" || l == "efficientnetb3" || l == "effb3") return EncoderKind::EfficientNetB3;
    throw Error("models", "InvalidValue", "unknown encoder '" + std::string(s) + "'");
}

void ModelSpec::validate() const {
    auto bad = [](const std::string& why) { throw Error("models", "UnsupportedCombination", why); };
    if (input_size <= 0 || input_size % 32 != 0)
        bad("input size " + std::to_string(input_size) + " is not a positive multiple of 32");
    if (in_channels != 1) bad("only single-channel input is supported");
    if (num_classes != kNumClasses) bad("the head must emit exactly 5 classes");
    if (pretrained_encoder) bad("no pretrained encoder weights are bundled; initialise from a weight file instead");
    switch (architecture) {
        case Architecture::UNet:
            if (decoder_channels.empty() || decoder_channels.size() > 5) bad("UNet needs 1 to 5 decoder widths");
            for (int c : decoder_channels)
                if (c <= 0) bad("decoder widths must be positive");
            break;
        case Architecture::FPN:
            if (pyramid_channels <= 0 || segmentation_channels <= 0) bad("FPN widths must be positive");
            break;
        case Architecture::PSPNet:
            if (psp_channels <= 0) bad("PSPNet width must be positive");
            break;
        case Architecture::Linknet:
            if (prefinal_channels <= 0) bad("Linknet width must be positive");
            break;
    }
}

ModelSpec default_spec(Architecture architecture, EncoderKind encoder, int input_size) {
    ModelSpec s;
    s.architecture = architecture;
    s.encoder = encoder;
    s.input_size = input_size;
    if (encoder == EncoderKind::EfficientNetB3) {
        s.decoder_channels = {256, 128, 64, 32, 16};
        s.pyramid_channels = 256;
        s.segmentation_channels = 128;
        s.psp_channels = 512;
        s.prefinal_channels = 32;
    } else {
        s.decoder_channels = {32, 16, 8};
        s.pyramid_channels = 32;
        s.segmentation_channels = 16;
        s.psp_channels = 32;
        s.prefinal_channels = 8;
    }
    return s;
}

json to_json(const ModelSpec& s) {
    return json{{"architecture", to_string(s.architecture)},
                {"encoder", to_string(s.encoder)},
                {"input_size", s.input_size},
                {"in_channels", s.in_channels},
                {"num_classes", s.num_classes},
                {"pretrained_encoder", s.pretrained_encoder},
                {"decoder_channels", s.decoder_channels},
                {"pyramid_channels", s.pyramid_channels},
                {"segmentation_channels", s.segmentation_channels},
                {"psp_channels", s.psp_channels},
                {"prefinal_channels", s.prefinal_channels}};
}

ModelSpec model_spec_from_json(const json& j) {
    try {
        ModelSpec s = default_spec(parse_architecture(j.at("architecture").get<std::string>()),
                                   parse_encoder(j.at("encoder").get<std::string>()), j.value("input_size", 384));
        s.in_channels = j.value("in_channels", 1);
        s.num_classes = j.value("num_classes", kNumClasses);
        s.pretrained_encoder = j.value("pretrained_encoder", false);
        if (j.contains("decoder_channels")) s.decoder_channels = j["decoder_channels"].get<std::vector<int>>();
        s.pyramid_channels = j.value("pyramid_channels", s.pyramid_channels);
        s.segmentation_channels = j.value("segmentation_channels", s.segmentation_channels);
        s.psp_channels = j.value("psp_channels", s.psp_channels);
        s.prefinal_channels = j.value("prefinal_channels", s.prefinal_channels);
        return s;
    } catch (const json::exception& e) {
        throw Error("models", "SchemaError", e.what());
    }
}

// Row-stochastic (out x in) matrix reproducing half-pixel bilinear sampling along one axis.
static torch::Tensor interpolation_matrix(int64_t in, int64_t out, const torch::TensorOptions& opts) {
    auto m = torch::zeros({out, in}, torch::kFloat64);
    auto a = m.accessor<double, 2>();
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t i = 0; i < out; ++i) {
        const double src = std::max(0.0, (i + 0.5) * scale - 0.5);
        const auto i0 = std::min(static_cast<int64_t>(src), in - 1);
        const auto i1 = std::min(i0 + 1, in - 1);
        const double w = src - static_cast<double>(i0);
        a[i][i0] += 1.0 - w;
        a[i][i1] += w;
    }
    return m.to(opts);
}

// Bilinear resize as two matrix products; same values as interpolate(bilinear), cheaper backward.
torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t height, int64_t width) {
    const auto opts = x.options().requires_grad(false);
    const auto rows = interpolation_matrix(x.size(2), height, opts);
    const auto cols = interpolation_matrix(x.size(3), width, opts);
    return torch::matmul(torch::matmul(rows, x), cols.t());
}

namespace {

struct ConvBnReluImpl : nn::Module {
    ConvBnReluImpl(int in, int out, int k = 3, int stride = 1)
        : conv(register_module("conv",
                               nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false)))),
          bn(register_module("bn", nn::BatchNorm2d(out))) {}
    torch::Tensor forward(const torch::Tensor& x) { return torch::relu(bn(conv(x))); }
    nn::Conv2d conv;
    nn::BatchNorm2d bn;
};
TORCH_MODULE(ConvBnRelu);

torch::Tensor upsample_to(const torch::Tensor& x, const torch::Tensor& like, bool align_corners = false) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kBilinear)
                                 .align_corners(align_corners));
}

torch::Tensor upsample2x(const torch::Tensor& x, bool bilinear) {
    auto opts = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0});
    if (bilinear)
        opts.mode(torch::kBilinear).align_corners(true);
    else
        opts.mode(torch::kNearest);
    return F::interpolate(x, opts);
}

// ---------------------------------------------------------------- encoders

// Plain strided CNN: five stages, each halving resolution.
struct SmallEncoderImpl : EncoderImpl {
    static constexpr std::array<int, 5> kWidths{8, 16, 32, 64, 128};
    static constexpr std::array<int, 5> kConvs{1, 1, 1, 2, 2};

    explicit SmallEncoderImpl(int in_channels) {
        int in = in_channels;
        for (int i = 0; i < 5; ++i) {
            nn::Sequential stage;
            stage->push_back(ConvBnRelu(in, kWidths[i], 3, 2));
            for (int c = 1; c < kConvs[i]; ++c) stage->push_back(ConvBnRelu(kWidths[i], kWidths[i]));
            stages_.push_back(register_module("stage" + std::to_string(i + 1), stage));
            in = kWidths[i];
        }
    }
    std::vector<torch::Tensor> features(const torch::Tensor& x) override {
        std::vector<torch::Tensor> out;
        torch::Tensor h = x;
        for (auto& s : stages_) {
            h = s->forward(h);
            out.push_back(h);
        }
        return out;
    }
    std::vector<int> channels() const override { return {kWidths.begin(), kWidths.end()}; }

    std::vector<nn::Sequential> stages_;
};

struct SqueezeExciteImpl : nn::Module {
    SqueezeExciteImpl(int channels, int reduced)
        : reduce(register_module("reduce", nn::Conv2d(nn::Conv2dOptions(channels, reduced, 1)))),
          expand(register_module("expand", nn::Conv2d(nn::Conv2dOptions(reduced, channels, 1)))) {}
    torch::Tensor forward(const torch::Tensor& x) {
        auto s = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1));
        s = torch::sigmoid(expand(F::silu(reduce(s))));
        return x * s;
    }
    nn::Conv2d reduce, expand;
};
TORCH_MODULE(SqueezeExcite);

// Inverted residual block with depthwise convolution and squeeze-excitation.
struct MBConvImpl : nn::Module {
    MBConvImpl(int in, int out, int kernel, int stride, int expand_ratio) : residual(stride == 1 && in == out) {
        const int mid = in * expand_ratio;
        const auto bn = [](int c) { return nn::BatchNorm2d(nn::BatchNorm2dOptions(c).eps(1e-3).momentum(0.01)); };
        if (expand_ratio != 1) {
            expand = register_module("expand", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, mid, 1).bias(false)),
                                                              bn(mid), nn::SiLU()));
        }
        depthwise = register_module(
            "depthwise",
            nn::Sequential(
                nn::Conv2d(nn::Conv2dOptions(mid, mid, kernel).stride(stride).padding(kernel / 2).groups(mid).bias(false)),
                bn(mid), nn::SiLU()));
        se = register_module("se", SqueezeExcite(mid, std::max(1, in / 4)));
        project = register_module("project",
                                  nn::Sequential(nn::Conv2d(nn::Conv2dOptions(mid, out, 1).bias(false)), bn(out)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        torch::Tensor h = expand ? expand->forward(x) : x;
        h = project->forward(se(depthwise->forward(h)));
        return residual ? h + x : h;
    }
    bool residual;
    nn::Sequential expand{nullptr}, depthwise{nullptr}, project{nullptr};
    SqueezeExcite se{nullptr};
};
TORCH_MODULE(MBConv);

// EfficientNet-B3 feature extractor (width 1.2, depth 1.4), classifier head dropped.
struct EfficientNetB3Impl : EncoderImpl {
    struct StageDef {
        int expand, kernel, stride, out, repeats;
    };
    static constexpr std::array<StageDef, 7> kStages{{{1, 3, 1, 24, 2},
                                                       {6, 3, 2, 32, 3},
                                                       {6, 5, 2, 48, 3},
                                                       {6, 3, 2, 96, 5},
                                                       {6, 5, 1, 136, 5},
                                                       {6, 5, 2, 232, 6},
                                                       {6, 3, 1, 384, 2}}};
    static constexpr int kStem = 40;

    explicit EfficientNetB3Impl(int in_channels) {
        stem = register_module(
            "stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, kStem, 3).stride(2).padding(1).bias(false)),
                                   nn::BatchNorm2d(nn::BatchNorm2dOptions(kStem).eps(1e-3).momentum(0.01)), nn::SiLU()));
        int in = kStem;
        for (std::size_t i = 0; i < kStages.size(); ++i) {
            const auto& d = kStages[i];
            nn::Sequential stage;
            for (int r = 0; r < d.repeats; ++r) {
                stage->push_back(MBConv(in, d.out, d.kernel, r == 0 ? d.stride : 1, d.expand));
                in = d.out;
            }
            stages.push_back(register_module("stage" + std::to_string(i + 1), stage));
        }
    }
    std::vector<torch::Tensor> features(const torch::Tensor& x) override {
        std::vector<torch::Tensor> out;
        torch::Tensor h = stem->forward(x);
        out.push_back(h);  // stride 2
        for (std::size_t i = 0; i < stages.size(); ++i) {
            h = stages[i]->forward(h);
            // strides 4, 8, 16, 32 end after stages 2, 3, 5, 7
            if (i == 1 || i == 2 || i == 4 || i == 6) out.push_back(h);
        }
        return out;
    }
    std::vector<int> channels() const override { return {kStem, 32, 48, 136, 384}; }

    nn::Sequential stem{nullptr};
    std::vector<nn::Sequential> stages;
};

// ---------------------------------------------------------------- decoders

struct UNetBlockImpl : nn::Module {
    UNetBlockImpl(int in, int skip, int out)
        : conv1(register_module("conv1", ConvBnRelu(in + skip, out))),
          conv2(register_module("conv2", ConvBnRelu(out, out))) {}
    torch::Tensor forward(torch::Tensor x, const torch::Tensor& skip) {
        x = upsample2x(x, false);
        if (skip.defined()) x = torch::cat({x, skip}, 1);
        return conv2(conv1(x));
    }
    ConvBnRelu conv1, conv2;
};
TORCH_MODULE(UNetBlock);

// Upsample + concatenate skip + two 3x3 convs per block, deepest first.
struct UNetDecoderImpl : nn::Module {
    UNetDecoderImpl(const std::vector<int>& enc, const std::vector<int>& dec) {
        int in = enc[4];
        for (std::size_t i = 0; i < dec.size(); ++i) {
            const int skip = i < 4 ? enc[3 - i] : 0;
            blocks.push_back(register_module("block" + std::to_string(i + 1), UNetBlock(in, skip, dec[i])));
            in = dec[i];
        }
    }
    torch::Tensor forward(const std::vector<torch::Tensor>& f) {
        torch::Tensor x = f[4];
        for (std::size_t i = 0; i < blocks.size(); ++i)
            x = blocks[i]->forward(x, i < 4 ? f[3 - i] : torch::Tensor());
        return x;
    }
    std::vector<UNetBlock> blocks;
};
TORCH_MODULE(UNetDecoder);

struct LinknetBlockImpl : nn::Module {
    LinknetBlockImpl(int in, int out) {
        const int mid = std::max(1, in / 4);
        reduce = register_module("reduce", ConvBnRelu(in, mid, 1));
        up = register_module("up", nn::Sequential(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(mid, mid, 4)
                                                                          .stride(2)
                                                                          .padding(1)
                                                                          .bias(false)),
                                                  nn::BatchNorm2d(mid), nn::ReLU(nn::ReLUOptions(true))));
        expand = register_module("expand", ConvBnRelu(mid, out, 1));
    }
    torch::Tensor forward(const torch::Tensor& x) { return expand(up->forward(reduce(x))); }
    ConvBnRelu reduce{nullptr}, expand{nullptr};
    nn::Sequential up{nullptr};
};
TORCH_MODULE(LinknetBlock);

// Each block upsamples 2x and adds the encoder feature of the same stride.
struct LinknetDecoderImpl : nn::Module {
    LinknetDecoderImpl(const std::vector<int>& enc, int prefinal) {
        const std::array<int, 6> ch{enc[4], enc[3], enc[2], enc[1], enc[0], prefinal};
        for (int i = 0; i < 5; ++i)
            blocks.push_back(register_module("block" + std::to_string(i + 1), LinknetBlock(ch[i], ch[i + 1])));
    }
    torch::Tensor forward(const std::vector<torch::Tensor>& f) {
        torch::Tensor x = f[4];
        for (int i = 0; i < 5; ++i) {
            x = blocks[i]->forward(x);
            if (i < 4) x = x + f[3 - i];
        }
        return x;
    }
    std::vector<LinknetBlock> blocks;
};
TORCH_MODULE(LinknetDecoder);

int group_count(int channels) { return std::gcd(32, channels); }

struct FPNConvImpl : nn::Module {
    FPNConvImpl(int in, int out, bool upsample) : upsample(upsample) {
        conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
        norm = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(group_count(out), out)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        torch::Tensor h = torch::relu(norm(conv(x)));
        return upsample ? upsample2x(h, true) : h;
    }
    bool upsample;
    nn::Conv2d conv{nullptr};
    nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(FPNConv);

// Top-down pyramid on strides 4..32, each level brought to stride 4 and summed.
struct FPNDecoderImpl : nn::Module {
    FPNDecoderImpl(const std::vector<int>& enc, int pyramid, int seg) {
        for (int level = 0; level < 4; ++level) {  // strides 32, 16, 8, 4
            lateral.push_back(register_module("lateral" + std::to_string(level),
                                              nn::Conv2d(nn::Conv2dOptions(enc[4 - level], pyramid, 1))));
            const int ups = 3 - level;
            nn::Sequential block;
            block->push_back(FPNConv(pyramid, seg, ups > 0));
            for (int u = 1; u < ups; ++u) block->push_back(FPNConv(seg, seg, true));
            seg_blocks.push_back(register_module("seg" + std::to_string(level), block));
        }
        dropout = register_module("dropout", nn::Dropout2d(nn::Dropout2dOptions(0.2)));
    }
    torch::Tensor forward(const std::vector<torch::Tensor>& f) {
        std::vector<torch::Tensor> p;
        p.push_back(lateral[0](f[4]));
        for (int level = 1; level < 4; ++level) {
            const torch::Tensor& skip = f[4 - level];
            auto up = F::interpolate(p.back(), F::InterpolateFuncOptions()
                                                   .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                                   .mode(torch::kNearest));
            p.push_back(up + lateral[level](skip));
        }
        torch::Tensor merged;
        for (int level = 0; level < 4; ++level) {
            torch::Tensor s = seg_blocks[level]->forward(p[level]);
            merged = merged.defined() ? merged + s : s;
        }
        return dropout(merged);
    }
    std::vector<nn::Conv2d> lateral;
    std::vector<nn::Sequential> seg_blocks;
    nn::Dropout2d dropout{nullptr};
};
TORCH_MODULE(FPNDecoder);

// Pyramid pooling over the stride-8 feature map.
struct PSPDecoderImpl : nn::Module {
    static constexpr std::array<int, 4> kBins{1, 2, 3, 6};

    PSPDecoderImpl(int in, int out) {
        const int branch = std::max(1, in / static_cast<int>(kBins.size()));
        for (int b : kBins) {
            nn::Sequential s;
            // no normalization on the 1x1 branch: a single value per channel has no batch statistics
            if (b == 1)
                s->push_back(nn::Conv2d(nn::Conv2dOptions(in, branch, 1)));
            else {
                s->push_back(nn::Conv2d(nn::Conv2dOptions(in, branch, 1).bias(false)));
                s->push_back(nn::BatchNorm2d(branch));
            }
            s->push_back(nn::ReLU(nn::ReLUOptions(true)));
            branches.push_back(register_module("pool" + std::to_string(b), s));
        }
        fuse = register_module("fuse", ConvBnRelu(in + branch * static_cast<int>(kBins.size()), out, 1));
        dropout = register_module("dropout", nn::Dropout2d(nn::Dropout2dOptions(0.2)));
    }
    torch::Tensor forward(const std::vector<torch::Tensor>& f) {
        const torch::Tensor& x = f[2];
        std::vector<torch::Tensor> parts{x};
        for (std::size_t i = 0; i < kBins.size(); ++i) {
            auto pooled = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(kBins[i]));
            parts.push_back(upsample_to(branches[i]->forward(pooled), x, true));
        }
        return dropout(fuse(torch::cat(parts, 1)));
    }
    std::vector<nn::Sequential> branches;
    ConvBnRelu fuse{nullptr};
    nn::Dropout2d dropout{nullptr};
};
TORCH_MODULE(PSPDecoder);

}  // namespace

SegmentationModelImpl::SegmentationModelImpl(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.encoder == EncoderKind::SmallEncoder)
        encoder_ = register_module("encoder", std::make_shared<SmallEncoderImpl>(spec_.in_channels));
    else
        encoder_ = register_module("encoder", std::make_shared<EfficientNetB3Impl>(spec_.in_channels));
    const std::vector<int> enc = encoder_->channels();

    int out_channels = 0;
    int head_kernel = 3;
    switch (spec_.architecture) {
        case Architecture::UNet: {
            auto d = register_module("decoder", UNetDecoder(enc, spec_.decoder_channels));
            decode_ = [d](const std::vector<torch::Tensor>& f) { return d->forward(f); };
            decoder_ = d;
            out_channels = spec_.decoder_channels.back();
            break;
        }
        case Architecture::Linknet: {
            auto d = register_module("decoder", LinknetDecoder(enc, spec_.prefinal_channels));
            decode_ = [d](const std::vector<torch::Tensor>& f) { return d->forward(f); };
            decoder_ = d;
            out_channels = spec_.prefinal_channels;
            head_kernel = 1;
            break;
        }
        case Architecture::FPN: {
            auto d = register_module("decoder", FPNDecoder(enc, spec_.pyramid_channels, spec_.segmentation_channels));
            decode_ = [d](const std::vector<torch::Tensor>& f) { return d->forward(f); };
            decoder_ = d;
            out_channels = spec_.segmentation_channels;
            head_kernel = 1;
            break;
        }
        case Architecture::PSPNet: {
            auto d = register_module("decoder", PSPDecoder(enc[2], spec_.psp_channels));
            decode_ = [d](const std::vector<torch::Tensor>& f) { return d->forward(f); };
            decoder_ = d;
            out_channels = spec_.psp_channels;
            break;
        }
    }
    head_ = register_module(
        "head", nn::Conv2d(nn::Conv2dOptions(out_channels, spec_.num_classes, head_kernel).padding(head_kernel / 2)));
}

torch::Tensor SegmentationModelImpl::logits(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) % 32 != 0 || x.size(3) % 32 != 0)
        throw Error("models", "ShapeMismatch", "expected (N, 1, H, W) input with H, W multiples of 32");
    torch::Tensor y = head_(decode_(encoder_->features(x)));
    if (y.size(2) != x.size(2) || y.size(3) != x.size(3)) y = bilinear_resize(y, x.size(2), x.size(3));
    return y;
}

torch::Tensor SegmentationModelImpl::forward(const torch::Tensor& x) { return torch::softmax(logits(x), 1); }

std::int64_t SegmentationModelImpl::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
}

SegmentationModel build_model(const ModelSpec& spec) { return SegmentationModel(spec); }

// ---------------------------------------------------------------- weights

namespace {

constexpr std::array<char, 8> kMagic{'M', 'S', 'E', 'G', 'W', 'T', 'S', '1'};
constexpr int kFormatVersion = 1;

std::vector<std::pair<std::string, torch::Tensor>> state_entries(SegmentationModel& model) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : model->named_parameters(true)) out.emplace_back(p.key(), p.value());
    for (const auto& b : model->named_buffers(true)) out.emplace_back(b.key(), b.value());
    return out;
}

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

std::string dtype_name(torch::Dtype t) {
    if (t == torch::kFloat32) return "f32";
    if (t == torch::kFloat64) return "f64";
    if (t == torch::kInt64) return "i64";
    throw Error("models", "UnsupportedDtype", "cannot serialize tensor dtype");
}

torch::Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return torch::kFloat32;
    if (s == "f64") return torch::kFloat64;
    if (s == "i64") return torch::kInt64;
    throw Error("models", "CorruptFile", "unknown dtype '" + s + "'");
}

struct WeightFile {
    json header;
    std::string payload;
};

WeightFile read_weight_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("models", "CorruptFile", "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto corrupt = [&](const std::string& why) { return Error("models", "CorruptFile", path.string() + ": " + why); };
    if (bytes.size() < kMagic.size() + 4 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
        throw corrupt("bad magic");
    std::uint32_t header_len;
    std::memcpy(&header_len, bytes.data() + kMagic.size(), 4);
    const std::size_t header_at = kMagic.size() + 4;
    if (bytes.size() < header_at + header_len + 8) throw corrupt("truncated header");
    WeightFile wf;
    try {
        wf.header = json::parse(bytes.substr(header_at, header_len));
    } catch (const json::exception& e) {
        throw corrupt(e.what());
    }
    const std::size_t payload_at = header_at + header_len;
    const std::size_t payload_len = bytes.size() - payload_at - 8;
    wf.payload = bytes.substr(payload_at, payload_len);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + payload_at + payload_len, 8);
    if (stored != fnv1a(wf.payload.data(), wf.payload.size())) throw corrupt("checksum mismatch (truncated?)");
    if (wf.header.value("format_version", 0) != kFormatVersion) throw corrupt("unsupported format version");
    return wf;
}

}  // namespace

void save_weights(SegmentationModel& model, const fs::path& path) {
    json tensors = json::array();
    std::string payload;
    for (const auto& [name, t] : state_entries(model)) {
        torch::Tensor c = t.detach().contiguous().cpu();
        tensors.push_back({{"name", name}, {"dtype", dtype_name(c.scalar_type())}, {"shape", c.sizes().vec()}});
        payload.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
    }
    const json header{{"format_version", kFormatVersion}, {"spec", to_json(model->spec())}, {"tensors", tensors}};
    const std::string h = header.dump();
    std::string out(kMagic.begin(), kMagic.end());
    const auto header_len = static_cast<std::uint32_t>(h.size());
    out.append(reinterpret_cast<const char*>(&header_len), 4);
    out += h;
    out += payload;
    const std::uint64_t sum = fnv1a(payload.data(), payload.size());
    out.append(reinterpret_cast<const char*>(&sum), 8);
    write_text_atomic(path, out);
}

ModelSpec read_weights_spec(const fs::path& path) { return model_spec_from_json(read_weight_file(path).header.at("spec")); }

SegmentationModel load_weights(const ModelSpec& spec, const fs::path& path) {
    const WeightFile wf = read_weight_file(path);
    const ModelSpec stored = model_spec_from_json(wf.header.at("spec"));
    if (!(stored == spec))
        throw Error("models", "SpecMismatch",
                    "file holds " + std::string(to_string(stored.architecture)) + "/" +
                        std::string(to_string(stored.encoder)) + ", requested " +
                        std::string(to_string(spec.architecture)) + "/" + std::string(to_string(spec.encoder)));
    SegmentationModel model = build_model(spec);
    auto entries = state_entries(model);
    const auto& table = wf.header.at("tensors");
    if (table.size() != entries.size()) throw Error("models", "SpecMismatch", "tensor count differs");
    torch::NoGradGuard guard;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& [name, t] = entries[i];
        const auto& row = table[i];
        if (row.at("name").get<std::string>() != name || row.at("shape").get<std::vector<int64_t>>() != t.sizes().vec())
            throw Error("models", "SpecMismatch", "tensor '" + name + "' does not match");
        const torch::Dtype dt = parse_dtype(row.at("dtype").get<std::string>());
        const std::size_t bytes = static_cast<std::size_t>(t.numel()) * torch::elementSize(dt);
        if (offset + bytes > wf.payload.size()) throw Error("models", "CorruptFile", "payload too short");
        torch::Tensor src = torch::empty(t.sizes(), torch::TensorOptions().dtype(dt));
        std::memcpy(src.data_ptr(), wf.payload.data() + offset, bytes);
        t.copy_(src);
        offset += bytes;
    }
    if (offset != wf.payload.size()) throw Error("models", "CorruptFile", "trailing payload bytes");
    return model;
}

std::vector<torch::Tensor> snapshot_state(SegmentationModel& model) {
    std::vector<torch::Tensor> out;
    for (auto& [name, t] : state_entries(model)) out.push_back(t.detach().clone());
    return out;
}

void restore_state(SegmentationModel& model, const std::vector<torch::Tensor>& state) {
    auto entries = state_entries(model);
    if (entries.size() != state.size()) throw Error("models", "SpecMismatch", "snapshot does not match the model");
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].second.copy_(state[i]);
}

}  // namespace mammoseg
