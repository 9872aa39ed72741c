#include <mammoseg/models.hpp>

#include <fixtures.hpp>
#include <gtest/gtest.h>

#include <fstream>

using namespace mammoseg;

namespace {

constexpr std::array<Architecture, 4> kArchitectures{Architecture::UNet, Architecture::FPN, Architecture::Linknet,
                                                     Architecture::PSPNet};

std::string code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

}  // namespace

class AllArchitectures : public ::testing::TestWithParam<Architecture> {};

TEST_P(AllArchitectures, OutputShapeAndSoftmaxSums) {
    torch::manual_seed(0);
    auto model = build_model(default_spec(GetParam(), EncoderKind::SmallEncoder, 64));
    model->eval();
    torch::NoGradGuard g;
    const auto x = torch::rand({2, 1, 64, 96});
    const auto p = model->forward(x);
    ASSERT_EQ(p.sizes(), (std::vector<int64_t>{2, 5, 64, 96}));
    EXPECT_LE((p.sum(1) - 1).abs().max().item<double>(), 1e-5);
    EXPECT_GE(p.min().item<double>(), 0.0);
}

TEST_P(AllArchitectures, EfficientNetB3Forward) {
    torch::manual_seed(0);
    auto model = build_model(default_spec(GetParam(), EncoderKind::EfficientNetB3, 64));
    model->eval();
    torch::NoGradGuard g;
    const auto p = model->forward(torch::rand({1, 1, 64, 64}));
    ASSERT_EQ(p.sizes(), (std::vector<int64_t>{1, 5, 64, 64}));
    EXPECT_LE((p.sum(1) - 1).abs().max().item<double>(), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Models, AllArchitectures, ::testing::ValuesIn(kArchitectures),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(ModelSpec, Validation) {
    EXPECT_EQ(code_of([] { build_model(default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 100)); }),
              "models.UnsupportedCombination");
    auto s = default_spec(Architecture::FPN, EncoderKind::SmallEncoder, 64);
    s.num_classes = 3;
    EXPECT_THROW(s.validate(), Error);
    s = default_spec(Architecture::FPN, EncoderKind::SmallEncoder, 64);
    s.pretrained_encoder = true;
    EXPECT_THROW(s.validate(), Error);
    EXPECT_THROW(parse_architecture("deeplab"), Error);
    EXPECT_EQ(parse_architecture("fpn"), Architecture::FPN);
    EXPECT_EQ(parse_encoder("efficientnet-b3"), EncoderKind::EfficientNetB3);
}

TEST(ModelSpec, JsonRoundTrip) {
    for (auto a : kArchitectures)
        for (auto e : {EncoderKind::SmallEncoder, EncoderKind::EfficientNetB3}) {
            const auto s = default_spec(a, e, 128);
            EXPECT_EQ(model_spec_from_json(to_json(s)), s);
        }
}

TEST(Model, RejectsBadInputShape) {
    auto model = build_model(default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 64));
    EXPECT_EQ(code_of([&] { model->forward(torch::rand({1, 1, 60, 64})); }), "models.ShapeMismatch");
    EXPECT_EQ(code_of([&] { model->forward(torch::rand({1, 3, 64, 64})); }), "models.ShapeMismatch");
}

TEST(Model, EfficientNetB3ParameterScale) {
    auto model = build_model(default_spec(Architecture::UNet, EncoderKind::EfficientNetB3));
    const auto n = model->parameter_count();
    EXPECT_GT(n, 10'000'000);
    EXPECT_LT(n, 16'000'000);
}

TEST(BilinearResize, MatchesInterpolate) {
    const auto x = torch::rand({2, 3, 12, 8}, torch::kFloat64);
    for (auto [h, w] : std::vector<std::pair<int, int>>{{24, 16}, {48, 32}, {7, 5}, {12, 8}}) {
        const auto want = torch::nn::functional::interpolate(
            x, torch::nn::functional::InterpolateFuncOptions()
                   .size(std::vector<int64_t>{h, w})
                   .mode(torch::kBilinear)
                   .align_corners(false));
        EXPECT_LE((bilinear_resize(x, h, w) - want).abs().max().item<double>(), 1e-12) << h << "x" << w;
    }
}

TEST(Weights, SaveLoadRoundTripIsExact) {
    fixtures::TempDir dir;
    for (auto a : kArchitectures) {
        torch::manual_seed(1);
        const auto spec = default_spec(a, EncoderKind::SmallEncoder, 64);
        auto model = build_model(spec);
        {
            // populate running statistics
            torch::NoGradGuard g;
            model->train();
            model->forward(torch::rand({2, 1, 64, 64}));
        }
        model->eval();
        const auto path = dir / (std::string(to_string(a)) + ".bin");
        save_weights(model, path);
        EXPECT_EQ(read_weights_spec(path), spec);
        auto back = load_weights(spec, path);
        back->eval();
        torch::NoGradGuard g;
        const auto x = torch::rand({1, 1, 64, 64});
        EXPECT_TRUE(torch::equal(model->forward(x), back->forward(x)));
    }
}

TEST(Weights, SpecMismatchAndCorruption) {
    fixtures::TempDir dir;
    const auto spec = default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 64);
    auto model = build_model(spec);
    const auto path = dir / "w.bin";
    save_weights(model, path);
    EXPECT_EQ(code_of([&] { load_weights(default_spec(Architecture::FPN, EncoderKind::SmallEncoder, 64), path); }),
              "models.SpecMismatch");

    const auto size = std::filesystem::file_size(path);
    std::filesystem::copy_file(path, dir / "t.bin");
    std::filesystem::resize_file(dir / "t.bin", size - 100);
    EXPECT_EQ(code_of([&] { load_weights(spec, dir / "t.bin"); }), "models.CorruptFile");

    std::filesystem::copy_file(path, dir / "f.bin");
    {
        std::fstream f(dir / "f.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(size) - 1000);
        f.put('\x5a');
    }
    EXPECT_EQ(code_of([&] { load_weights(spec, dir / "f.bin"); }), "models.CorruptFile");

    std::ofstream(dir / "m.bin") << "not a weight file at all";
    EXPECT_EQ(code_of([&] { load_weights(spec, dir / "m.bin"); }), "models.CorruptFile");
}

TEST(Snapshot, RestoreBringsBackWeights) {
    auto model = build_model(default_spec(Architecture::Linknet, EncoderKind::SmallEncoder, 64));
    const auto snap = snapshot_state(model);
    {
        torch::NoGradGuard g;
        for (auto& p : model->parameters()) p.add_(1.0);
    }
    restore_state(model, snap);
    const auto now = snapshot_state(model);
    ASSERT_EQ(now.size(), snap.size());
    for (std::size_t i = 0; i < now.size(); ++i) EXPECT_TRUE(torch::equal(now[i], snap[i]));
}

TEST(GradientCheck, SmallUNetMatchesCentralDifferences) {
    torch::manual_seed(3);
    auto model = build_model(default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 64));
    model->to(torch::kFloat64);
    model->eval();
    const auto x = torch::rand({1, 1, 64, 64}, torch::kFloat64);
    const auto w = torch::rand({1, 5, 64, 64}, torch::kFloat64);
    auto objective = [&] { return (model->forward(x) * w).sum(); };

    model->zero_grad();
    objective().backward();
    const auto params = model->parameters();
    Rng rng(8);
    int checked = 0;
    for (int k = 0; k < 400 && checked < 8; ++k) {
        torch::NoGradGuard g;
        auto& p = params[rng.below(params.size())];
        const auto flat = p.view(-1);
        const auto i = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(flat.numel())));
        const double analytic = p.grad().view(-1)[i].item<double>();
        if (std::abs(analytic) < 1e-3) continue;
        const double h = 1e-5;
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double up = objective().item<double>();
        flat[i] = orig - h;
        const double down = objective().item<double>();
        flat[i] = orig;
        const double numeric = (up - down) / (2 * h);
        EXPECT_LE(std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)), 1e-2)
            << "sample " << k << " analytic " << analytic << " numeric " << numeric;
        ++checked;
    }
    EXPECT_GE(checked, 5);
}
