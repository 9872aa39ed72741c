#include <mammoseg/inference.hpp>

#include <cstring>

namespace fs = std::filesystem;

namespace mammoseg {

TorchPredictor::TorchPredictor(SegmentationModel model, View view, PreprocConfig preproc)
    : model_(std::move(model)), view_(view), preproc_(preproc) {
    model_->eval();
}

ProbabilityMaps to_probability_maps(const torch::Tensor& probs) {
    torch::Tensor p = probs.dim() == 4 ? probs[0] : probs;
    if (p.dim() != 3 || p.size(0) != kNumClasses)
        throw Error("inference", "ShapeMismatch", "expected 5 probability planes");
    p = p.to(torch::kFloat32).contiguous();
    ProbabilityMaps out(static_cast<int>(p.size(2)), static_cast<int>(p.size(1)));
    std::memcpy(out.buffer().data(), p.data_ptr<float>(), sizeof(float) * static_cast<std::size_t>(p.numel()));
    return out;
}

ProbabilityMaps TorchPredictor::predict(const ImageF& input) const {
    torch::NoGradGuard guard;
    auto x = torch::from_blob(const_cast<float*>(input.buffer().data()), {1, 1, input.height(), input.width()},
                              torch::kFloat32);
    return to_probability_maps(model_->forward(x));
}

json to_json(const RunConfig& c) {
    return json{{"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"preprocess", to_json(c.preprocess)},
                {"extra", c.extra}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c.model = model_spec_from_json(j.at("model"));
        c.train = train_config_from_json(j.at("train"));
        c.preprocess = preproc_config_from_json(j.at("preprocess"));
        c.extra = j.value("extra", json::object());
    } catch (const json::exception& e) {
        throw Error("inference", "SchemaError", e.what());
    }
    return c;
}

void write_run(const fs::path& dir, const RunConfig& config, SegmentationModel& model, const TrainHistory& history) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("inference", "IoError", "cannot create " + dir.string() + ": " + ec.message());
    write_json_file(dir / "config.json", to_json(config));
    save_weights(model, dir / "weights.bin");
    write_text_atomic(dir / "history.csv", history_csv(history));
    write_json_file(dir / "history.json", to_json(history));
}

RunConfig read_run_config(const fs::path& dir) {
    if (!fs::exists(dir / "config.json") || !fs::exists(dir / "weights.bin"))
        throw Error("inference", "UnknownRun", dir.string());
    return run_config_from_json(read_json_file(dir / "config.json"));
}

std::shared_ptr<TorchPredictor> load_run(const fs::path& dir) {
    const RunConfig c = read_run_config(dir);
    return std::make_shared<TorchPredictor>(load_weights(c.model, dir / "weights.bin"), c.train.view, c.preprocess);
}

}  // namespace mammoseg
