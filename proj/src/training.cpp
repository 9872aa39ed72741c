#include <mammoseg/random.hpp>
#include <mammoseg/training.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

namespace mammoseg {

void TrainConfig::validate() const {
    auto bad = [](const std::string& why) { throw Error("training", "InvalidConfig", why); };
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) bad("learning_rate must be positive");
    if (batch_size < 1) bad("batch_size must be at least 1");
    if (max_epochs < 1) bad("max_epochs must be at least 1");
    if (patience < 0 || patience >= max_epochs) bad("patience must be in [0, max_epochs)");
}

json to_json(const TrainConfig& c) {
    return json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
                {"patience", c.patience},           {"seed", c.seed},             {"view", to_string(c.view)},
                {"loss", "soft-jaccard"},           {"optimizer", "adam"}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience = j.value("patience", c.patience);
        c.seed = j.value("seed", c.seed);
        if (j.contains("view")) c.view = parse_view(j["view"].get<std::string>());
    } catch (const json::exception& e) {
        throw Error("training", "InvalidConfig", e.what());
    }
    return c;
}

json to_json(const TrainHistory& h) {
    json epochs = json::array();
    for (const auto& e : h.epochs) {
        json iou = json::object();
        for (auto c : kAllClasses) {
            const auto& v = e.val_iou[code(c)];
            iou[std::string(to_string(c))] = v ? json(*v) : json(nullptr);
        }
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_iou", iou}});
    }
    return json{{"best_epoch", h.best_epoch},
                {"optimizer", h.optimizer},
                {"stopped_early", h.stopped_early},
                {"epochs", epochs}};
}

std::string history_csv(const TrainHistory& h) {
    std::string out = "epoch,train_loss,val_loss";
    for (auto c : kAllClasses) out += ",val_iou_" + std::string(to_string(c));
    out += "\n";
    char buf[64];
    for (const auto& e : h.epochs) {
        out += std::to_string(e.epoch);
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g", e.train_loss, e.val_loss);
        out += buf;
        for (const auto& v : e.val_iou) {
            if (v) {
                std::snprintf(buf, sizeof buf, ",%.17g", *v);
                out += buf;
            } else {
                out += ",";
            }
        }
        out += "\n";
    }
    return out;
}

TensorSet to_tensors(const std::vector<EvalSample>& samples) {
    TensorSet t;
    if (samples.empty()) return t;
    const int w = samples.front().input.width(), h = samples.front().input.height();
    const auto n = static_cast<std::int64_t>(samples.size());
    t.inputs = torch::empty({n, 1, h, w}, torch::kFloat32);
    t.labels = torch::empty({n, h, w}, torch::kUInt8);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        if (s.input.width() != w || s.input.height() != h || !s.gt.same_shape(s.input))
            throw Error("training", "ShapeMismatch", "sample " + s.image_id + " has a different size");
        std::memcpy(t.inputs[i].data_ptr<float>(), s.input.buffer().data(), sizeof(float) * w * h);
        std::memcpy(t.labels[i].data_ptr<std::uint8_t>(), s.gt.buffer().data(), static_cast<std::size_t>(w) * h);
        t.ids.push_back(s.image_id);
    }
    return t;
}

torch::Tensor one_hot_batch(const torch::Tensor& labels, torch::Dtype dtype) {
    auto sizes = labels.sizes().vec();
    sizes.insert(sizes.begin() + 1, kNumClasses);
    return torch::zeros(sizes, torch::TensorOptions().dtype(dtype)).scatter_(1, labels.to(torch::kLong).unsqueeze(1), 1);
}

torch::Tensor jaccard_loss(const torch::Tensor& pred, const torch::Tensor& target, double epsilon) {
    if (pred.sizes() != target.sizes() || pred.dim() != 4)
        throw Error("training", "ShapeMismatch", "prediction and target must both be (N, C, H, W) of equal shape");
    const std::vector<int64_t> dims{0, 2, 3};
    const auto inter = (pred * target).sum(dims);
    const auto total = pred.sum(dims) + target.sum(dims);
    return 1.0 - ((inter + epsilon) / (total - inter + epsilon)).mean();
}

namespace {

torch::Tensor batch_indices(const std::vector<std::int64_t>& order, std::size_t begin, std::size_t end) {
    return torch::from_blob(const_cast<std::int64_t*>(order.data() + begin), {static_cast<std::int64_t>(end - begin)},
                            torch::kLong)
        .clone();
}

// Arg max over the class channel, ties to the lowest class.
torch::Tensor class_argmax(const torch::Tensor& probs) {
    auto best = probs.select(1, 0);
    auto out = torch::zeros_like(best, torch::kLong);
    for (int c = 1; c < probs.size(1); ++c) {
        const auto p = probs.select(1, c);
        out.masked_fill_(p > best, c);
        best = torch::maximum(best, p);
    }
    return out;
}

}  // namespace

ValidationResult validate_model(SegmentationModel& model, const TensorSet& data, int batch_size) {
    if (data.size() == 0) throw Error("training", "EmptyDataset", "validation set is empty");
    torch::NoGradGuard guard;
    const bool was_training = model->is_training();
    model->eval();
    std::array<double, kNumClasses> inter{}, total{}, iou_sum{};
    std::array<int, kNumClasses> iou_n{};
    constexpr int kCells = kNumClasses * kNumClasses;
    const std::int64_t n = data.size();
    for (std::int64_t b = 0; b < n; b += batch_size) {
        const std::int64_t e = std::min(n, b + batch_size);
        const auto labels = data.labels.slice(0, b, e);
        const auto probs = model->forward(data.inputs.slice(0, b, e));
        const auto target = one_hot_batch(labels);
        const auto i = (probs * target).sum({0, 2, 3}).to(torch::kFloat64);
        const auto t = (probs.sum({0, 2, 3}) + target.sum({0, 2, 3})).to(torch::kFloat64);
        const auto ia = i.accessor<double, 1>(), ta = t.accessor<double, 1>();
        for (int c = 0; c < kNumClasses; ++c) {
            inter[c] += ia[c];
            total[c] += ta[c];
        }
        // per-image confusion counts [truth][prediction]
        const auto image = torch::arange(e - b, torch::kLong).view({-1, 1, 1}) * kCells;
        const auto cell = labels.to(torch::kLong) * kNumClasses + class_argmax(probs) + image;
        const auto conf = torch::bincount(cell.flatten(), {}, (e - b) * kCells);
        const auto ca = conf.accessor<std::int64_t, 1>();
        for (std::int64_t k = 0; k < e - b; ++k) {
            const std::int64_t* m = &ca[k * kCells];
            for (int c = 0; c < kNumClasses; ++c) {
                std::int64_t truth = 0, pred = 0;
                for (int o = 0; o < kNumClasses; ++o) {
                    truth += m[c * kNumClasses + o];
                    pred += m[o * kNumClasses + c];
                }
                if (truth == 0) continue;
                const std::int64_t hit = m[c * kNumClasses + c];
                iou_sum[c] += static_cast<double>(hit) / static_cast<double>(truth + pred - hit);
                iou_n[c]++;
            }
        }
    }
    if (was_training) model->train();
    ValidationResult r;
    double mean = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        mean += (inter[c] + 1.0) / (total[c] - inter[c] + 1.0);
        if (iou_n[c] > 0) r.iou[c] = iou_sum[c] / iou_n[c];
    }
    r.loss = 1.0 - mean / kNumClasses;
    return r;
}

SegmentationModel init_model(const ModelSpec& spec, std::uint64_t seed) {
    torch::manual_seed(seed);
    return build_model(spec);
}

TrainHistory train(SegmentationModel& model, const TensorSet& train_set, const TensorSet& val_set,
                   const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.size() == 0) throw Error("training", "EmptyDataset", "training set is empty");
    if (val_set.size() == 0) throw Error("training", "EmptyDataset", "validation set is empty");

    torch::manual_seed(config.seed);
    Rng rng(config.seed);
    torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(config.learning_rate));

    std::vector<std::int64_t> order(static_cast<std::size_t>(train_set.size()));
    std::iota(order.begin(), order.end(), 0);

    TrainHistory history;
    std::vector<torch::Tensor> best_state;
    double best_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        model->train();
        rng.shuffle(order);
        double loss_sum = 0;
        int batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
            const auto idx = batch_indices(order, b, e);
            const auto x = train_set.inputs.index_select(0, idx);
            const auto target = one_hot_batch(train_set.labels.index_select(0, idx));
            optimizer.zero_grad();
            const auto loss = jaccard_loss(model->forward(x), target);
            const double value = loss.item<double>();
            if (!std::isfinite(value))
                throw Error("training", "DivergedLoss", "non-finite loss at epoch " + std::to_string(epoch));
            loss.backward();
            optimizer.step();
            loss_sum += value;
            ++batches;
        }
        const ValidationResult v = validate_model(model, val_set, config.batch_size);
        if (!std::isfinite(v.loss))
            throw Error("training", "DivergedLoss", "non-finite validation loss at epoch " + std::to_string(epoch));
        history.epochs.push_back({epoch, loss_sum / batches, v.loss, v.iou});
        if (v.loss < best_loss) {
            best_loss = v.loss;
            history.best_epoch = epoch;
            best_state = snapshot_state(model);
        }
        if (on_epoch) on_epoch(history.epochs.back(), model);
        if (epoch - history.best_epoch >= config.patience && epoch < config.max_epochs) {
            history.stopped_early = true;
            break;
        }
    }
    restore_state(model, best_state);
    model->eval();
    return history;
}

}  // namespace mammoseg
