// mammoseg command-line entry point.
//
// Exit status: 0 success, 1 domain error (module-qualified code on stderr), 2 usage error.

#include <mammoseg/dataset.hpp>
#include <mammoseg/datasplit.hpp>
#include <mammoseg/evaluation.hpp>
#include <mammoseg/geometry.hpp>
#include <mammoseg/inference.hpp>
#include <mammoseg/ingest.hpp>
#include <mammoseg/pipeline.hpp>
#include <mammoseg/preprocess.hpp>
#include <mammoseg/service.hpp>
#include <mammoseg/testkit.hpp>
#include <mammoseg/training.hpp>

#include <CLI11.hpp>

#include <malloc.h>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <sstream>

#ifndef MAMMOSEG_VERSION
#define MAMMOSEG_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace mammoseg;

namespace {

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class Logger {
public:
    bool json_mode = false;

    void info(const std::string& event, const json& fields = json::object()) const { emit("info", event, fields); }
    void error(const std::string& code, const std::string& message) const {
        if (json_mode)
            emit("error", "error", {{"code", code}, {"message", message}});
        else
            std::cerr << "error: " << code << ": " << message << "\n";
    }

private:
    void emit(const char* level, const std::string& event, const json& fields) const {
        if (json_mode) {
            json j{{"ts", utc_now()}, {"level", level}, {"event", event}};
            for (const auto& [k, v] : fields.items()) j[k] = v;
            std::cerr << j.dump() << "\n";
            return;
        }
        std::cerr << "[" << event << "]";
        for (const auto& [k, v] : fields.items()) std::cerr << " " << k << "=" << (v.is_string() ? v.get<std::string>() : v.dump());
        std::cerr << "\n";
    }
};

// Overlay config-file values onto options the user did not pass on the command line.
class Layer {
public:
    Layer(const json& config, const char* section) {
        if (const auto it = config.find(section); it != config.end() && it->is_object()) section_ = *it;
    }
    template <class T>
    void apply(const CLI::Option* opt, T& target, const char* key) const {
        if (opt->count() > 0) return;
        const auto it = section_.find(key);
        if (it == section_.end()) return;
        try {
            target = it->get<T>();
        } catch (const json::exception& e) {
            throw Error("cli", "InvalidConfig", std::string(key) + ": " + e.what());
        }
    }

private:
    json section_ = json::object();
};

struct Manifest {
    std::string command;
    json config = json::object();
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
    std::string started_at = utc_now();

    void write(const fs::path& dir) const {
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        std::error_code ec;
        fs::create_directories(dir, ec);
        write_json_file(dir / "manifest.json", json{{"command", command},
                                                    {"tool_version", MAMMOSEG_VERSION},
                                                    {"config", config},
                                                    {"inputs", inputs},
                                                    {"outputs", outputs},
                                                    {"started_at", started_at},
                                                    {"duration_s", seconds}});
    }
};

fs::path parent_or_dot(const fs::path& p) {
    const fs::path parent = p.parent_path();
    return parent.empty() ? fs::path(".") : parent;
}

std::optional<SourceFormat> format_option(const std::string& s) {
    if (s.empty() || s == "auto") return std::nullopt;
    return parse_source_format(s);
}

struct PreprocOptions {
    PreprocConfig cfg;
    CLI::Option *p_low, *p_high, *kernel, *clip, *bins, *size;

    void add(CLI::App* app) {
        p_low = app->add_option("--p-low", cfg.p_low, "lower percentile for windowing");
        p_high = app->add_option("--p-high", cfg.p_high, "upper percentile for windowing");
        kernel = app->add_option("--clahe-kernel", cfg.clahe_kernel_fraction, "CLAHE tile size as a fraction of the image");
        clip = app->add_option("--clahe-clip", cfg.clahe_clip_limit, "CLAHE clip limit (normalized)");
        bins = app->add_option("--clahe-bins", cfg.clahe_bins, "CLAHE histogram bins");
        size = app->add_option("--model-size", cfg.model_size, "model grid edge in pixels");
    }
    PreprocConfig resolve(const json& config) {
        const Layer l(config, "preprocess");
        l.apply(p_low, cfg.p_low, "p_low");
        l.apply(p_high, cfg.p_high, "p_high");
        l.apply(kernel, cfg.clahe_kernel_fraction, "clahe_kernel_fraction");
        l.apply(clip, cfg.clahe_clip_limit, "clahe_clip_limit");
        l.apply(bins, cfg.clahe_bins, "clahe_bins");
        l.apply(size, cfg.model_size, "model_size");
        cfg.validate();
        return cfg;
    }
};

ImageU8 to_bytes(const ImageF& img) {
    ImageU8 out(img.width(), img.height());
    const auto src = img.pixels();
    auto dst = out.pixels();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = static_cast<std::uint8_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

SplitAssignment load_split(const fs::path& path, fs::path& data_root) {
    const json j = read_json_file(path);
    if (data_root.empty()) {
        const auto it = j.find("data_root");
        if (it == j.end()) throw Error("cli", "MissingDataRoot", "split file has no data_root; pass --data");
        data_root = it->get<std::string>();
    }
    return split_from_json(j);
}

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
    CLI::App app{"Mammography structure segmentation: data preparation, training, evaluation and annotation service"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", MAMMOSEG_VERSION);

    std::string config_path;
    bool json_logs = false;
    int threads = 0;
    app.add_option("--config", config_path, "JSON config file; flags take precedence over it")
        ->check(CLI::ExistingFile);
    app.add_flag("--json-logs", json_logs, "machine-readable progress on stderr");
    app.add_option("--threads", threads, "intra-op threads for model computation (0 = library default)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic phantom corpus");
    int synth_exams = 100;
    std::string synth_out;
    testkit::CorpusParams corpus;
    auto* o_exams = synth->add_option("--exams", synth_exams, "number of examinations (4 images each)");
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    auto* o_sseed = synth->add_option("--seed", corpus.seed, "generator seed");
    auto* o_width = synth->add_option("--width", corpus.width, "image width");
    auto* o_height = synth->add_option("--height", corpus.height, "image height");
    auto* o_noise = synth->add_option("--noise", corpus.noise_sigma, "Gaussian noise sigma");
    auto* o_ccp = synth->add_option("--cc-pectoral-probability", corpus.cc_pectoral_probability,
                                    "probability that a CC image shows the pectoral muscle");
    auto* o_nd = synth->add_option("--nd-fraction", corpus.nd_fraction, "share of exams without density");
    auto* o_dicom = synth->add_flag("--dicom", corpus.dicom, "write DICOM instead of PNG + sidecar");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "scan a dataset and validate images and annotations");
    std::string ingest_data, ingest_format = "auto", ingest_out;
    bool ingest_strict = false;
    ingest->add_option("--data", ingest_data, "dataset root")->required();
    ingest->add_option("--format", ingest_format, "auto, dicom or png");
    ingest->add_option("--out", ingest_out, "directory for ingest_report.json");
    ingest->add_flag("--strict", ingest_strict, "exit with an error when any image or annotation is invalid");

    // preprocess
    auto* preprocess = app.add_subcommand("preprocess", "write display and model-grid images");
    std::string pre_data, pre_out;
    PreprocOptions pre_opts;
    preprocess->add_option("--data", pre_data, "dataset root")->required();
    preprocess->add_option("--out", pre_out, "output directory")->required();
    pre_opts.add(preprocess);

    // rasterize
    auto* rasterize = app.add_subcommand("rasterize", "rasterize annotations into label maps");
    std::string ras_data, ras_out;
    int ras_size = 384;
    double ras_margin = 2.0;
    rasterize->add_option("--data", ras_data, "dataset root")->required();
    rasterize->add_option("--out", ras_out, "output directory")->required();
    auto* o_rsize = rasterize->add_option("--model-size", ras_size, "model grid edge in pixels");
    auto* o_margin = rasterize->add_option("--margin", ras_margin, "tolerated vertex overshoot in pixels");

    // split
    auto* split = app.add_subcommand("split", "exam-grouped, density-stratified train/validation/test split");
    std::string split_data, split_out;
    std::uint64_t split_seed = 42;
    std::vector<double> split_ratios{0.66, 0.23, 0.11};
    split->add_option("--data", split_data, "dataset root")->required();
    split->add_option("--out", split_out, "split file (default <data>/split.json)");
    auto* o_seed = split->add_option("--seed", split_seed, "shuffle seed");
    auto* o_ratios = split->add_option("--ratios", split_ratios, "train,validation,test fractions")
                         ->delimiter(',')
                         ->expected(3);

    // train
    auto* train_cmd = app.add_subcommand("train", "train one segmentation model for one view");
    std::string train_view, train_arch = "unet", train_encoder = "small", train_split, train_out, train_data;
    TrainConfig tcfg;
    int input_size = 384;
    PreprocOptions train_pre;
    auto* o_view = train_cmd->add_option("--view", train_view, "MLO or CC");
    auto* o_arch = train_cmd->add_option("--arch", train_arch, "unet, fpn, linknet or pspnet");
    auto* o_enc = train_cmd->add_option("--encoder", train_encoder, "small or efficientnet-b3");
    train_cmd->add_option("--split", train_split, "split file")->required();
    train_cmd->add_option("--out", train_out, "run directory")->required();
    train_cmd->add_option("--data", train_data, "dataset root (default: the split's data_root)");
    auto* o_lr = train_cmd->add_option("--lr", tcfg.learning_rate, "learning rate");
    auto* o_bs = train_cmd->add_option("--batch-size", tcfg.batch_size, "mini-batch size");
    auto* o_ep = train_cmd->add_option("--epochs", tcfg.max_epochs, "maximum number of epochs");
    auto* o_pat = train_cmd->add_option("--patience", tcfg.patience, "early-stopping patience in epochs");
    auto* o_tseed = train_cmd->add_option("--seed", tcfg.seed, "initialization and shuffle seed");
    auto* o_isize = train_cmd->add_option("--input-size", input_size, "model input edge (multiple of 32)");
    train_pre.add(train_cmd);

    // evaluate
    auto* evaluate_cmd = app.add_subcommand("evaluate", "per-structure IoU report for a trained run");
    std::string eval_run, eval_split, eval_subset = "test", eval_out, eval_format, eval_overlays, eval_data;
    evaluate_cmd->add_option("--run", eval_run, "run directory")->required();
    evaluate_cmd->add_option("--split", eval_split, "split file")->required();
    evaluate_cmd->add_option("--subset", eval_subset, "train, validation or test");
    evaluate_cmd->add_option("--out", eval_out, "report file (.md or .csv)")->required();
    evaluate_cmd->add_option("--format", eval_format, "md or csv (default: from the extension)");
    evaluate_cmd->add_option("--overlays", eval_overlays, "directory for image | truth | prediction triptychs");
    evaluate_cmd->add_option("--data", eval_data, "dataset root (default: the split's data_root)");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "segment one image with a trained run");
    std::string pred_run, pred_image, pred_format = "auto", pred_out;
    double pred_tol = 0.5;
    predict_cmd->add_option("--run", pred_run, "run directory")->required();
    predict_cmd->add_option("--image", pred_image, "image file (.png with sidecar, or .dcm)")->required();
    predict_cmd->add_option("--format", pred_format, "auto, dicom or png");
    predict_cmd->add_option("--out", pred_out, "output directory")->required();
    predict_cmd->add_option("--simplify", pred_tol, "contour simplification tolerance (model-grid pixels)");

    // serve
    auto* serve = app.add_subcommand("serve", "run the annotation service");
    ServiceConfig scfg;
    std::string serve_data, serve_runs;
    serve->add_option("--data", serve_data, "dataset root")->required();
    auto* o_runs = serve->add_option("--runs", serve_runs, "directory holding run directories");
    auto* o_host = serve->add_option("--host", scfg.host, "bind address");
    auto* o_port = serve->add_option("--port", scfg.port, "port (0 = any free port)");
    auto* o_inf = serve->add_option("--max-inferences", scfg.max_concurrent_inferences,
                                    "maximum concurrent model inferences");
    auto* o_workers = serve->add_option("--workers", scfg.worker_threads, "HTTP worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    Logger log;
    log.json_mode = json_logs;
    try {
        const json config = config_path.empty() ? json::object() : read_json_file(config_path);
        if (threads > 0) torch::set_num_threads(threads);
        Manifest manifest;

        if (*synth) {
            const Layer l(config, "synth");
            l.apply(o_exams, synth_exams, "exams");
            l.apply(o_sseed, corpus.seed, "seed");
            l.apply(o_width, corpus.width, "width");
            l.apply(o_height, corpus.height, "height");
            l.apply(o_noise, corpus.noise_sigma, "noise_sigma");
            l.apply(o_ccp, corpus.cc_pectoral_probability, "cc_pectoral_probability");
            l.apply(o_nd, corpus.nd_fraction, "nd_fraction");
            l.apply(o_dicom, corpus.dicom, "dicom");
            const auto summary = testkit::generate_corpus(synth_exams, corpus, synth_out);
            manifest.command = "synth";
            manifest.config = {{"exams", synth_exams},        {"seed", corpus.seed},
                               {"width", corpus.width},       {"height", corpus.height},
                               {"noise_sigma", corpus.noise_sigma},
                               {"cc_pectoral_probability", corpus.cc_pectoral_probability},
                               {"nd_fraction", corpus.nd_fraction}, {"dicom", corpus.dicom}};
            manifest.outputs = {{"dataset", synth_out}, {"exams", summary.exams}, {"images", summary.images}};
            manifest.write(synth_out);
            log.info("synth", {{"exams", summary.exams}, {"images", summary.images}, {"out", synth_out}});
        } else if (*ingest) {
            const auto entries = scan_dataset(ingest_data, format_option(ingest_format));
            json images = json::array();
            int invalid = 0;
            for (const auto& e : entries) {
                json row = to_json(e.meta);
                row["path"] = e.image_path.string();
                row["density"] = to_string(e.density);
                row["annotated"] = e.annotated();
                std::vector<Violation> violations;
                try {
                    violations = validate_record(load_record({e.image_path, e.format}));
                } catch (const Error& err) {
                    violations.push_back({"pixels", err.code() + ": " + err.what()});
                }
                if (e.annotation) {
                    const auto av = validate_annotation(*e.annotation);
                    violations.insert(violations.end(), av.begin(), av.end());
                    row["warnings"] = to_json(annotation_warnings(*e.annotation));
                }
                row["violations"] = to_json(violations);
                invalid += violations.empty() ? 0 : 1;
                images.push_back(row);
            }
            const json report{{"images", images},
                              {"total", entries.size()},
                              {"invalid", invalid},
                              {"annotated", std::count_if(entries.begin(), entries.end(),
                                                          [](const DatasetEntry& e) { return e.annotated(); })}};
            if (!ingest_out.empty()) {
                write_json_file(fs::path(ingest_out) / "ingest_report.json", report);
                manifest.command = "ingest";
                manifest.config = {{"format", ingest_format}, {"strict", ingest_strict}};
                manifest.inputs = {{"data", ingest_data}};
                manifest.outputs = {{"report", (fs::path(ingest_out) / "ingest_report.json").string()}};
                manifest.write(ingest_out);
            }
            log.info("ingest", {{"images", entries.size()}, {"invalid", invalid}});
            if (ingest_strict && invalid > 0)
                throw Error("ingest", "ValidationFailed", std::to_string(invalid) + " invalid image(s)");
        } else if (*preprocess) {
            const PreprocConfig cfg = pre_opts.resolve(config);
            const auto entries = scan_dataset(pre_data);
            const fs::path out(pre_out);
            for (const auto& e : entries) {
                const auto r = preprocess_pipeline(load_record({e.image_path, e.format}), cfg);
                write_png(out / "display" / (e.meta.image_id + ".png"), r.display);
                write_png(out / "model" / (e.meta.image_id + ".png"), to_bytes(r.model_input));
            }
            manifest.command = "preprocess";
            manifest.config = to_json(cfg);
            manifest.inputs = {{"data", pre_data}};
            manifest.outputs = {{"display", (out / "display").string()}, {"model", (out / "model").string()},
                                {"images", entries.size()}};
            manifest.write(out);
            log.info("preprocess", {{"images", entries.size()}, {"out", pre_out}});
        } else if (*rasterize) {
            const Layer l(config, "rasterize");
            l.apply(o_rsize, ras_size, "model_size");
            l.apply(o_margin, ras_margin, "margin");
            const auto entries = scan_dataset(ras_data);
            const fs::path out(ras_out);
            int n = 0;
            for (const auto& e : entries) {
                if (!e.annotated()) continue;
                const LabelMap labels = rasterize_annotations(*e.annotation, e.meta.width, e.meta.height, ras_margin);
                write_png(out / "labels" / (e.meta.image_id + ".png"), labels);
                write_png(out / "model" / (e.meta.image_id + ".png"),
                          labels_for_model(labels, e.meta.laterality, ras_size));
                ++n;
            }
            manifest.command = "rasterize";
            manifest.config = {{"model_size", ras_size}, {"margin", ras_margin}};
            manifest.inputs = {{"data", ras_data}};
            manifest.outputs = {{"labels", (out / "labels").string()}, {"model", (out / "model").string()},
                                {"images", n}};
            manifest.write(out);
            log.info("rasterize", {{"images", n}, {"out", ras_out}});
        } else if (*split) {
            const Layer l(config, "split");
            l.apply(o_seed, split_seed, "seed");
            l.apply(o_ratios, split_ratios, "ratios");
            if (split_ratios.size() != 3) throw Error("datasplit", "InvalidRatios", "need three ratios");
            const SplitRatios ratios{split_ratios[0], split_ratios[1], split_ratios[2]};
            const auto entries = scan_dataset(split_data);
            const SplitAssignment a = stratified_split(split_records(entries), ratios, split_seed);
            const fs::path out = split_out.empty() ? fs::path(split_data) / "split.json" : fs::path(split_out);
            json j = to_json(a);
            j["data_root"] = fs::absolute(split_data).lexically_normal().string();
            write_json_file(out, j);
            const fs::path table = parent_or_dot(out) / (out.stem().string() + "_table.md");
            write_text_atomic(table, render_split_table(a.summary));
            manifest.command = "split";
            manifest.config = {{"seed", split_seed}, {"ratios", split_ratios}};
            manifest.inputs = {{"data", split_data}};
            manifest.outputs = {{"split", out.string()}, {"table", table.string()}};
            manifest.write(parent_or_dot(out));
            std::cout << render_split_table(a.summary);
            log.info("split", {{"exams", a.exams.size()}, {"out", out.string()}});
        } else if (*train_cmd) {
            const Layer lt(config, "train");
            const Layer lm(config, "model");
            lm.apply(o_arch, train_arch, "architecture");
            lm.apply(o_enc, train_encoder, "encoder");
            lm.apply(o_isize, input_size, "input_size");
            lt.apply(o_view, train_view, "view");
            lt.apply(o_lr, tcfg.learning_rate, "learning_rate");
            lt.apply(o_bs, tcfg.batch_size, "batch_size");
            lt.apply(o_ep, tcfg.max_epochs, "max_epochs");
            lt.apply(o_pat, tcfg.patience, "patience");
            lt.apply(o_tseed, tcfg.seed, "seed");
            if (train_view.empty()) throw CLI::RequiredError("--view");
            tcfg.view = parse_view(train_view);
            tcfg.validate();

            RunConfig run;
            run.model = default_spec(parse_architecture(train_arch), parse_encoder(train_encoder), input_size);
            if (const auto it = config.find("model"); it != config.end()) {
                json m = to_json(run.model);
                for (const auto& [k, v] : it->items())
                    if (k != "architecture" && k != "encoder" && k != "input_size") m[k] = v;
                run.model = model_spec_from_json(m);
            }
            run.model.validate();
            if (train_pre.size->count() == 0) train_pre.cfg.model_size = input_size;
            run.preprocess = train_pre.resolve(config);
            run.train = tcfg;
            fs::path data_root(train_data);
            const SplitAssignment a = load_split(train_split, data_root);
            run.extra = {{"split", fs::absolute(train_split).lexically_normal().string()},
                         {"data_root", data_root.string()}};
            const auto entries = scan_dataset(data_root);
            log.info("train_start", {{"view", train_view}, {"architecture", train_arch}, {"encoder", train_encoder}});
            const auto outcome = train_run(entries, a, run, train_out, [&](const EpochRecord& e, SegmentationModel&) {
                log.info("epoch", {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
            });
            manifest.command = "train";
            manifest.config = to_json(run);
            manifest.inputs = {{"split", train_split}, {"data", data_root.string()},
                               {"train_images", outcome.train_images}, {"val_images", outcome.val_images}};
            manifest.outputs = {{"run", train_out},
                                {"best_epoch", outcome.history.best_epoch},
                                {"epochs", outcome.history.epochs.size()},
                                {"best_val_loss", outcome.history.best().val_loss}};
            manifest.write(train_out);
            log.info("train_done", {{"best_epoch", outcome.history.best_epoch},
                                    {"epochs", outcome.history.epochs.size()},
                                    {"best_val_loss", outcome.history.best().val_loss}});
        } else if (*evaluate_cmd) {
            const RunConfig run = read_run_config(eval_run);
            const auto predictor = load_run(eval_run);
            fs::path data_root(eval_data);
            const SplitAssignment a = load_split(eval_split, data_root);
            EvalOptions opts;
            opts.subset = parse_subset(eval_subset);
            if (!eval_overlays.empty()) opts.overlays_dir = eval_overlays;
            const EvalReport report = evaluate_run(*predictor, run, scan_dataset(data_root), a, opts);
            const fs::path out(eval_out);
            std::string fmt = eval_format;
            if (fmt.empty()) fmt = out.extension() == ".csv" ? "csv" : "md";
            if (fmt != "md" && fmt != "csv") throw Error("evaluation", "InvalidFormat", "format must be md or csv");
            const std::string text =
                render_report({report}, fmt == "csv" ? ReportFormat::csv : ReportFormat::markdown);
            write_text_atomic(out, text);
            const fs::path json_out = parent_or_dot(out) / (out.stem().string() + ".json");
            write_json_file(json_out, to_json(report));
            manifest.command = "evaluate";
            manifest.config = {{"subset", eval_subset}, {"format", fmt}};
            manifest.inputs = {{"run", eval_run}, {"split", eval_split}, {"data", data_root.string()}};
            manifest.outputs = {{"report", out.string()}, {"report_json", json_out.string()}};
            if (opts.overlays_dir) manifest.outputs["overlays"] = eval_overlays;
            manifest.write(parent_or_dot(out));
            std::cout << text;
            log.info("evaluate", {{"images", report.per_image.size()},
                                  {"mean_all", report.mean_all ? json(*report.mean_all) : json(nullptr)}});
        } else if (*predict_cmd) {
            const auto predictor = load_run(pred_run);
            const ImageRecord record = load_record({pred_image, format_option(pred_format)});
            if (record.meta.view != predictor->view())
                throw Error("inference", "ViewMismatch",
                            "run expects " + std::string(to_string(predictor->view())) + " images");
            const auto pre = preprocess_pipeline(record, predictor->preprocessing());
            const LabelMap grid = argmax_labels(predictor->predict(pre.model_input));
            const LabelMap original = standardize_orientation(
                resize_nearest(grid, record.meta.width, record.meta.height), record.meta.laterality);
            const fs::path out(pred_out);
            const std::string id = record.meta.image_id;
            write_png(out / (id + "_labels.png"), original);
            write_png(out / (id + "_model_labels.png"), grid);
            write_json_file(out / (id + "_structures.json"), predict_structures(record, *predictor, pred_tol));
            manifest.command = "predict";
            manifest.config = {{"simplify", pred_tol}};
            manifest.inputs = {{"run", pred_run}, {"image", pred_image}};
            manifest.outputs = {{"labels", (out / (id + "_labels.png")).string()},
                                {"structures", (out / (id + "_structures.json")).string()}};
            manifest.write(out);
            log.info("predict", {{"image_id", id}, {"out", pred_out}});
        } else if (*serve) {
            const Layer l(config, "service");
            l.apply(o_runs, serve_runs, "runs_root");
            l.apply(o_host, scfg.host, "host");
            l.apply(o_port, scfg.port, "port");
            l.apply(o_inf, scfg.max_concurrent_inferences, "max_concurrent_inferences");
            l.apply(o_workers, scfg.worker_threads, "worker_threads");
            scfg.data_root = serve_data;
            scfg.runs_root = serve_runs.empty() ? fs::path(serve_data) / "runs" : fs::path(serve_runs);
            if (const auto it = config.find("preprocess"); it != config.end())
                scfg.preprocess = preproc_config_from_json(*it);
            Service service(scfg);
            const int port = service.start();
            log.info("serve", {{"host", scfg.host}, {"port", port}, {"data", serve_data}});
            std::signal(SIGINT, [](int) { g_stop = 1; });
            std::signal(SIGTERM, [](int) { g_stop = 1; });
            while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
            service.stop();
        }
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        log.error(e.code(), e.what());
        return 1;
    } catch (const std::exception& e) {
        log.error("internal", e.what());
        return 1;
    }
    return 0;
}
