#include <mammoseg/evaluation.hpp>
#include <mammoseg/geometry.hpp>
#include <mammoseg/preprocess.hpp>
#include <mammoseg/service.hpp>

#include <httplib.h>

#include <cstdio>
#include <fstream>
#include <semaphore>
#include <thread>

#include <unistd.h>

namespace fs = std::filesystem;

namespace mammoseg {

// ---------------------------------------------------------------- store

AnnotationStore::AnnotationStore(fs::path dir, fs::path log_path) : dir_(std::move(dir)), log_path_(std::move(log_path)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (!log_path_.parent_path().empty()) fs::create_directories(log_path_.parent_path(), ec);
    if (ec) throw Error("service", "IoError", "cannot create " + dir_.string() + ": " + ec.message());
}

std::optional<AnnotationSet> AnnotationStore::get(const std::string& image_id) const {
    const fs::path p = dir_ / (image_id + ".json");
    if (!fs::exists(p)) return std::nullopt;
    return load_annotation(p);
}

std::mutex& AnnotationStore::lock_for(const std::string& image_id) {
    std::lock_guard guard(locks_mutex_);
    auto& slot = locks_[image_id];
    if (!slot) slot = std::make_unique<std::mutex>();
    return *slot;
}

AnnotationStore::PutResult AnnotationStore::put(const AnnotationSet& incoming) {
    PutResult r;
    r.violations = validate_annotation(incoming);
    if (!r.violations.empty()) {
        r.status = PutStatus::invalid;
        return r;
    }
    std::lock_guard guard(lock_for(incoming.image_id));
    const auto current = get(incoming.image_id);
    r.current_version = current ? current->version : 0;
    if (incoming.version != r.current_version) {
        r.status = PutStatus::conflict;
        if (current) r.stored = *current;
        return r;
    }
    r.stored = incoming;
    r.stored.version = r.current_version + 1;
    {
        std::lock_guard log_guard(log_mutex_);
        const std::string line =
            json{{"image_id", r.stored.image_id}, {"version", r.stored.version}, {"annotation", to_json(r.stored)}}
                .dump() +
            "\n";
        std::FILE* f = std::fopen(log_path_.c_str(), "ab");
        if (!f) throw Error("service", "IoError", "cannot open " + log_path_.string());
        const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() && std::fflush(f) == 0 &&
                        ::fsync(fileno(f)) == 0;
        std::fclose(f);
        if (!ok) throw Error("service", "IoError", "cannot append to " + log_path_.string());
    }
    save_annotation(dir_ / (r.stored.image_id + ".json"), r.stored);
    r.current_version = r.stored.version;
    return r;
}

std::map<std::string, AnnotationSet> AnnotationStore::replay(const fs::path& log_path) {
    std::map<std::string, AnnotationSet> state;
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            AnnotationSet a = annotation_from_json(j.at("annotation"));
            auto it = state.find(a.image_id);
            if (it == state.end() || it->second.version < a.version) state[a.image_id] = std::move(a);
        } catch (const std::exception&) {
            // truncated final line
            if (in.peek() == std::char_traits<char>::eof()) break;
            throw Error("service", "CorruptLog", "unparseable line in " + log_path.string());
        }
    }
    return state;
}

int AnnotationStore::recover() {
    int repaired = 0;
    for (const auto& [id, ann] : replay(log_path_)) {
        std::lock_guard guard(lock_for(id));
        const auto current = get(id);
        if (!current || current->version < ann.version) {
            save_annotation(dir_ / (id + ".json"), ann);
            ++repaired;
        }
    }
    return repaired;
}

// ---------------------------------------------------------------- prediction

json predict_structures(const ImageRecord& record, const SegmentationPredictor& predictor, double simplify_tolerance) {
    const PreprocessResult pre = preprocess_pipeline(record, predictor.preprocessing());
    const LabelMap labels = argmax_labels(predictor.predict(pre.model_input));
    const int w = record.meta.width, h = record.meta.height;
    const double sx = static_cast<double>(w) / labels.width();
    const double sy = static_cast<double>(h) / labels.height();
    const bool flip = record.meta.laterality == Laterality::L;

    auto to_image = [&](const Polygon& p) {
        Polygon out;
        for (const auto& v : p.vertices) out.vertices.push_back({flip ? w - v.x * sx : v.x * sx, v.y * sy});
        return out;
    };
    json structures = json::object();
    const auto outlines = label_outlines(labels, simplify_tolerance);
    for (auto c : kAllClasses)
        if (outlines[code(c)]) structures[std::string(to_string(c))] = to_json(to_image(*outlines[code(c)]));
    return json{{"image_id", record.meta.image_id},
                {"exam_id", record.meta.exam_id},
                {"view", to_string(record.meta.view)},
                {"laterality", to_string(record.meta.laterality)},
                {"pixel_spacing_mm", record.meta.pixel_spacing_mm},
                {"provenance", "model"},
                {"structures", structures}};
}

// ---------------------------------------------------------------- service

json to_json(const ServiceConfig& c) {
    return json{{"data_root", c.data_root.string()},
                {"runs_root", c.runs_root.string()},
                {"host", c.host},
                {"port", c.port},
                {"max_concurrent_inferences", c.max_concurrent_inferences},
                {"worker_threads", c.worker_threads},
                {"simplify_tolerance", c.simplify_tolerance},
                {"preprocess", to_json(c.preprocess)}};
}

struct Service::Impl {
    explicit Impl(int max_inferences) : inference_slots(std::max(1, max_inferences)) {}
    httplib::Server server;
    std::thread thread;
    std::counting_semaphore<1024> inference_slots;
};

namespace {

Reply error_reply(int status, const std::string& code, const std::string& detail) {
    Reply r;
    r.status = status;
    r.body = {{"error", code}, {"detail", detail}};
    return r;
}

int status_for(const Error& e) {
    const std::string& k = e.kind();
    if (k == "UnknownRun" || k == "NotFound") return 404;
    if (k == "IoError" || k == "CorruptLog") return 500;
    return 422;
}

json parse_body(const std::string& body) {
    try {
        return json::parse(body);
    } catch (const json::exception& e) {
        throw Error("service", "InvalidJson", e.what());
    }
}

std::string require_string(const json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end() || !it->is_string()) throw Error("service", "SchemaError", std::string("missing string '") + key + "'");
    return it->get<std::string>();
}

}  // namespace

Service::Service(ServiceConfig config)
    : config_(std::move(config)), impl_(std::make_unique<Impl>(config_.max_concurrent_inferences)) {
    config_.preprocess.validate();
    for (auto& e : scan_dataset(config_.data_root)) images_.emplace(e.meta.image_id, std::move(e));
    store_ = std::make_unique<AnnotationStore>(config_.data_root / "annotations", config_.data_root / "edits.jsonl");
    store_->recover();
}

Service::~Service() { stop(); }

void Service::set_predictor_resolver(PredictorResolver resolver) {
    std::lock_guard guard(cache_mutex_);
    resolver_ = std::move(resolver);
    cache_.clear();
}

const DatasetEntry* Service::find(const std::string& id) const {
    const auto it = images_.find(id);
    return it == images_.end() ? nullptr : &it->second;
}

std::shared_ptr<const SegmentationPredictor> Service::resolve(const std::string& run_id) {
    std::lock_guard guard(cache_mutex_);
    if (auto it = cache_.find(run_id); it != cache_.end()) return it->second;
    std::shared_ptr<const SegmentationPredictor> p;
    if (resolver_) {
        p = resolver_(run_id);
    } else {
        if (run_id.empty() || run_id.find('/') != std::string::npos || run_id.find("..") != std::string::npos)
            return nullptr;
        try {
            p = load_run(config_.runs_root / run_id);
        } catch (const Error& e) {
            if (e.kind() == "UnknownRun") return nullptr;
            throw;
        }
    }
    if (p) cache_[run_id] = p;
    return p;
}

Reply Service::list_images() const {
    Reply r;
    r.body = json::array();
    for (const auto& [id, e] : images_) {
        json m = to_json(e.meta);
        m["annotated"] = store_->get(id).has_value();
        r.body.push_back(m);
    }
    return r;
}

Reply Service::get_image(const std::string& id, const std::string& variant) const {
    const DatasetEntry* e = find(id);
    if (!e) return error_reply(404, "service.NotFound", "unknown image " + id);
    if (variant != "raw" && variant != "display")
        return error_reply(400, "service.InvalidVariant", "variant must be raw or display");
    const ImageRecord record = load_record({e->image_path, e->format});
    std::vector<unsigned char> png =
        variant == "raw" ? encode_png(record.pixels) : encode_png(display_image(record, config_.preprocess));
    Reply r;
    r.bytes.assign(png.begin(), png.end());
    r.content_type = "image/png";
    r.headers = {{"X-View", std::string(to_string(record.meta.view))},
                 {"X-Laterality", std::string(to_string(record.meta.laterality))},
                 {"X-Width", std::to_string(record.meta.width)},
                 {"X-Height", std::to_string(record.meta.height)},
                 {"X-Pixel-Spacing", std::to_string(record.meta.pixel_spacing_mm)},
                 {"X-Variant", variant}};
    return r;
}

Reply Service::get_annotation(const std::string& id) const {
    if (!find(id)) return error_reply(404, "service.NotFound", "unknown image " + id);
    const auto a = store_->get(id);
    if (!a) return error_reply(404, "service.NotFound", "no annotation for " + id);
    Reply r;
    r.body = to_json(*a);
    r.body["warnings"] = to_json(annotation_warnings(*a));
    return r;
}

Reply Service::put_annotation(const std::string& id, const std::string& body) {
    const DatasetEntry* e = find(id);
    if (!e) return error_reply(404, "service.NotFound", "unknown image " + id);
    AnnotationSet ann;
    try {
        ann = annotation_from_json(parse_body(body));
    } catch (const Error& err) {
        return error_reply(422, err.code(), err.what());
    }
    std::vector<Violation> extra;
    if (ann.image_id != id) extra.push_back({"image_id", "does not match the URL"});
    if (ann.view != e->meta.view) extra.push_back({"view", "does not match the image"});
    if (ann.laterality != e->meta.laterality) extra.push_back({"laterality", "does not match the image"});
    for (const auto& [field, poly] : std::vector<std::pair<const char*, const Polygon*>>{
             {"structures.fatty", &ann.fatty},
             {"structures.fibroglandular", &ann.fibroglandular},
             {"structures.nipple", &ann.nipple},
             {"structures.pectoral", ann.pectoral ? &*ann.pectoral : nullptr}})
        if (poly && !polygon_within(*poly, e->meta.width, e->meta.height, 2.0))
            extra.push_back({field, "vertex outside the image"});
    if (!extra.empty()) {
        Reply r = error_reply(422, "core.InvalidAnnotation", "annotation violates the schema");
        r.body["violations"] = to_json(extra);
        return r;
    }
    const auto res = store_->put(ann);
    switch (res.status) {
        case AnnotationStore::PutStatus::invalid: {
            Reply r = error_reply(422, "core.InvalidAnnotation", "annotation violates the schema");
            r.body["violations"] = to_json(res.violations);
            return r;
        }
        case AnnotationStore::PutStatus::conflict: {
            Reply r = error_reply(409, "service.VersionConflict",
                                  "base version " + std::to_string(ann.version) + " is stale");
            r.body["current_version"] = res.current_version;
            return r;
        }
        case AnnotationStore::PutStatus::ok: break;
    }
    Reply r;
    r.body = to_json(res.stored);
    r.body["warnings"] = to_json(annotation_warnings(res.stored));
    return r;
}

Reply Service::init_breast_contour(const std::string& body) const {
    const std::string id = require_string(parse_body(body), "image_id");
    const DatasetEntry* e = find(id);
    if (!e) return error_reply(404, "service.NotFound", "unknown image " + id);
    const ImageRecord record = load_record({e->image_path, e->format});
    Reply r;
    r.body = {{"image_id", id}, {"provenance", "otsu"}, {"polygon", to_json(breast_contour_init(record))}};
    return r;
}

Reply Service::init_predict(const std::string& body) {
    const json j = parse_body(body);
    const std::string id = require_string(j, "image_id");
    const std::string run_id = require_string(j, "run_id");
    const DatasetEntry* e = find(id);
    if (!e) return error_reply(404, "service.NotFound", "unknown image " + id);
    const auto predictor = resolve(run_id);
    if (!predictor) return error_reply(404, "service.UnknownRun", "unknown run " + run_id);
    if (predictor->view() != e->meta.view)
        return error_reply(409, "service.ViewMismatch",
                           "run " + run_id + " was trained on " + std::string(to_string(predictor->view())) +
                               " images, image " + id + " is " + std::string(to_string(e->meta.view)));
    const ImageRecord record = load_record({e->image_path, e->format});
    impl_->inference_slots.acquire();
    Reply r;
    try {
        r.body = predict_structures(record, *predictor, config_.simplify_tolerance);
    } catch (...) {
        impl_->inference_slots.release();
        throw;
    }
    impl_->inference_slots.release();
    r.body["run_id"] = run_id;
    return r;
}

Reply Service::classes() const {
    Reply r;
    r.body = palette_json();
    return r;
}

namespace {

void send(httplib::Response& res, const Reply& r) {
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    if (!r.bytes.empty())
        res.set_content(r.bytes, r.content_type);
    else
        res.set_content(r.body.dump(), "application/json");
}

template <class Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            send(res, fn(req));
        } catch (const Error& e) {
            send(res, error_reply(status_for(e), e.code(), e.what()));
        } catch (const std::exception& e) {
            send(res, error_reply(500, "service.Internal", e.what()));
        }
    };
}

}  // namespace

int Service::start() {
    auto& svr = impl_->server;
    const int threads = std::max(2, config_.worker_threads);
    svr.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    svr.Get("/health", guarded([](const httplib::Request&) { return Reply{200, json{{"status", "ok"}}}; }));
    svr.Get("/classes", guarded([this](const httplib::Request&) { return classes(); }));
    svr.Get("/images", guarded([this](const httplib::Request&) { return list_images(); }));
    svr.Get(R"(/images/([^/]+))", guarded([this](const httplib::Request& req) {
                const std::string variant = req.has_param("variant") ? req.get_param_value("variant") : "display";
                return get_image(req.matches[1], variant);
            }));
    svr.Get(R"(/annotations/([^/]+))",
            guarded([this](const httplib::Request& req) { return get_annotation(req.matches[1]); }));
    svr.Put(R"(/annotations/([^/]+))",
            guarded([this](const httplib::Request& req) { return put_annotation(req.matches[1], req.body); }));
    svr.Post("/init/breast-contour",
             guarded([this](const httplib::Request& req) { return init_breast_contour(req.body); }));
    svr.Post("/init/predict", guarded([this](const httplib::Request& req) { return init_predict(req.body); }));

    const int port = config_.port == 0 ? svr.bind_to_any_port(config_.host) : svr.bind_to_port(config_.host, config_.port)
                                                                                    ? config_.port
                                                                                    : -1;
    if (port < 0) throw Error("service", "BindFailed", config_.host + ":" + std::to_string(config_.port));
    impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
    svr.wait_until_ready();
    return port;
}

void Service::run() {
    if (impl_->thread.joinable()) impl_->thread.join();
}

void Service::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace mammoseg
