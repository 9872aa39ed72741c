#pragma once

// Annotation service: image delivery, versioned annotation store, contour
// initialization from Otsu thresholding or from a trained model.
//
//   GET  /images                     metadata of every image
//   GET  /images/{id}?variant=raw|display
//   GET  /annotations/{id}
//   PUT  /annotations/{id}           body: AnnotationSet, "version" = current version
//   POST /init/breast-contour        {"image_id"}
//   POST /init/predict               {"image_id", "run_id"}
//   GET  /classes                    palette
//   GET  /health

#include <mammoseg/core.hpp>
#include <mammoseg/inference.hpp>
#include <mammoseg/ingest.hpp>
#include <mammoseg/serialization.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace mammoseg {

/// One JSON file per image plus an append-only edit log (one JSON object per line).
class AnnotationStore {
public:
    enum class PutStatus { ok, conflict, invalid };
    struct PutResult {
        PutStatus status = PutStatus::ok;
        int current_version = 0;
        AnnotationSet stored;
        std::vector<Violation> violations;
    };

    AnnotationStore(std::filesystem::path dir, std::filesystem::path log_path);

    std::optional<AnnotationSet> get(const std::string& image_id) const;
    /// Version 0 means "no annotation yet". Writes are serialized per image.
    PutResult put(const AnnotationSet& incoming);

    /// Latest entry per image from a log file; a truncated final line is ignored.
    static std::map<std::string, AnnotationSet> replay(const std::filesystem::path& log_path);
    /// Rewrites per-image files that lag behind the log. Returns the number of files repaired.
    int recover();

    const std::filesystem::path& log_path() const { return log_path_; }

private:
    std::mutex& lock_for(const std::string& image_id);

    std::filesystem::path dir_;
    std::filesystem::path log_path_;
    mutable std::mutex locks_mutex_;
    std::map<std::string, std::unique_ptr<std::mutex>> locks_;
    std::mutex log_mutex_;
};

struct ServiceConfig {
    std::filesystem::path data_root;
    std::filesystem::path runs_root;
    std::string host = "127.0.0.1";
    int port = 8080;
    int max_concurrent_inferences = 2;
    int worker_threads = 8;
    double simplify_tolerance = 0.5;  // model-grid pixels
    PreprocConfig preprocess;
};

json to_json(const ServiceConfig& c);

/// Status code plus body; bodies of non-2xx replies are {"error": "<module.Kind>", "detail": ...}.
struct Reply {
    int status = 200;
    json body;
    std::string bytes;  // binary payload (PNG), overrides body when non-empty
    std::string content_type = "application/json";
    std::map<std::string, std::string> headers;
};

using PredictorResolver = std::function<std::shared_ptr<const SegmentationPredictor>(const std::string& run_id)>;

/// Model prediction -> per-structure polygons in original image coordinates.
/// Classes with no predicted pixel are omitted; each class keeps its largest component.
json predict_structures(const ImageRecord& record, const SegmentationPredictor& predictor, double simplify_tolerance);

class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Replaces run-directory loading (runs_root/<run_id>), e.g. with a test double.
    void set_predictor_resolver(PredictorResolver resolver);

    Reply list_images() const;
    Reply get_image(const std::string& id, const std::string& variant) const;
    Reply get_annotation(const std::string& id) const;
    Reply put_annotation(const std::string& id, const std::string& body);
    Reply init_breast_contour(const std::string& body) const;
    Reply init_predict(const std::string& body);
    Reply classes() const;

    /// Binds and serves on a background thread; returns the bound port (config port 0 = any).
    int start();
    /// Blocks until stop() is called from another thread or a signal handler.
    void run();
    void stop();

    AnnotationStore& store() { return *store_; }
    const ServiceConfig& config() const { return config_; }

private:
    struct Impl;
    std::shared_ptr<const SegmentationPredictor> resolve(const std::string& run_id);
    const DatasetEntry* find(const std::string& id) const;

    ServiceConfig config_;
    std::map<std::string, DatasetEntry> images_;
    std::unique_ptr<AnnotationStore> store_;
    PredictorResolver resolver_;
    std::mutex cache_mutex_;
    std::map<std::string, std::shared_ptr<const SegmentationPredictor>> cache_;
    std::unique_ptr<Impl> impl_;
};

}  // namespace mammoseg
