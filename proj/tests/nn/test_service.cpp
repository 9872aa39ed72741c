#include <mammoseg/service.hpp>
#include <mammoseg/testkit.hpp>

#include <doubles.hpp>
#include <fixtures.hpp>
#include <gtest/gtest.h>
#include <httplib.h>

#include <fstream>
#include <thread>

using namespace mammoseg;

namespace {

struct Corpus {
    fixtures::TempDir dir{"service"};
    Corpus() {
        testkit::generate_corpus(3, testkit::CorpusParams{}, dir.path());
    }
};

ServiceConfig config_for(const std::filesystem::path& root) {
    ServiceConfig c;
    c.data_root = root;
    c.runs_root = root / "runs";
    c.port = 0;
    return c;
}

AnnotationSet from_structures(const json& body) {
    AnnotationSet a;
    a.image_id = body["image_id"];
    a.view = parse_view(body["view"].get<std::string>());
    a.laterality = parse_laterality(body["laterality"].get<std::string>());
    const auto& s = body["structures"];
    a.fatty = polygon_from_json(s["fatty"], "fatty");
    a.fibroglandular = polygon_from_json(s["fibroglandular"], "fibroglandular");
    a.nipple = polygon_from_json(s["nipple"], "nipple");
    if (s.contains("pectoral")) a.pectoral = polygon_from_json(s["pectoral"], "pectoral");
    return a;
}

std::shared_ptr<doubles::IdentityPredictor> identity_for(const std::vector<DatasetEntry>& entries, View view,
                                                         const PreprocConfig& cfg) {
    auto p = std::make_shared<doubles::IdentityPredictor>(view, cfg);
    for (const auto& e : entries)
        if (e.meta.view == view && e.annotated()) p->add(make_sample(e, cfg));
    return p;
}

}  // namespace

TEST(Store, VersionedPutAndConflict) {
    fixtures::TempDir dir;
    AnnotationStore store(dir / "ann", dir / "edits.jsonl");
    AnnotationSet a;
    a.image_id = "x";
    a.fatty = a.fibroglandular = a.nipple = Polygon{{{0, 0}, {4, 0}, {0, 4}}};
    EXPECT_FALSE(store.get("x"));
    auto r = store.put(a);
    ASSERT_EQ(r.status, AnnotationStore::PutStatus::ok);
    EXPECT_EQ(r.stored.version, 1);
    EXPECT_EQ(store.get("x")->version, 1);
    r = store.put(a);
    EXPECT_EQ(r.status, AnnotationStore::PutStatus::conflict);
    EXPECT_EQ(r.current_version, 1);
    a.version = 1;
    EXPECT_EQ(store.put(a).stored.version, 2);
    a.nipple.vertices.pop_back();
    EXPECT_EQ(store.put(a).status, AnnotationStore::PutStatus::invalid);
}

TEST(Store, ReplayIgnoresTornTailAndRecoverRollsForward) {
    fixtures::TempDir dir;
    AnnotationSet a;
    a.image_id = "x";
    a.fatty = a.fibroglandular = a.nipple = Polygon{{{0, 0}, {4, 0}, {0, 4}}};
    {
        AnnotationStore store(dir / "ann", dir / "edits.jsonl");
        store.put(a);
        a.version = 1;
        store.put(a);
    }
    std::ofstream(dir / "edits.jsonl", std::ios::app) << "{\"image_id\":\"x\",\"vers";
    const auto state = AnnotationStore::replay(dir / "edits.jsonl");
    ASSERT_EQ(state.size(), 1u);
    EXPECT_EQ(state.at("x").version, 2);

    // per-image file lags behind the log, as after a crash between append and rename
    a.version = 1;
    save_annotation(dir / "ann" / "x.json", a);
    AnnotationStore store(dir / "ann", dir / "edits.jsonl");
    EXPECT_EQ(store.recover(), 1);
    EXPECT_EQ(store.get("x")->version, 2);

    std::ofstream(dir / "bad.jsonl") << "garbage\n{}\n";
    EXPECT_THROW(AnnotationStore::replay(dir / "bad.jsonl"), Error);
}

TEST(Service, HandlersAndErrorCodes) {
    Corpus c;
    Service svc(config_for(c.dir.path()));
    const auto list = svc.list_images().body;
    ASSERT_EQ(list.size(), 12u);
    EXPECT_TRUE(list[0]["annotated"].get<bool>());
    const std::string id = list[0]["image_id"];

    const Reply img = svc.get_image(id, "display");
    EXPECT_EQ(img.status, 200);
    EXPECT_EQ(img.content_type, "image/png");
    EXPECT_EQ(img.bytes.substr(1, 3), "PNG");
    EXPECT_EQ(img.headers.at("X-Width"), "320");
    EXPECT_EQ(svc.get_image(id, "weird").status, 400);
    EXPECT_EQ(svc.get_image("nope", "raw").status, 404);

    Reply ann = svc.get_annotation(id);
    ASSERT_EQ(ann.status, 200);
    EXPECT_EQ(ann.body["version"], 1);
    EXPECT_EQ(svc.get_annotation("nope").status, 404);

    json doc = ann.body;
    doc.erase("warnings");
    EXPECT_EQ(svc.put_annotation(id, doc.dump()).status, 200);
    EXPECT_EQ(svc.get_annotation(id).body["version"], 2);
    const Reply stale = svc.put_annotation(id, doc.dump());
    EXPECT_EQ(stale.status, 409);
    EXPECT_EQ(stale.body["current_version"], 2);

    json wrong = svc.get_annotation(id).body;
    wrong.erase("warnings");
    wrong["structures"]["nipple"] = json::array({json::array({1, 1}), json::array({1e5, 1})});
    EXPECT_EQ(svc.put_annotation(id, wrong.dump()).status, 422);
    wrong = doc;
    wrong["version"] = 2;
    wrong["laterality"] = wrong["laterality"] == "L" ? "R" : "L";
    EXPECT_EQ(svc.put_annotation(id, wrong.dump()).status, 422);
    wrong = doc;
    wrong["version"] = 2;
    wrong["structures"]["fatty"] = json::array({json::array({0, 0}), json::array({5000, 0}), json::array({0, 9})});
    EXPECT_EQ(svc.put_annotation(id, wrong.dump()).status, 422);
    EXPECT_EQ(svc.put_annotation(id, "{not json").status, 422);
    EXPECT_EQ(svc.put_annotation("nope", doc.dump()).status, 404);

    const Reply contour = svc.init_breast_contour(json{{"image_id", id}}.dump());
    EXPECT_EQ(contour.status, 200);
    EXPECT_EQ(contour.body["provenance"], "otsu");
    EXPECT_GE(contour.body["polygon"].size(), 3u);
    EXPECT_EQ(svc.init_breast_contour(json{{"image_id", "nope"}}.dump()).status, 404);
    EXPECT_EQ(svc.classes().body.size(), 5u);
}

TEST(Service, PredictInitRoundTripWithIdentityDouble) {
    Corpus c;
    const auto cfg = config_for(c.dir.path());
    Service svc(cfg);
    const auto entries = scan_dataset(c.dir.path());
    std::map<std::string, std::shared_ptr<const SegmentationPredictor>> runs{
        {"mlo", identity_for(entries, View::MLO, cfg.preprocess)},
        {"cc", identity_for(entries, View::CC, cfg.preprocess)}};
    svc.set_predictor_resolver([&](const std::string& id) -> std::shared_ptr<const SegmentationPredictor> {
        const auto it = runs.find(id);
        return it == runs.end() ? nullptr : it->second;
    });
    for (const auto& e : entries) {
        const std::string run = e.meta.view == View::MLO ? "mlo" : "cc";
        const Reply r = svc.init_predict(json{{"image_id", e.meta.image_id}, {"run_id", run}}.dump());
        ASSERT_EQ(r.status, 200) << r.body.dump();
        EXPECT_EQ(r.body["provenance"], "model");
        EXPECT_EQ(r.body["structures"].contains("pectoral"), e.annotation->pectoral.has_value());
        const LabelMap got = rasterize_annotations(from_structures(r.body), e.meta.width, e.meta.height);
        const LabelMap want = rasterize_annotations(*e.annotation, e.meta.width, e.meta.height);
        for (auto cls : kAllClasses) {
            if (class_mask(want, cls) == BinaryMask(e.meta.width, e.meta.height, 0)) continue;
            EXPECT_GE(class_iou(got, want, cls), 0.95) << e.meta.image_id << " " << to_string(cls);
        }
    }
    const std::string mlo_id = entries[0].meta.view == View::MLO ? entries[0].meta.image_id : entries[1].meta.image_id;
    EXPECT_EQ(svc.init_predict(json{{"image_id", mlo_id}, {"run_id", "cc"}}.dump()).status, 409);
    EXPECT_EQ(svc.init_predict(json{{"image_id", mlo_id}, {"run_id", "none"}}.dump()).status, 404);
    EXPECT_EQ(svc.init_predict(json{{"image_id", "nope"}, {"run_id", "mlo"}}.dump()).status, 404);
}

TEST(Service, UnknownRunDirectoryIs404) {
    Corpus c;
    Service svc(config_for(c.dir.path()));
    const std::string id = svc.list_images().body[0]["image_id"];
    EXPECT_EQ(svc.init_predict(json{{"image_id", id}, {"run_id", "missing"}}.dump()).status, 404);
    EXPECT_EQ(svc.init_predict(json{{"image_id", id}, {"run_id", "../x"}}.dump()).status, 404);
}

TEST(Http, ConcurrentPutsYieldExactlyOneConflict) {
    Corpus c;
    Service svc(config_for(c.dir.path()));
    const int port = svc.start();
    httplib::Client client("127.0.0.1", port);
    auto res = client.Get("/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const json images = json::parse(client.Get("/images")->body);
    for (const auto& img : images) {
        const std::string id = img["image_id"];
        json doc = json::parse(client.Get("/annotations/" + id)->body);
        doc.erase("warnings");
        const std::string body = doc.dump();
        std::array<int, 2> status{};
        std::vector<std::thread> threads;
        for (int k = 0; k < 2; ++k)
            threads.emplace_back([&, k] {
                httplib::Client cl("127.0.0.1", port);
                auto r = cl.Put("/annotations/" + id, body, "application/json");
                status[k] = r ? r->status : -1;
            });
        for (auto& t : threads) t.join();
        std::sort(status.begin(), status.end());
        EXPECT_EQ(status, (std::array<int, 2>{200, 409})) << id;
        EXPECT_EQ(json::parse(client.Get("/annotations/" + id)->body)["version"], 2);
    }
    res = client.Get("/images/" + images[0]["image_id"].get<std::string>() + "?variant=raw");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(res->get_header_value("X-Variant"), "raw");
    res = client.Post("/init/predict", json{{"image_id", "nope"}, {"run_id", "x"}}.dump(), "application/json");
    EXPECT_EQ(res->status, 404);
    EXPECT_EQ(json::parse(res->body)["error"], "service.NotFound");
    res = client.Post("/init/breast-contour", "{}", "application/json");
    EXPECT_EQ(res->status, 422);
    svc.stop();
}

TEST(Http, EditLogRecordsEveryAcceptedPut) {
    Corpus c;
    {
        Service svc(config_for(c.dir.path()));
        const std::string id = svc.list_images().body[0]["image_id"];
        json doc = svc.get_annotation(id).body;
        doc.erase("warnings");
        for (int v = 1; v <= 3; ++v) {
            doc["version"] = v;
            ASSERT_EQ(svc.put_annotation(id, doc.dump()).status, 200);
        }
    }
    const auto state = AnnotationStore::replay(c.dir.path() / "edits.jsonl");
    ASSERT_EQ(state.size(), 1u);
    EXPECT_EQ(state.begin()->second.version, 4);
}
