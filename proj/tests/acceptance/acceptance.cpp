// Prints one PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <mammoseg/ingest.hpp>
#include <mammoseg/pipeline.hpp>
#include <mammoseg/service.hpp>
#include <mammoseg/testkit.hpp>

#include <doubles.hpp>
#include <fixtures.hpp>
#include <httplib.h>
#include <oracles.hpp>

#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

using namespace mammoseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Check {
    bool pass = true;
    std::ostringstream detail;

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) detail << "first failure: " << what << "; ";
            pass = false;
        }
    }
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ------------------------------------------------------------------ oracles

void oracle_suites(Check& c) {
    const auto start = Clock::now();
    Rng rng(2024);

    int iou_ok = 0;
    for (int t = 0; t < 200; ++t) {
        const BinaryMask a = fixtures::random_mask(rng, 16, 16, rng.uniform());
        const BinaryMask b = fixtures::random_mask(rng, 16, 16, rng.uniform());
        const std::vector<int> va(a.buffer().begin(), a.buffer().end()), vb(b.buffer().begin(), b.buffer().end());
        iou_ok += iou(a, b) == oracle::iou(va, vb);
    }
    c.expect(iou_ok == 200, "iou");

    int otsu_ok = 0;
    for (int t = 0; t < 50; ++t) {
        const int bins = 2 + static_cast<int>(rng.below(255));
        std::vector<std::int64_t> hist(bins, 0);
        std::vector<std::uint8_t> values{0, static_cast<std::uint8_t>(bins - 1)};
        hist[0]++;
        hist[bins - 1]++;
        const int n = 50 + static_cast<int>(rng.below(2000));
        const double m1 = rng.uniform(0, bins - 1), m2 = rng.uniform(0, bins - 1), s = rng.uniform(0.5, bins / 3.0);
        for (int k = 0; k < n; ++k) {
            const double centre = rng.uniform() < 0.5 ? m1 : m2;
            const int v = std::clamp(static_cast<int>(std::lround(centre + s * rng.normal())), 0, bins - 1);
            values.push_back(static_cast<std::uint8_t>(v));
            hist[v]++;
        }
        const ImageU8 img(static_cast<int>(values.size()), 1, values);
        otsu_ok += otsu_threshold(img, bins) == oracle::otsu_split(hist);
    }
    c.expect(otsu_ok == 50, "otsu");

    double pct_err = 0;
    for (int t = 0; t < 50; ++t) {
        const int n = 1 + static_cast<int>(rng.below(500));
        ImageU16 img(n, 1);
        std::vector<double> ref;
        for (auto& v : img.pixels()) {
            v = static_cast<std::uint16_t>(rng.below(4096));
            ref.push_back(v);
        }
        const double lo = rng.uniform(0, 50), hi = rng.uniform(50, 100);
        const ImageD got = percentile_normalize(img, lo, hi);
        const auto want = oracle::normalize(ref, lo, hi);
        for (int i = 0; i < n; ++i)
            pct_err = std::max(pct_err, std::abs(got.buffer()[i] - want[i]) / std::max(1.0, std::abs(want[i])));
    }
    c.expect(pct_err <= 1e-12, "percentile_normalize");

    int raster_ok = 0;
    for (int t = 0; t < 50; ++t) {
        const int w = 8 + static_cast<int>(rng.below(40)), h = 8 + static_cast<int>(rng.below(40));
        AnnotationSet a;
        a.image_id = "s";
        auto star = [&] {
            return fixtures::random_star(rng, rng.uniform(0, w), rng.uniform(0, h), 1, 0.6 * w,
                                         3 + static_cast<int>(rng.below(10)));
        };
        a.fatty = star();
        a.fibroglandular = star();
        a.pectoral = star();
        a.nipple = star();
        const LabelMap got = rasterize_annotations(a, w, h, 1e9);
        const auto want = oracle::rasterize(
            {{1, a.fatty}, {2, a.fibroglandular}, {3, *a.pectoral}, {4, a.nipple}}, w, h);
        bool same = true;
        for (std::size_t i = 0; i < want.size(); ++i) same = same && code(got.buffer()[i]) == want[i];
        raster_ok += same;
    }
    c.expect(raster_ok == 50, "rasterize_annotations");

    double clahe_err = 0;
    PreprocConfig cfg;
    cfg.clahe_kernel_fraction = 1.0;
    cfg.clahe_clip_limit = 1.0;
    for (int t = 0; t < 20; ++t) {
        ImageD img(16, 16);
        std::vector<double> v;
        for (auto& p : img.pixels()) {
            p = rng.uniform();
            v.push_back(p);
        }
        const ImageD got = clahe(img, cfg);
        const auto want = oracle::equalize(v, cfg.clahe_bins);
        for (std::size_t i = 0; i < v.size(); ++i) clahe_err = std::max(clahe_err, std::abs(got.buffer()[i] - want[i]));
    }
    c.expect(clahe_err <= 1.0 / 256, "clahe");

    const double elapsed = seconds_since(start);
    c.expect(elapsed < 60, "time budget");
    c.detail << "iou " << iou_ok << "/200, otsu " << otsu_ok << "/50, percentile max rel err " << pct_err
             << ", rasterize " << raster_ok << "/50, clahe max err " << clahe_err << ", " << fmt(elapsed, 1) << " s";
}

// ------------------------------------------------------------------ invariants

void structural_invariants(Check& c) {
    Rng rng(77);
    bool identity = true;
    for (int t = 0; t < 20; ++t) {
        LabelMap l(17, 11);
        for (auto& v : l.pixels()) v = static_cast<StructureClass>(rng.below(kNumClasses));
        identity = identity && argmax_labels(one_hot(l)) == l;
    }
    c.expect(identity, "one_hot/argmax identity");

    double worst_sum = 0;
    for (auto a : {Architecture::UNet, Architecture::FPN, Architecture::Linknet, Architecture::PSPNet}) {
        torch::manual_seed(1);
        auto m = build_model(default_spec(a, EncoderKind::SmallEncoder, 64));
        m->eval();
        torch::NoGradGuard g;
        const auto p = m->forward(torch::rand({2, 1, 64, 64}));
        worst_sum = std::max(worst_sum, (p.sum(1) - 1).abs().max().item<double>());
    }
    c.expect(worst_sum <= 1e-5, "softmax channel sums");

    bool involution = true;
    for (int t = 0; t < 20; ++t) {
        ImageU16 img(1 + static_cast<int>(rng.below(30)), 1 + static_cast<int>(rng.below(30)));
        for (auto& v : img.pixels()) v = static_cast<std::uint16_t>(rng.below(4096));
        involution = involution && flip_horizontal(flip_horizontal(img)) == img;
        const Polygon p = fixtures::random_star(rng, 10, 10, 1, 9, 7);
        const Polygon back = flip_polygon(flip_polygon(p, img.width()), img.width());
        for (std::size_t i = 0; i < p.size(); ++i)
            involution = involution && std::abs(back.vertices[i].x - p.vertices[i].x) <= 1e-12 &&
                         back.vertices[i].y == p.vertices[i].y;
    }
    c.expect(involution, "flip involution");

    bool split_ok = true;
    for (int t = 0; t < 100; ++t) {
        std::vector<SplitRecord> records;
        const int exams = 5 + static_cast<int>(rng.below(100));
        for (int e = 0; e < exams; ++e) {
            const auto d = static_cast<DensityClass>(rng.below(5));
            const int n = 1 + static_cast<int>(rng.below(4));
            for (int i = 0; i < n; ++i)
                records.push_back({std::to_string(e) + "_" + std::to_string(i), std::to_string(e),
                                   i % 2 ? View::CC : View::MLO, d});
        }
        const auto a = stratified_split(records, {0.66, 0.23, 0.11}, rng.next());
        std::map<std::string, std::set<Subset>> seen;
        for (const auto& r : records) seen[r.exam_id].insert(a.subset_of(r.exam_id));
        for (const auto& [exam, subsets] : seen) split_ok = split_ok && subsets.size() == 1;
        int total = 0;
        for (View v : {View::MLO, View::CC})
            for (Subset s : kAllSubsets) total += a.summary.total(v, s);
        split_ok = split_ok && total == static_cast<int>(records.size()) && a.exams.size() == seen.size();
    }
    c.expect(split_ok, "split disjointness and exam grouping");

    double worst_gap = 0;
    const double area = 64 * 64;
    for (int t = 0; t < 20; ++t) {
        const BinaryMask a = fixtures::random_mask(rng, 64, 64, rng.uniform(0.3, 0.7));
        const BinaryMask b = fixtures::random_mask(rng, 64, 64, rng.uniform(0.3, 0.7));
        auto planes = [](const BinaryMask& m) {
            auto t = torch::empty({1, 2, 64, 64}, torch::kFloat64);
            auto acc = t.accessor<double, 4>();
            for (int i = 0; i < 64 * 64; ++i) {
                acc[0][1][i / 64][i % 64] = m.buffer()[i];
                acc[0][0][i / 64][i % 64] = 1.0 - m.buffer()[i];
            }
            return t;
        };
        BinaryMask na = a, nb = b;
        for (auto& v : na.pixels()) v = 1 - v;
        for (auto& v : nb.pixels()) v = 1 - v;
        const double miou = (iou(a, b) + iou(na, nb)) / 2;
        worst_gap = std::max(worst_gap, std::abs(jaccard_loss(planes(a), planes(b)).item<double>() - (1 - miou)));
    }
    c.expect(worst_gap <= 2.0 / area, "jaccard vs 1 - IoU");
    c.detail << "softmax max |sum-1| " << worst_sum << ", jaccard gap " << worst_gap << " (bound " << 2.0 / area
             << "), 100 random splits";
}

// ------------------------------------------------------------------ gradient

void gradient_check(Check& c) {
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
    Rng rng(11);
    int checked = 0;
    double worst = 0;
    for (int k = 0; k < 400 && checked < 8; ++k) {
        torch::NoGradGuard g;
        const auto& p = params[rng.below(params.size())];
        const auto flat = p.view(-1);
        const auto i = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(flat.numel())));
        const double analytic = p.grad().view(-1)[i].item<double>();
        if (std::abs(analytic) < 1e-3) continue;
        const double h = 1e-5, orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double up = objective().item<double>();
        flat[i] = orig - h;
        const double down = objective().item<double>();
        flat[i] = orig;
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
        ++checked;
    }
    c.expect(checked >= 5, "enough sampled parameters");
    c.expect(worst <= 1e-2, "relative error");
    c.detail << checked << " parameters, max relative error " << worst;
}

// ------------------------------------------------------------------ round trip

void contour_round_trip(Check& c) {
    double worst = 1;
    int masks = 0;
    for (int k = 0; k < 20; ++k) {
        testkit::PhantomParams pp;
        pp.seed = 500 + k;
        pp.view = k % 2 ? View::CC : View::MLO;
        pp.laterality = k % 4 < 2 ? Laterality::R : Laterality::L;
        const auto ph = testkit::generate_phantom(pp);
        const LabelMap gt = rasterize_annotations(ph.annotation, pp.width, pp.height);
        const LabelMap back = fixtures::contour_round_trip(gt);
        for (auto cls : kAllClasses) {
            if (class_mask(gt, cls) == BinaryMask(pp.width, pp.height, 0)) continue;
            worst = std::min(worst, class_iou(back, gt, cls));
            ++masks;
        }
    }
    c.expect(masks >= 80, "enough structures");
    c.expect(worst >= 0.95, "IoU");
    c.detail << "20 phantoms, " << masks << " class masks, min IoU " << fmt(worst);
}

// ------------------------------------------------------------------ end to end

void end_to_end(Check& c) {
    const auto start = Clock::now();
    fixtures::TempDir dir("acceptance");
    const fs::path data = dir / "data";
    testkit::generate_corpus(100, testkit::CorpusParams{}, data);
    const auto entries = scan_dataset(data);
    const SplitAssignment split = stratified_split(split_records(entries), {0.66, 0.23, 0.11}, 42);

    std::map<View, TrainHistory> histories;
    for (View view : {View::MLO, View::CC}) {
        RunConfig run;
        run.model = default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 384);
        run.train.view = view;
        run.train.seed = 0;
        const auto t0 = Clock::now();
        auto outcome = train_run(entries, split, run, dir / ("run_" + std::string(to_string(view))));
        const TorchPredictor predictor(outcome.model, view, run.preprocess);
        const EvalReport report = evaluate_run(predictor, run, entries, split);
        const auto& h = outcome.history;
        const bool contract = h.epochs.size() - static_cast<std::size_t>(h.best_epoch) <=
                                  static_cast<std::size_t>(run.train.patience) + 1 ||
                              h.epochs.size() == static_cast<std::size_t>(run.train.max_epochs);
        c.expect(report.mean_all && *report.mean_all >= 0.80, std::string(to_string(view)) + " test mean IoU");
        c.expect(contract, std::string(to_string(view)) + " early-stopping contract");
        c.detail << to_string(view) << ": " << outcome.train_images << "/" << outcome.val_images << "/"
                 << report.per_image.size() << " images, " << h.epochs.size() << " epochs, best " << h.best_epoch
                 << ", test mean IoU " << (report.mean_all ? fmt(*report.mean_all) : "n/a") << " (structures "
                 << (report.mean_structures ? fmt(*report.mean_structures) : "n/a") << "), "
                 << fmt(seconds_since(t0), 0) << " s; ";
        histories[view] = h;
    }

    const double pipeline = seconds_since(start);
    c.expect(pipeline <= 1200, "wall time");
    c.detail << "synth to evaluation " << fmt(pipeline, 0) << " s; ";

    const auto rerun_start = Clock::now();
    RunConfig rerun;
    rerun.model = default_spec(Architecture::UNet, EncoderKind::SmallEncoder, 384);
    rerun.train.view = View::MLO;
    rerun.train.seed = 0;
    const auto again = train_run(entries, split, rerun, {});
    c.expect(again.history == histories[View::MLO], "rerun reproduces TrainHistory");
    c.detail << "MLO rerun identical: " << (again.history == histories[View::MLO] ? "yes" : "no") << " ("
             << fmt(seconds_since(rerun_start), 0) << " s)";
}

// ------------------------------------------------------------------ table

void table_shape(Check& c) {
    EvalReport r;
    r.name = "UNet";
    r.class_mean = {0.999, 0.98765, 0.5, 0.81234, 0.875};
    r.mean_all = 0.8123;
    const std::string md = render_report({r}, ReportFormat::markdown);
    const std::string want =
        "| Architecture | Nipple | Pectoral muscle | Fibro tissue | Fatty tissue | Mean |\n"
        "|---|---|---|---|---|---|\n"
        "| UNet | 0.88 | 0.81 | 0.50 | 0.99 | 0.81 |\n";
    c.expect(md == want, "markdown layout");
    const std::string csv = render_report({r}, ReportFormat::csv);
    c.expect(csv == "Architecture,Nipple,Pectoral muscle,Fibro tissue,Fatty tissue,Mean\nUNet,0.88,0.81,0.50,0.99,0.81\n",
             "csv layout");
    c.detail << "columns Nipple, Pectoral muscle, Fibro tissue, Fatty tissue, Mean; 2 decimals";
}

// ------------------------------------------------------------------ service

void service(Check& c) {
    fixtures::TempDir dir("acceptance-service");
    testkit::generate_corpus(4, testkit::CorpusParams{}, dir.path());
    ServiceConfig cfg;
    cfg.data_root = dir.path();
    cfg.runs_root = dir / "runs";
    cfg.port = 0;
    Service svc(cfg);
    const auto entries = scan_dataset(dir.path());

    std::map<View, std::shared_ptr<doubles::IdentityPredictor>> doubles_by_view;
    for (View v : {View::MLO, View::CC}) {
        doubles_by_view[v] = std::make_shared<doubles::IdentityPredictor>(v, cfg.preprocess);
        for (const auto& e : entries)
            if (e.meta.view == v) doubles_by_view[v]->add(make_sample(e, cfg.preprocess));
    }
    svc.set_predictor_resolver([&](const std::string& id) -> std::shared_ptr<const SegmentationPredictor> {
        if (id == "identity-mlo") return doubles_by_view[View::MLO];
        if (id == "identity-cc") return doubles_by_view[View::CC];
        return nullptr;
    });
    const int port = svc.start();

    int conflicts_ok = 0, images = 0;
    double worst_iou = 1;
    for (const auto& e : entries) {
        const std::string id = e.meta.image_id;
        httplib::Client client("127.0.0.1", port);
        json doc = json::parse(client.Get("/annotations/" + id)->body);
        doc.erase("warnings");
        const std::string body = doc.dump();
        std::array<int, 2> status{};
        std::thread t1([&] { status[0] = httplib::Client("127.0.0.1", port).Put("/annotations/" + id, body, "application/json")->status; });
        std::thread t2([&] { status[1] = httplib::Client("127.0.0.1", port).Put("/annotations/" + id, body, "application/json")->status; });
        t1.join();
        t2.join();
        std::sort(status.begin(), status.end());
        conflicts_ok += status == std::array<int, 2>{200, 409};
        ++images;

        const std::string run = e.meta.view == View::MLO ? "identity-mlo" : "identity-cc";
        const auto res = client.Post("/init/predict", json{{"image_id", id}, {"run_id", run}}.dump(), "application/json");
        if (!res || res->status != 200) {
            c.expect(false, "predict-init status for " + id);
            continue;
        }
        const json r = json::parse(res->body);
        AnnotationSet a;
        a.image_id = id;
        a.fatty = polygon_from_json(r["structures"]["fatty"], "fatty");
        a.fibroglandular = polygon_from_json(r["structures"]["fibroglandular"], "fibroglandular");
        a.nipple = polygon_from_json(r["structures"]["nipple"], "nipple");
        if (r["structures"].contains("pectoral")) a.pectoral = polygon_from_json(r["structures"]["pectoral"], "pectoral");
        const LabelMap got = rasterize_annotations(a, e.meta.width, e.meta.height);
        const LabelMap want = rasterize_annotations(*e.annotation, e.meta.width, e.meta.height);
        for (auto cls : kAllClasses) {
            if (class_mask(want, cls) == BinaryMask(e.meta.width, e.meta.height, 0)) continue;
            worst_iou = std::min(worst_iou, class_iou(got, want, cls));
        }
    }
    svc.stop();
    c.expect(conflicts_ok == images, "exactly one 409 per concurrent PUT pair");
    c.expect(worst_iou >= 0.95, "predict-init IoU");
    c.detail << conflicts_ok << "/" << images << " concurrent PUT pairs gave exactly one 409; predict-init min per-class IoU "
             << fmt(worst_iou);
}

}  // namespace

int main() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
    torch::set_num_threads(1);
    const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
        {"oracle-suites", oracle_suites},
        {"structural-invariants", structural_invariants},
        {"gradient-check", gradient_check},
        {"contour-round-trip", contour_round_trip},
        {"table-shape", table_shape},
        {"service", service},
        {"end-to-end-synthetic", end_to_end},
    };
    bool all = true;
    for (const auto& [name, fn] : criteria) {
        Check c;
        try {
            fn(c);
        } catch (const std::exception& e) {
            c.pass = false;
            c.detail << "exception: " << e.what();
        }
        all = all && c.pass;
        std::cout << (c.pass ? "PASS " : "FAIL ") << name << ": " << c.detail.str() << std::endl;
    }
    return all ? 0 : 1;
}
