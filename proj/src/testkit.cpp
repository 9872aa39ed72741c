#include <mammoseg/ingest.hpp>
#include <mammoseg/serialization.hpp>
#include <mammoseg/testkit.hpp>

#include <cstdio>

namespace fs = std::filesystem;

namespace mammoseg::testkit {

CorpusSummary generate_corpus(int n_exams, const CorpusParams& params, const fs::path& out_dir) {
    if (n_exams < 1) throw Error("testkit", "InvalidParams", "need at least one exam");
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    fs::create_directories(out_dir / "annotations", ec);
    if (ec) throw Error("testkit", "IoError", "cannot create " + out_dir.string() + ": " + ec.message());

    Rng rng(params.seed);
    struct Exam {
        std::string id;
        double fibro_scale;
        bool nd;
    };
    std::vector<Exam> exams;
    for (int e = 0; e < n_exams; ++e) {
        char id[32];
        std::snprintf(id, sizeof id, "E%04d", e + 1);
        const double scale = rng.uniform(0.7, 1.3);
        exams.push_back({id, scale, rng.uniform() < params.nd_fraction});
    }
    // quartile boundaries of the fibroglandular scale
    std::vector<double> scales;
    for (const auto& e : exams) scales.push_back(e.fibro_scale);
    std::sort(scales.begin(), scales.end());
    auto density_of = [&](double s) {
        const auto rank = static_cast<std::size_t>(std::lower_bound(scales.begin(), scales.end(), s) - scales.begin());
        const int q = static_cast<int>(4 * rank / scales.size());
        return static_cast<DensityClass>(std::min(q, 3));
    };

    CorpusSummary summary;
    std::vector<std::pair<std::string, DensityClass>> density_rows;
    for (std::size_t e = 0; e < exams.size(); ++e) {
        const auto& exam = exams[e];
        const DensityClass density = exam.nd ? DensityClass::ND : density_of(exam.fibro_scale);
        summary.density_exams[static_cast<int>(density)]++;
        int k = 0;
        for (Laterality lat : {Laterality::R, Laterality::L}) {
            for (View view : {View::MLO, View::CC}) {
                PhantomParams p;
                p.seed = params.seed * 1000003ULL + e * 4 + static_cast<std::uint64_t>(k++);
                p.exam_id = exam.id;
                p.image_id = exam.id + "_" + std::string(to_string(lat)) + "_" + std::string(to_string(view));
                p.width = params.width;
                p.height = params.height;
                p.view = view;
                p.laterality = lat;
                p.noise_sigma = params.noise_sigma;
                p.cc_pectoral_probability = params.cc_pectoral_probability;
                p.fibro_scale = exam.fibro_scale;
                const Phantom ph = generate_phantom(p);
                AnnotationSet ann = ph.annotation;
                ann.density = density;
                if (params.dicom)
                    write_dicom_record(ph.record, out_dir / "images" / (p.image_id + ".dcm"));
                else
                    write_png_record(ph.record, out_dir / "images" / (p.image_id + ".png"));
                save_annotation(out_dir / "annotations" / (p.image_id + ".json"), ann);
                density_rows.emplace_back(p.image_id, density);
                summary.images++;
            }
        }
        summary.exams++;
    }
    write_density_csv(out_dir / "density.csv", density_rows);
    return summary;
}

}  // namespace mammoseg::testkit
