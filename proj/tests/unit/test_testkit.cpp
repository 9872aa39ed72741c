#include <mammoseg/evaluation.hpp>
#include <mammoseg/ingest.hpp>
#include <mammoseg/testkit.hpp>

#include <fixtures.hpp>
#include <gtest/gtest.h>

using namespace mammoseg;

TEST(Phantom, DeterministicInSeed) {
    testkit::PhantomParams p;
    p.seed = 3;
    const auto a = testkit::generate_phantom(p), b = testkit::generate_phantom(p);
    EXPECT_EQ(a.record, b.record);
    EXPECT_EQ(a.annotation, b.annotation);
    p.seed = 4;
    EXPECT_FALSE(testkit::generate_phantom(p).record == a.record);
}

TEST(Phantom, RecordAndAnnotationAreValid) {
    for (View v : {View::MLO, View::CC})
        for (Laterality l : {Laterality::L, Laterality::R}) {
            testkit::PhantomParams p;
            p.view = v;
            p.laterality = l;
            const auto ph = testkit::generate_phantom(p);
            EXPECT_TRUE(validate_record(ph.record).empty());
            EXPECT_TRUE(validate_annotation(ph.annotation).empty());
            EXPECT_TRUE(annotation_warnings(ph.annotation).empty());
            if (v == View::MLO) EXPECT_TRUE(ph.annotation.pectoral.has_value());
        }
}

TEST(Phantom, AnnotationRasterAgreesWithExactTruth) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        testkit::PhantomParams p;
        p.seed = seed;
        p.laterality = seed % 2 ? Laterality::L : Laterality::R;
        p.view = seed % 3 ? View::MLO : View::CC;
        const auto ph = testkit::generate_phantom(p);
        const LabelMap r = rasterize_annotations(ph.annotation, p.width, p.height);
        for (auto c : kAllClasses) {
            if (class_mask(ph.truth, c) == BinaryMask(p.width, p.height, 0)) continue;
            EXPECT_GE(class_iou(r, ph.truth, c), 0.95) << "seed " << seed << " " << to_string(c);
        }
    }
}

TEST(Phantom, LeftIsMirrorOfRight) {
    testkit::PhantomParams p;
    p.noise_sigma = 0;
    const auto r = testkit::generate_phantom(p);
    p.laterality = Laterality::L;
    const auto l = testkit::generate_phantom(p);
    EXPECT_EQ(flip_horizontal(l.truth), r.truth);
    EXPECT_EQ(flip_horizontal(l.record.pixels), r.record.pixels);
}

TEST(Phantom, InvalidParamsRejected) {
    testkit::PhantomParams p;
    p.width = 10;
    EXPECT_THROW(testkit::generate_phantom(p), Error);
    p = {};
    p.intensity[0] = 5000;
    EXPECT_THROW(testkit::generate_phantom(p), Error);
}

TEST(Corpus, WritesFourImagesPerExam) {
    fixtures::TempDir dir;
    testkit::CorpusParams cp;
    cp.width = 64;
    cp.height = 80;
    const auto s = testkit::generate_corpus(8, cp, dir.path());
    EXPECT_EQ(s.exams, 8);
    EXPECT_EQ(s.images, 32);
    const auto entries = scan_dataset(dir.path());
    ASSERT_EQ(entries.size(), 32u);
    int mlo = 0;
    for (const auto& e : entries) {
        EXPECT_TRUE(e.annotated());
        mlo += e.meta.view == View::MLO;
        EXPECT_EQ(e.density, e.annotation->density);
    }
    EXPECT_EQ(mlo, 16);
    int total = 0;
    for (int n : s.density_exams) total += n;
    EXPECT_EQ(total, 8);
}
