#include <mammoseg/core.hpp>
#include <mammoseg/serialization.hpp>

#include <fixtures.hpp>
#include <gtest/gtest.h>

using namespace mammoseg;

namespace {

ImageRecord small_record(int w, int h, std::uint16_t fill = 100) {
    ImageRecord r;
    r.meta = {"img", "exam", View::MLO, Laterality::R, 0.1, w, h};
    r.pixels = ImageU16(w, h, fill);
    return r;
}

Polygon square(double x0, double y0, double s) { return Polygon{{{x0, y0}, {x0 + s, y0}, {x0 + s, y0 + s}, {x0, y0 + s}}}; }

AnnotationSet valid_annotation(View view = View::MLO) {
    AnnotationSet a;
    a.image_id = "img";
    a.exam_id = "exam";
    a.view = view;
    a.fatty = square(0, 0, 50);
    a.fibroglandular = square(10, 10, 10);
    a.nipple = square(40, 20, 5);
    if (view == View::MLO) a.pectoral = Polygon{{{0, 0}, {20, 0}, {0, 30}}};
    return a;
}

bool has_field(const std::vector<Violation>& v, const std::string& field) {
    return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.field == field; });
}

}  // namespace

TEST(Image, BufferSizeMismatchThrows) {
    EXPECT_THROW(ImageU8(3, 3, std::vector<std::uint8_t>(8)), Error);
    EXPECT_NO_THROW(ImageU8(3, 3, std::vector<std::uint8_t>(9)));
}

TEST(Image, RowMajorAccess) {
    ImageU8 img(3, 2, 0);
    img.at(2, 1) = 7;
    EXPECT_EQ(img.buffer()[5], 7);
}

TEST(Enums, RoundTripAndRejectUnknown) {
    for (View v : {View::MLO, View::CC}) EXPECT_EQ(parse_view(to_string(v)), v);
    for (Laterality l : {Laterality::L, Laterality::R}) EXPECT_EQ(parse_laterality(to_string(l)), l);
    for (DensityClass d : kAllDensities) EXPECT_EQ(parse_density(to_string(d)), d);
    EXPECT_EQ(parse_density(""), DensityClass::ND);
    EXPECT_THROW(parse_view("LM"), Error);
    EXPECT_THROW(parse_density("E"), Error);
}

TEST(Enums, ClassCodesFollowRasterPriority) {
    EXPECT_EQ(code(StructureClass::background), 0);
    EXPECT_EQ(code(StructureClass::fatty), 1);
    EXPECT_EQ(code(StructureClass::fibroglandular), 2);
    EXPECT_EQ(code(StructureClass::pectoral), 3);
    EXPECT_EQ(code(StructureClass::nipple), 4);
    EXPECT_EQ(kAllDensities.size(), 5u);
}

TEST(ValidateRecord, AcceptsValid) { EXPECT_TRUE(validate_record(small_record(4, 4)).empty()); }

TEST(ValidateRecord, FlagsPixelAboveRange) {
    auto r = small_record(4, 4);
    r.pixels.at(1, 1) = 4096;
    const auto v = validate_record(r);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].field, "pixels");
}

TEST(ValidateRecord, FlagsNonPositiveSpacingAndShape) {
    auto r = small_record(4, 4);
    r.meta.pixel_spacing_mm = 0;
    EXPECT_TRUE(has_field(validate_record(r), "pixel_spacing_mm"));
    r = small_record(4, 4);
    r.meta.width = 5;
    EXPECT_FALSE(validate_record(r).empty());
}

TEST(ValidatePolygon, RejectsTwoVertices) {
    EXPECT_FALSE(validate_polygon(Polygon{{{0, 0}, {1, 1}}}, "p").empty());
}

TEST(ValidatePolygon, RejectsConsecutiveDuplicatesAndNonFinite) {
    EXPECT_FALSE(validate_polygon(Polygon{{{0, 0}, {1, 0}, {1, 0}, {0, 1}}}, "p").empty());
    EXPECT_FALSE(validate_polygon(Polygon{{{0, 0}, {1, 0}, {0, 1}, {0, 0}}}, "p").empty());
    EXPECT_FALSE(validate_polygon(Polygon{{{0, 0}, {NAN, 0}, {0, 1}}}, "p").empty());
}

TEST(ValidateAnnotation, MloRequiresPectoral) {
    auto a = valid_annotation(View::MLO);
    EXPECT_TRUE(validate_annotation(a).empty());
    a.pectoral.reset();
    EXPECT_TRUE(has_field(validate_annotation(a), "structures.pectoral"));
}

TEST(ValidateAnnotation, CcPectoralOptional) { EXPECT_TRUE(validate_annotation(valid_annotation(View::CC)).empty()); }

TEST(AnnotationWarnings, SelfIntersectionIsWarningNotViolation) {
    auto a = valid_annotation(View::CC);
    a.fibroglandular = Polygon{{{10, 10}, {20, 20}, {20, 10}, {10, 20}}};  // bow tie
    EXPECT_TRUE(validate_annotation(a).empty());
    EXPECT_TRUE(has_field(annotation_warnings(a), "structures.fibroglandular"));
}

TEST(Geometry, SignedAreaOfSquare) { EXPECT_DOUBLE_EQ(std::abs(signed_area(square(0, 0, 3))), 9.0); }

TEST(Geometry, ClampPolygonDropsDuplicates) {
    const Polygon p{{{-5, -5}, {-1, -3}, {10, 0}, {10, 10}}};
    const Polygon c = clamp_polygon(p, 8, 8);
    EXPECT_EQ(c.size(), 3u);
    for (const auto& v : c.vertices) {
        EXPECT_GE(v.x, 0);
        EXPECT_LE(v.x, 8);
    }
}

TEST(Serialization, AnnotationRoundTrip) {
    auto a = valid_annotation(View::MLO);
    a.density = DensityClass::C;
    a.version = 3;
    a.fatty.vertices[0] = {0.125, 1.0 / 3.0};
    EXPECT_EQ(annotation_from_json(to_json(a)), a);
    auto cc = valid_annotation(View::CC);
    const json j = to_json(cc);
    EXPECT_TRUE(j["structures"]["pectoral"].is_null());
    EXPECT_EQ(annotation_from_json(j), cc);
}

TEST(Serialization, SchemaErrors) {
    json j = to_json(valid_annotation());
    j["structures"].erase("nipple");
    EXPECT_THROW(annotation_from_json(j), Error);
    j = to_json(valid_annotation());
    j["view"] = "XX";
    EXPECT_THROW(annotation_from_json(j), Error);
    j = to_json(valid_annotation());
    j["structures"]["fatty"] = json::array({json::array({1, 2, 3})});
    try {
        annotation_from_json(j);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "core.SchemaError");
    }
}

TEST(Serialization, AtomicWriteAndRead) {
    fixtures::TempDir dir;
    const auto p = dir / "a.json";
    save_annotation(p, valid_annotation());
    EXPECT_EQ(load_annotation(p), valid_annotation());
    EXPECT_FALSE(std::filesystem::exists(p.string() + ".tmp"));
    EXPECT_THROW(read_json_file(dir / "missing.json"), Error);
}
