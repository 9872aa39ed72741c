#pragma once

#include <mammoseg/core.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace mammoseg {

enum class SourceFormat { DICOM, PNG16 };

struct StudySource {
    std::filesystem::path path;
    std::optional<SourceFormat> format;  // auto-detected when empty
};

SourceFormat parse_source_format(std::string_view s);

/// Extension first (.dcm / .png), then the DICM preamble magic.
SourceFormat detect_format(const std::filesystem::path& path);

/// Errors: ingest.MissingMetadata (names the field), ingest.CorruptPixelData,
/// ingest.ValueRangeError, ingest.IoError.
ImageRecord load_record(const StudySource& source);

/// Metadata only; pixel data is not decoded.
ImageMeta load_meta(const StudySource& source);

struct DatasetEntry {
    ImageMeta meta;
    std::filesystem::path image_path;
    SourceFormat format = SourceFormat::PNG16;
    std::optional<AnnotationSet> annotation;
    DensityClass density = DensityClass::ND;

    bool annotated() const { return annotation.has_value(); }
};

/// root/images/*.png|*.dcm, root/annotations/<image_id>.json, root/density.csv.
/// Sorted by (exam_id, image_id). Errors: ingest.DuplicateImageId.
std::vector<DatasetEntry> scan_dataset(const std::filesystem::path& root,
                                       std::optional<SourceFormat> forced = std::nullopt);

std::vector<std::pair<std::string, DensityClass>> read_density_csv(const std::filesystem::path& path);
void write_density_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, DensityClass>>& rows);

// Portable format: 16-bit grayscale PNG plus <stem>.json sidecar.
void write_png_record(const ImageRecord& record, const std::filesystem::path& png_path);
void write_dicom_record(const ImageRecord& record, const std::filesystem::path& dcm_path, bool monochrome1 = false);

ImageU16 read_png16(const std::filesystem::path& path);
ImageU8 read_png8(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU16& img);
void write_png(const std::filesystem::path& path, const ImageU8& img);
void write_png(const std::filesystem::path& path, const LabelMap& labels);
void write_png(const std::filesystem::path& path, const Image<Rgb>& img);
LabelMap read_label_png(const std::filesystem::path& path);
std::vector<unsigned char> encode_png(const ImageU16& img);
std::vector<unsigned char> encode_png(const ImageU8& img);

}  // namespace mammoseg
