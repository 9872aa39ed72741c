#include <mammoseg/ingest.hpp>
#include <mammoseg/serialization.hpp>

#include <gdcmAttribute.h>
#include <gdcmImageReader.h>
#include <gdcmImageWriter.h>
#include <gdcmReader.h>
#include <gdcmStringFilter.h>
#include <gdcmUIDGenerator.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cstring>
#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace mammoseg {

namespace {

const gdcm::Tag kViewPosition(0x0018, 0x5101);
const gdcm::Tag kImageLaterality(0x0020, 0x0062);
const gdcm::Tag kLaterality(0x0020, 0x0060);
const gdcm::Tag kPixelSpacing(0x0028, 0x0030);
const gdcm::Tag kImagerPixelSpacing(0x0018, 0x1164);
const gdcm::Tag kStudyInstanceUid(0x0020, 0x000D);
const gdcm::Tag kAccessionNumber(0x0008, 0x0050);
const gdcm::Tag kPixelData(0x7FE0, 0x0010);

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c) && c != '\0'; };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

Error missing(const std::string& field) { return Error("ingest", "MissingMetadata", field); }

std::string dicom_string(const gdcm::File& file, const gdcm::Tag& tag) {
    const gdcm::DataSet& ds = file.GetDataSet();
    if (!ds.FindDataElement(tag) || ds.GetDataElement(tag).IsEmpty()) return {};
    gdcm::StringFilter sf;
    sf.SetFile(file);
    return trim(sf.ToString(tag));
}

// Standard tags: View Position (0018,5101), Image Laterality (0020,0062) with
// Laterality (0020,0060) as fallback, Pixel Spacing (0028,0030) or Imager
// Pixel Spacing (0018,1164). The exam is the accession number, else the
// study instance UID.
ImageMeta dicom_meta(const gdcm::File& file, const fs::path& path) {
    ImageMeta m;
    m.image_id = path.stem().string();
    std::string exam = dicom_string(file, kAccessionNumber);
    if (exam.empty()) exam = dicom_string(file, kStudyInstanceUid);
    m.exam_id = exam.empty() ? m.image_id : exam;

    const std::string view = dicom_string(file, kViewPosition);
    if (view.empty()) throw missing("view");
    try {
        m.view = parse_view(view);
    } catch (const Error&) {
        throw Error("ingest", "UnsupportedView", "view position '" + view + "' is neither MLO nor CC");
    }
    std::string lat = dicom_string(file, kImageLaterality);
    if (lat.empty()) lat = dicom_string(file, kLaterality);
    if (lat.empty()) throw missing("laterality");
    m.laterality = parse_laterality(lat);

    std::string spacing = dicom_string(file, kPixelSpacing);
    if (spacing.empty()) spacing = dicom_string(file, kImagerPixelSpacing);
    if (spacing.empty()) throw missing("pixel_spacing_mm");
    try {
        m.pixel_spacing_mm = std::stod(spacing.substr(0, spacing.find('\\')));
    } catch (const std::exception&) {
        throw Error("ingest", "CorruptMetadata", "unparsable pixel spacing '" + spacing + "'");
    }
    return m;
}

ImageRecord load_dicom(const fs::path& path) {
    gdcm::ImageReader reader;
    reader.SetFileName(path.string().c_str());
    if (!reader.Read()) throw Error("ingest", "CorruptPixelData", "cannot decode DICOM " + path.string());
    ImageRecord rec;
    rec.meta = dicom_meta(reader.GetFile(), path);
    const gdcm::Image& img = reader.GetImage();
    const gdcm::PixelFormat& pf = img.GetPixelFormat();
    if (pf.GetSamplesPerPixel() != 1 || img.GetNumberOfDimensions() < 2)
        throw Error("ingest", "CorruptPixelData", "expected single-channel 2-D pixel data");
    const int w = static_cast<int>(img.GetDimension(0));
    const int h = static_cast<int>(img.GetDimension(1));
    std::vector<char> buf(img.GetBufferLength());
    if (!img.GetBuffer(buf.data())) throw Error("ingest", "CorruptPixelData", "pixel buffer unreadable");

    const std::size_t n = static_cast<std::size_t>(w) * h;
    std::vector<std::int64_t> values(n);
    switch (pf.GetScalarType()) {
        case gdcm::PixelFormat::UINT8:
            if (buf.size() < n) throw Error("ingest", "CorruptPixelData", "pixel buffer too short");
            for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<unsigned char>(buf[i]);
            break;
        case gdcm::PixelFormat::UINT16:
        case gdcm::PixelFormat::INT16: {
            if (buf.size() < 2 * n) throw Error("ingest", "CorruptPixelData", "pixel buffer too short");
            const bool is_signed = pf.GetScalarType() == gdcm::PixelFormat::INT16;
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t u;
                std::memcpy(&u, buf.data() + 2 * i, 2);
                values[i] = is_signed ? static_cast<std::int16_t>(u) : u;
            }
            break;
        }
        default:
            throw Error("ingest", "CorruptPixelData", "unsupported pixel scalar type");
    }
    if (img.GetPhotometricInterpretation() == gdcm::PhotometricInterpretation::MONOCHROME1) {
        const std::int64_t top = (std::int64_t{1} << pf.GetBitsStored()) - 1;
        for (auto& v : values) v = top - v;
    }
    rec.pixels = ImageU16(w, h, 0);
    auto dst = rec.pixels.pixels();
    for (std::size_t i = 0; i < n; ++i) {
        if (values[i] < 0 || values[i] > kMaxPixelValue)
            throw Error("ingest", "ValueRangeError",
                        path.string() + ": pixel value " + std::to_string(values[i]) + " outside [0, 4095]");
        dst[i] = static_cast<std::uint16_t>(values[i]);
    }
    rec.meta.width = w;
    rec.meta.height = h;
    return rec;
}

ImageMeta load_dicom_meta(const fs::path& path) {
    gdcm::Reader reader;
    reader.SetFileName(path.string().c_str());
    if (!reader.ReadUpToTag(kPixelData)) throw Error("ingest", "CorruptPixelData", "cannot parse DICOM " + path.string());
    ImageMeta m = dicom_meta(reader.GetFile(), path);
    const gdcm::DataSet& ds = reader.GetFile().GetDataSet();
    gdcm::Attribute<0x0028, 0x0010> rows{};
    gdcm::Attribute<0x0028, 0x0011> cols{};
    if (!ds.FindDataElement(rows.GetTag()) || !ds.FindDataElement(cols.GetTag()))
        throw Error("ingest", "CorruptPixelData", "missing image dimensions");
    rows.SetFromDataElement(ds.GetDataElement(rows.GetTag()));
    cols.SetFromDataElement(ds.GetDataElement(cols.GetTag()));
    m.height = rows.GetValue();
    m.width = cols.GetValue();
    return m;
}

fs::path sidecar_path(const fs::path& png) {
    fs::path p = png;
    p.replace_extension(".json");
    return p;
}

ImageMeta sidecar_meta(const fs::path& png) {
    const fs::path sc = sidecar_path(png);
    if (!fs::exists(sc)) throw missing("sidecar " + sc.filename().string());
    const json j = read_json_file(sc);
    ImageMeta m;
    m.image_id = j.value("image_id", png.stem().string());
    m.exam_id = j.value("exam_id", m.image_id);
    for (const char* key : {"view", "laterality", "pixel_spacing_mm"})
        if (!j.contains(key) || j[key].is_null()) throw missing(key);
    try {
        m.view = parse_view(j["view"].get<std::string>());
        m.laterality = parse_laterality(j["laterality"].get<std::string>());
        m.pixel_spacing_mm = j["pixel_spacing_mm"].get<double>();
    } catch (const json::exception& e) {
        throw Error("ingest", "CorruptMetadata", sc.string() + ": " + e.what());
    }
    return m;
}

// Width/height from the IHDR chunk without decoding the image.
std::pair<int, int> png_dimensions(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::array<unsigned char, 24> head{};
    if (!in.read(reinterpret_cast<char*>(head.data()), head.size()))
        throw Error("ingest", "CorruptPixelData", "truncated PNG " + path.string());
    static constexpr std::array<unsigned char, 8> kSig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    if (!std::equal(kSig.begin(), kSig.end(), head.begin()))
        throw Error("ingest", "CorruptPixelData", "not a PNG file " + path.string());
    auto be32 = [&](int off) {
        return static_cast<int>((head[off] << 24) | (head[off + 1] << 16) | (head[off + 2] << 8) | head[off + 3]);
    };
    return {be32(16), be32(20)};
}

ImageRecord load_png(const fs::path& path) {
    ImageRecord rec;
    rec.meta = sidecar_meta(path);
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw Error("ingest", "CorruptPixelData", "cannot decode PNG " + path.string());
    if (m.channels() != 1) throw Error("ingest", "CorruptPixelData", "expected a grayscale PNG");
    if (m.depth() == CV_8U) m.convertTo(m, CV_16U);
    if (m.depth() != CV_16U) throw Error("ingest", "CorruptPixelData", "expected 8- or 16-bit samples");
    rec.pixels = ImageU16(m.cols, m.rows, 0);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<std::uint16_t>(y);
        for (int x = 0; x < m.cols; ++x) {
            if (row[x] > kMaxPixelValue)
                throw Error("ingest", "ValueRangeError",
                            path.string() + ": pixel value " + std::to_string(row[x]) + " outside [0, 4095]");
            rec.pixels.at(x, y) = row[x];
        }
    }
    rec.meta.width = m.cols;
    rec.meta.height = m.rows;
    return rec;
}

template <class T>
cv::Mat as_mat(const Image<T>& img, int type) {
    return cv::Mat(img.height(), img.width(), type, const_cast<T*>(img.buffer().data()));
}

void write_mat(const fs::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) throw Error("io", "IoError", "cannot write " + path.string());
}

}  // namespace

SourceFormat parse_source_format(std::string_view s) {
    if (s == "dicom" || s == "dcm" || s == "DICOM") return SourceFormat::DICOM;
    if (s == "png" || s == "png16" || s == "PNG16") return SourceFormat::PNG16;
    throw Error("ingest", "InvalidFormat", "unknown format '" + std::string(s) + "'");
}

SourceFormat detect_format(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".dcm" || ext == ".dicom") return SourceFormat::DICOM;
    if (ext == ".png") return SourceFormat::PNG16;
    std::ifstream in(path, std::ios::binary);
    std::array<char, 132> head{};
    if (in.read(head.data(), head.size()) && std::string_view(head.data() + 128, 4) == "DICM") return SourceFormat::DICOM;
    throw Error("ingest", "InvalidFormat", "cannot determine format of " + path.string());
}

ImageRecord load_record(const StudySource& source) {
    if (!fs::exists(source.path)) throw Error("ingest", "IoError", "no such file " + source.path.string());
    const SourceFormat f = source.format.value_or(detect_format(source.path));
    ImageRecord rec = f == SourceFormat::DICOM ? load_dicom(source.path) : load_png(source.path);
    if (auto v = validate_record(rec); !v.empty()) {
        const std::string kind = v.front().rule.find("4095") != std::string::npos ? "ValueRangeError" : "InvalidRecord";
        throw Error("ingest", kind, v.front().field + ": " + v.front().rule);
    }
    return rec;
}

ImageMeta load_meta(const StudySource& source) {
    if (!fs::exists(source.path)) throw Error("ingest", "IoError", "no such file " + source.path.string());
    const SourceFormat f = source.format.value_or(detect_format(source.path));
    if (f == SourceFormat::DICOM) return load_dicom_meta(source.path);
    ImageMeta m = sidecar_meta(source.path);
    std::tie(m.width, m.height) = png_dimensions(source.path);
    return m;
}

std::vector<std::pair<std::string, DensityClass>> read_density_csv(const fs::path& path) {
    std::vector<std::pair<std::string, DensityClass>> rows;
    std::ifstream in(path);
    if (!in) throw Error("ingest", "IoError", "cannot open " + path.string());
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error("ingest", "CorruptMetadata", "density.csv line without a comma");
        std::string id = trim(line.substr(0, comma));
        std::string d = trim(line.substr(comma + 1));
        if (first && id == "image_id") {
            first = false;
            continue;
        }
        first = false;
        rows.emplace_back(std::move(id), parse_density(d));
    }
    return rows;
}

void write_density_csv(const fs::path& path, const std::vector<std::pair<std::string, DensityClass>>& rows) {
    std::string text = "image_id,density\n";
    for (const auto& [id, d] : rows) text += id + "," + std::string(to_string(d)) + "\n";
    write_text_atomic(path, text);
}

std::vector<DatasetEntry> scan_dataset(const fs::path& root, std::optional<SourceFormat> forced) {
    std::vector<DatasetEntry> out;
    const fs::path images = root / "images";
    if (!fs::exists(images)) return out;

    std::map<std::string, DensityClass> density;
    if (fs::exists(root / "density.csv"))
        for (auto& [id, d] : read_density_csv(root / "density.csv")) density[id] = d;

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".dcm" || ext == ".dicom") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());

    std::set<std::string> seen;
    for (const auto& f : files) {
        DatasetEntry entry;
        entry.format = forced.value_or(detect_format(f));
        entry.meta = load_meta({f, entry.format});
        entry.image_path = f;
        if (!seen.insert(entry.meta.image_id).second)
            throw Error("ingest", "DuplicateImageId", entry.meta.image_id);
        if (auto it = density.find(entry.meta.image_id); it != density.end()) entry.density = it->second;
        const fs::path ann = root / "annotations" / (entry.meta.image_id + ".json");
        if (fs::exists(ann)) entry.annotation = load_annotation(ann);
        out.push_back(std::move(entry));
    }
    std::sort(out.begin(), out.end(), [](const DatasetEntry& a, const DatasetEntry& b) {
        return std::tie(a.meta.exam_id, a.meta.image_id) < std::tie(b.meta.exam_id, b.meta.image_id);
    });
    return out;
}

void write_png_record(const ImageRecord& record, const fs::path& png_path) {
    write_png(png_path, record.pixels);
    json side = to_json(record.meta);
    write_json_file(sidecar_path(png_path), side);
}

void write_dicom_record(const ImageRecord& record, const fs::path& dcm_path, bool monochrome1) {
    if (dcm_path.has_parent_path()) fs::create_directories(dcm_path.parent_path());
    gdcm::ImageWriter writer;
    gdcm::Image& img = writer.GetImage();
    img.SetNumberOfDimensions(2);
    img.SetDimension(0, static_cast<unsigned int>(record.pixels.width()));
    img.SetDimension(1, static_cast<unsigned int>(record.pixels.height()));
    img.SetPixelFormat(gdcm::PixelFormat(1, 16, 12, 11, 0));
    img.SetPhotometricInterpretation(monochrome1 ? gdcm::PhotometricInterpretation::MONOCHROME1
                                                 : gdcm::PhotometricInterpretation::MONOCHROME2);
    std::vector<std::uint16_t> px(record.pixels.pixels().begin(), record.pixels.pixels().end());
    if (monochrome1)
        for (auto& v : px) v = static_cast<std::uint16_t>(kMaxPixelValue - v);
    gdcm::DataElement pixel_data(kPixelData);
    pixel_data.SetByteValue(reinterpret_cast<const char*>(px.data()), static_cast<std::uint32_t>(px.size() * 2));
    img.SetDataElement(pixel_data);

    gdcm::File& file = writer.GetFile();
    gdcm::DataSet& ds = file.GetDataSet();
    auto put = [&ds](const gdcm::Tag& tag, const gdcm::VR& vr, std::string value) {
        if (value.size() % 2) value.push_back(' ');
        gdcm::DataElement de(tag);
        de.SetVR(vr);
        de.SetByteValue(value.data(), static_cast<std::uint32_t>(value.size()));
        ds.Replace(de);
    };
    put(gdcm::Tag(0x0008, 0x0016), gdcm::VR::UI, "1.2.840.10008.5.1.4.1.1.1.2");  // digital mammography
    put(gdcm::Tag(0x0008, 0x0060), gdcm::VR::CS, "MG");
    put(kViewPosition, gdcm::VR::CS, std::string(to_string(record.meta.view)));
    put(kImageLaterality, gdcm::VR::CS, std::string(to_string(record.meta.laterality)));
    std::ostringstream sp;
    sp << record.meta.pixel_spacing_mm << "\\" << record.meta.pixel_spacing_mm;
    put(kPixelSpacing, gdcm::VR::DS, sp.str());
    put(kAccessionNumber, gdcm::VR::SH, record.meta.exam_id.substr(0, 16));
    put(gdcm::Tag(0x0010, 0x0020), gdcm::VR::LO, record.meta.exam_id.substr(0, 64));
    writer.SetFileName(dcm_path.string().c_str());
    if (!writer.Write()) throw Error("io", "IoError", "cannot write DICOM " + dcm_path.string());
}

ImageU16 read_png16(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty() || m.channels() != 1) throw Error("io", "CorruptPixelData", "cannot decode " + path.string());
    if (m.depth() != CV_16U) m.convertTo(m, CV_16U);
    ImageU16 out(m.cols, m.rows, 0);
    for (int y = 0; y < m.rows; ++y) std::memcpy(&out.at(0, y), m.ptr<std::uint16_t>(y), m.cols * 2);
    return out;
}

ImageU8 read_png8(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty() || m.channels() != 1 || m.depth() != CV_8U)
        throw Error("io", "CorruptPixelData", "cannot decode 8-bit grayscale " + path.string());
    ImageU8 out(m.cols, m.rows, 0);
    for (int y = 0; y < m.rows; ++y) std::memcpy(&out.at(0, y), m.ptr<std::uint8_t>(y), m.cols);
    return out;
}

LabelMap read_label_png(const fs::path& path) {
    const ImageU8 raw = read_png8(path);
    LabelMap out(raw.width(), raw.height(), StructureClass::background);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw.buffer()[i] >= kNumClasses) throw Error("io", "CorruptPixelData", "label code out of range in " + path.string());
        out.buffer()[i] = static_cast<StructureClass>(raw.buffer()[i]);
    }
    return out;
}

void write_png(const fs::path& path, const ImageU16& img) { write_mat(path, as_mat(img, CV_16UC1)); }
void write_png(const fs::path& path, const ImageU8& img) { write_mat(path, as_mat(img, CV_8UC1)); }
void write_png(const fs::path& path, const LabelMap& labels) {
    static_assert(sizeof(StructureClass) == 1);
    write_mat(path, as_mat(labels, CV_8UC1));
}
void write_png(const fs::path& path, const Image<Rgb>& img) {
    static_assert(sizeof(Rgb) == 3);
    cv::Mat bgr(img.height(), img.width(), CV_8UC3);
    for (int y = 0; y < img.height(); ++y) {
        auto* row = bgr.ptr<std::uint8_t>(y);
        for (int x = 0; x < img.width(); ++x) {
            const Rgb& p = img.at(x, y);
            row[3 * x] = p.b;
            row[3 * x + 1] = p.g;
            row[3 * x + 2] = p.r;
        }
    }
    write_mat(path, bgr);
}

std::vector<unsigned char> encode_png(const ImageU16& img) {
    std::vector<unsigned char> out;
    cv::imencode(".png", as_mat(img, CV_16UC1), out);
    return out;
}

std::vector<unsigned char> encode_png(const ImageU8& img) {
    std::vector<unsigned char> out;
    cv::imencode(".png", as_mat(img, CV_8UC1), out);
    return out;
}

}  // namespace mammoseg
