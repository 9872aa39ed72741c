#pragma once

// JSON encoding of the core types. The annotation document layout is the
// interchange contract shared by the CLI, the service and the browser client.

#include <mammoseg/core.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace mammoseg {

using json = nlohmann::json;

inline json to_json(const Polygon& poly) {
    json arr = json::array();
    for (const auto& p : poly.vertices) arr.push_back({p.x, p.y});
    return arr;
}

inline Polygon polygon_from_json(const json& j, const std::string& field) {
    if (!j.is_array()) throw Error("core", "SchemaError", field + " must be a list of [x, y] pairs");
    Polygon poly;
    poly.vertices.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw Error("core", "SchemaError", field + " vertices must be [x, y] number pairs");
        poly.vertices.push_back({v[0].get<double>(), v[1].get<double>()});
    }
    return poly;
}

inline json to_json(const AnnotationSet& ann) {
    json s;
    s["fatty"] = to_json(ann.fatty);
    s["fibroglandular"] = to_json(ann.fibroglandular);
    s["pectoral"] = ann.pectoral ? to_json(*ann.pectoral) : json(nullptr);
    s["nipple"] = to_json(ann.nipple);
    return json{{"image_id", ann.image_id},
                {"exam_id", ann.exam_id},
                {"view", to_string(ann.view)},
                {"laterality", to_string(ann.laterality)},
                {"pixel_spacing_mm", ann.pixel_spacing_mm},
                {"density", to_string(ann.density)},
                {"version", ann.version},
                {"structures", s}};
}

namespace detail {

inline const json& require(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw Error("core", "SchemaError", std::string("missing key '") + key + "'");
    return *it;
}

template <class T>
T require_as(const json& j, const char* key) {
    const json& v = require(j, key);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw Error("core", "SchemaError", std::string("key '") + key + "' has the wrong type");
    }
}

}  // namespace detail

inline AnnotationSet annotation_from_json(const json& j) {
    if (!j.is_object()) throw Error("core", "SchemaError", "annotation document must be an object");
    AnnotationSet a;
    a.image_id = detail::require_as<std::string>(j, "image_id");
    a.exam_id = j.value("exam_id", a.image_id);
    a.view = parse_view(detail::require_as<std::string>(j, "view"));
    a.laterality = parse_laterality(detail::require_as<std::string>(j, "laterality"));
    a.pixel_spacing_mm = j.value("pixel_spacing_mm", 0.1);
    a.density = parse_density(j.value("density", std::string("ND")));
    a.version = detail::require_as<int>(j, "version");
    const json& s = detail::require(j, "structures");
    if (!s.is_object()) throw Error("core", "SchemaError", "structures must be an object");
    a.fatty = polygon_from_json(detail::require(s, "fatty"), "structures.fatty");
    a.fibroglandular = polygon_from_json(detail::require(s, "fibroglandular"), "structures.fibroglandular");
    a.nipple = polygon_from_json(detail::require(s, "nipple"), "structures.nipple");
    if (auto it = s.find("pectoral"); it != s.end() && !it->is_null())
        a.pectoral = polygon_from_json(*it, "structures.pectoral");
    return a;
}

inline json to_json(const ImageMeta& m) {
    return json{{"image_id", m.image_id},   {"exam_id", m.exam_id},
                {"view", to_string(m.view)}, {"laterality", to_string(m.laterality)},
                {"pixel_spacing_mm", m.pixel_spacing_mm}, {"width", m.width},
                {"height", m.height}};
}

inline json to_json(const std::vector<Violation>& violations) {
    json arr = json::array();
    for (const auto& v : violations) arr.push_back({{"field", v.field}, {"rule", v.rule}});
    return arr;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("io", "IoError", "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("io", "ParseError", path.string() + ": " + e.what());
    }
}

/// Write-then-rename so readers never observe a partially written document.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("io", "IoError", "cannot write " + tmp.string());
        out << text;
        out.flush();
        if (!out) throw Error("io", "IoError", "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    write_text_atomic(path, j.dump(2) + "\n");
}

inline AnnotationSet load_annotation(const std::filesystem::path& path) {
    return annotation_from_json(read_json_file(path));
}

inline void save_annotation(const std::filesystem::path& path, const AnnotationSet& ann) {
    write_json_file(path, to_json(ann));
}

}  // namespace mammoseg
