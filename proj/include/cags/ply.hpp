#pragma once

// Binary little-endian PLY storage for Gaussian scenes, plus the
// `<name>.meta.json` sidecar (feature dim, Gaussian count, format version,
// frozen-geometry flag).

#include "cags/binary_io.hpp"
#include "cags/scene.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <span>
#include <vector>

namespace cags {

inline constexpr const char* kSceneFormatVersion = "cags-ply-1";

inline std::string scene_sidecar_path(const std::string& ply_path) {
    std::filesystem::path p(ply_path);
    p.replace_extension();
    return p.string() + ".meta.json";
}

namespace detail {

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

inline std::size_t ply_type_size(PlyType t) {
    switch (t) {
        case PlyType::i8:
        case PlyType::u8: return 1;
        case PlyType::i16:
        case PlyType::u16: return 2;
        case PlyType::i32:
        case PlyType::u32:
        case PlyType::f32: return 4;
        case PlyType::f64: return 8;
    }
    return 0;
}

inline bool parse_ply_type(const std::string& s, PlyType& out) {
    static const std::map<std::string, PlyType> table = {
        {"char", PlyType::i8},    {"int8", PlyType::i8},     {"uchar", PlyType::u8},  {"uint8", PlyType::u8},
        {"short", PlyType::i16},  {"int16", PlyType::i16},   {"ushort", PlyType::u16}, {"uint16", PlyType::u16},
        {"int", PlyType::i32},    {"int32", PlyType::i32},   {"uint", PlyType::u32},  {"uint32", PlyType::u32},
        {"float", PlyType::f32},  {"float32", PlyType::f32}, {"double", PlyType::f64}, {"float64", PlyType::f64}};
    auto it = table.find(s);
    if (it == table.end()) return false;
    out = it->second;
    return true;
}

inline double read_as_double(const char* p, PlyType t) {
    switch (t) {
        case PlyType::i8: { std::int8_t v; std::memcpy(&v, p, 1); return v; }
        case PlyType::u8: { std::uint8_t v; std::memcpy(&v, p, 1); return v; }
        case PlyType::i16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::u16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::i32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
        case PlyType::u32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
        case PlyType::f32: { float v; std::memcpy(&v, p, 4); return v; }
        case PlyType::f64: { double v; std::memcpy(&v, p, 8); return v; }
    }
    return 0.0;
}

struct PlyProperty {
    std::string name;
    PlyType type;
    std::size_t offset;  // within one vertex record
};

struct PlyHeader {
    std::uint64_t vertex_count = 0;
    std::vector<PlyProperty> properties;
    std::size_t record_size = 0;
    std::size_t body_offset = 0;

    const PlyProperty* find(const std::string& name) const {
        for (const auto& p : properties)
            if (p.name == name) return &p;
        return nullptr;
    }
};

inline PlyHeader parse_ply_header(std::span<const char> bytes) {
    PlyHeader h;
    std::size_t pos = 0;
    bool saw_vertex = false;
    bool saw_format = false;
    int line_no = 0;
    auto next_line = [&](std::size_t& start) -> std::string {
        start = pos;
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        if (pos >= bytes.size()) throw ParseError("PLY header not terminated by end_header", bytes.size());
        std::string line(bytes.data() + start, pos - start);
        ++pos;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };
    for (;;) {
        std::size_t start = 0;
        const std::string line = next_line(start);
        ++line_no;
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (line_no == 1) {
            if (line != "ply") throw ParseError("missing 'ply' magic", start);
            continue;
        }
        if (word == "end_header") break;
        if (word == "comment" || word == "obj_info" || word.empty()) continue;
        if (word == "format") {
            std::string fmt, ver;
            ls >> fmt >> ver;
            if (fmt != "binary_little_endian") throw ParseError("unsupported PLY format '" + fmt + "'", start);
            saw_format = true;
        } else if (word == "element") {
            std::string name;
            std::uint64_t count = 0;
            if (!(ls >> name >> count)) throw ParseError("malformed element line", start);
            if (saw_vertex) throw ParseError("only a single 'vertex' element is supported", start);
            if (name != "vertex") throw ParseError("expected element 'vertex', found '" + name + "'", start);
            saw_vertex = true;
            h.vertex_count = count;
        } else if (word == "property") {
            if (!saw_vertex) throw ParseError("property before element declaration", start);
            std::string type, name;
            if (!(ls >> type >> name)) throw ParseError("malformed property line", start);
            if (type == "list") throw ParseError("list properties are not supported", start);
            PlyType t;
            if (!parse_ply_type(type, t)) throw ParseError("unknown property type '" + type + "'", start);
            h.properties.push_back({name, t, h.record_size});
            h.record_size += ply_type_size(t);
        } else {
            throw ParseError("unrecognized header keyword '" + word + "'", start);
        }
    }
    if (!saw_format) throw ParseError("missing format line", 0);
    if (!saw_vertex) throw ParseError("missing vertex element", pos);
    h.body_offset = pos;
    return h;
}

}  // namespace detail

inline void save_scene(const GaussianScene& scene, const std::string& path) {
    validate_scene(scene);
    const Index n = scene.size();
    const int d = scene.feature_dim();
    std::ostringstream hdr;
    hdr << "ply\nformat binary_little_endian 1.0\ncomment cags gaussian scene\n";
    hdr << "element vertex " << n << "\n";
    for (const char* name : {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                             "opacity", "red", "green", "blue"})
        hdr << "property double " << name << "\n";
    for (int j = 0; j < d; ++j) hdr << "property double f_" << j << "\n";
    if (scene.instance_labels) hdr << "property int instance\n";
    hdr << "end_header\n";

    io::ByteWriter w;
    w.put_bytes(hdr.str());
    for (Index i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a) w.put(scene.positions(i, a));
        for (int a = 0; a < 3; ++a) w.put(scene.scales(i, a));
        for (int a = 0; a < 4; ++a) w.put(scene.rotations(i, a));
        w.put(scene.opacities[i]);
        for (int a = 0; a < 3; ++a) w.put(scene.colors(i, a));
        for (int j = 0; j < d; ++j) w.put(scene.features(i, j));
        if (scene.instance_labels) w.put(static_cast<std::int32_t>((*scene.instance_labels)[static_cast<std::size_t>(i)]));
    }
    io::write_file(path, w.bytes());

    nlohmann::ordered_json meta;
    meta["format_version"] = kSceneFormatVersion;
    meta["N"] = n;
    meta["d"] = d;
    meta["geometry_frozen"] = scene.geometry_frozen;
    io::write_text(scene_sidecar_path(path), meta.dump(2) + "\n");
}

/// Parses a scene from in-memory PLY bytes. `meta` may be null (no sidecar).
inline GaussianScene parse_scene(std::span<const char> bytes, const nlohmann::json* meta, int default_feature_dim) {
    const detail::PlyHeader h = detail::parse_ply_header(bytes);

    std::vector<std::string> missing;
    auto need = [&](const std::string& name) -> const detail::PlyProperty* {
        const auto* p = h.find(name);
        if (!p) missing.push_back(name);
        return p;
    };
    const char* geometry_names[] = {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
                                    "rot_2", "rot_3", "opacity", "red", "green", "blue"};
    std::vector<const detail::PlyProperty*> geom;
    for (const char* name : geometry_names) geom.push_back(need(name));

    int d = 0;
    while (h.find("f_" + std::to_string(d))) ++d;
    const bool has_features = d > 0;
    if (meta && meta->contains("d")) {
        const int meta_d = (*meta)["d"].get<int>();
        if (has_features && meta_d != d)
            throw SchemaError("feature count mismatch: PLY has " + std::to_string(d) + " f_* properties, sidecar says d=" +
                              std::to_string(meta_d));
        if (!has_features) d = meta_d;
    }
    if (!has_features && !(meta && meta->contains("d"))) d = default_feature_dim;
    if (meta && meta->contains("N") && (*meta)["N"].get<std::uint64_t>() != h.vertex_count)
        throw SchemaError("Gaussian count mismatch between PLY and sidecar");
    if (!missing.empty()) throw SchemaError("PLY vertex element lacks required properties", missing);

    std::vector<const detail::PlyProperty*> feat;
    if (has_features)
        for (int j = 0; j < d; ++j) feat.push_back(h.find("f_" + std::to_string(j)));
    const auto* inst = h.find("instance");

    const std::uint64_t need_bytes = h.vertex_count * h.record_size;
    if (bytes.size() - h.body_offset < need_bytes)
        throw ParseError("PLY body truncated: expected " + std::to_string(need_bytes) + " bytes of vertex data",
                         bytes.size());

    const auto n = static_cast<Index>(h.vertex_count);
    GaussianScene s = GaussianScene::zeros(n, d);
    if (inst) s.instance_labels = std::vector<Index>(static_cast<std::size_t>(n));
    const double color_scale = geom[11]->type == detail::PlyType::u8 ? 1.0 / 255.0 : 1.0;
    for (Index i = 0; i < n; ++i) {
        const char* rec = bytes.data() + h.body_offset + static_cast<std::size_t>(i) * h.record_size;
        auto val = [&](const detail::PlyProperty* p) { return detail::read_as_double(rec + p->offset, p->type); };
        for (int a = 0; a < 3; ++a) s.positions(i, a) = val(geom[static_cast<std::size_t>(a)]);
        for (int a = 0; a < 3; ++a) s.scales(i, a) = val(geom[static_cast<std::size_t>(3 + a)]);
        for (int a = 0; a < 4; ++a) s.rotations(i, a) = val(geom[static_cast<std::size_t>(6 + a)]);
        s.opacities[i] = val(geom[10]);
        for (int a = 0; a < 3; ++a) s.colors(i, a) = val(geom[static_cast<std::size_t>(11 + a)]) * color_scale;
        for (int j = 0; j < static_cast<int>(feat.size()); ++j) s.features(i, j) = val(feat[static_cast<std::size_t>(j)]);
        if (inst) (*s.instance_labels)[static_cast<std::size_t>(i)] = static_cast<Index>(val(inst));
        // Leave already-unit quaternions untouched so save/load stays bit-exact.
        const double qn = s.rotations.row(i).norm();
        if (qn > 0.0 && std::abs(qn - 1.0) > 1e-12) s.rotations.row(i) /= qn;
    }
    if (meta && meta->contains("geometry_frozen")) s.geometry_frozen = (*meta)["geometry_frozen"].get<bool>();
    validate_scene(s);
    return s;
}

/// Loads a scene and its optional sidecar. Scenes without f_* properties get
/// zero features of dimension d (sidecar value, else `default_feature_dim`).
inline GaussianScene load_scene(const std::string& path, int default_feature_dim = kDefaultFeatureDim) {
    const auto bytes = io::read_file(path);
    nlohmann::json meta;
    const std::string side = scene_sidecar_path(path);
    const bool has_meta = std::filesystem::exists(side);
    if (has_meta) {
        try {
            meta = nlohmann::json::parse(io::read_text(side));
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(side + ": " + e.what(), e.byte);
        }
    }
    return parse_scene(bytes, has_meta ? &meta : nullptr, default_feature_dim);
}

}  // namespace cags
