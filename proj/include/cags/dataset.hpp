#pragma once

// On-disk dataset: a manifest JSON binding the scene PLY, cameras JSON,
// per-view 16-bit PGM mask rasters with their embedding/provenance JSON,
// and the category embeddings that double as text queries.

#include "cags/image_io.hpp"
#include "cags/ply.hpp"
#include "cags/synthetic.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace cags {

inline constexpr const char* kDatasetFormatVersion = "cags-dataset-1";

/// A required input file is absent.
class MissingInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require_file(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) throw MissingInputError(what + " not found: " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
    const std::string text = io::read_text(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what(), e.byte);
    }
}

inline void write_json_file(const std::string& path, const nlohmann::ordered_json& j) { io::write_text(path, j.dump(2) + "\n"); }

namespace detail {

inline nlohmann::ordered_json matrix_rows(const RowMatrix& m) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
    return a;
}

inline RowMatrix rows_matrix(const nlohmann::json& a, const std::string& what, Eigen::Index cols_hint = -1) {
    if (!a.is_array()) throw SchemaError(what + ": expected an array of rows");
    const auto rows = static_cast<Eigen::Index>(a.size());
    const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(a[0].size()) : std::max<Eigen::Index>(cols_hint, 0);
    RowMatrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = a[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw SchemaError(what + ": ragged rows");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

inline std::string view_stem(std::size_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu", v);
    return buf;
}

}  // namespace detail

inline nlohmann::ordered_json cameras_to_json(const std::vector<Camera>& cams) {
    nlohmann::ordered_json j;
    j["cameras"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const auto& c = cams[i];
        const Eigen::Matrix4d p = c.pose();
        nlohmann::ordered_json pose = nlohmann::ordered_json::array();
        for (int r = 0; r < 4; ++r) pose.push_back({p(r, 0), p(r, 1), p(r, 2), p(r, 3)});
        j["cameras"].push_back({{"id", i},
                                {"width", c.width},
                                {"height", c.height},
                                {"fx", c.fx},
                                {"fy", c.fy},
                                {"cx", c.cx},
                                {"cy", c.cy},
                                {"near", c.near_plane},
                                {"world_to_camera", pose}});
    }
    return j;
}

inline std::vector<Camera> cameras_from_json(const nlohmann::json& j) {
    std::vector<Camera> out;
    try {
        for (const auto& e : j.at("cameras")) {
            Camera c;
            c.width = e.at("width").get<int>();
            c.height = e.at("height").get<int>();
            c.fx = e.at("fx").get<double>();
            c.fy = e.at("fy").get<double>();
            c.cx = e.at("cx").get<double>();
            c.cy = e.at("cy").get<double>();
            c.near_plane = e.value("near", c.near_plane);
            const auto& p = e.at("world_to_camera");
            if (p.size() != 4) throw SchemaError("cameras: world_to_camera must be 4x4");
            for (int r = 0; r < 3; ++r) {
                if (p[static_cast<std::size_t>(r)].size() != 4) throw SchemaError("cameras: world_to_camera must be 4x4");
                for (int k = 0; k < 3; ++k) c.rotation(r, k) = p[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)].get<double>();
                c.translation[r] = p[static_cast<std::size_t>(r)][3].get<double>();
            }
            c.validate();
            out.push_back(c);
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("cameras: ") + e.what());
    }
    return out;
}

inline nlohmann::ordered_json mask_view_to_json(const MaskView& v) {
    nlohmann::ordered_json j;
    j["camera"] = v.camera_id;
    j["width"] = v.width;
    j["height"] = v.height;
    j["num_masks"] = v.num_masks();
    j["embeddings"] = detail::matrix_rows(v.embeddings);
    j["mask_object"] = v.mask_object;
    j["members"] = v.members;
    j["perturbed_objects"] = v.perturbed_objects;
    j["visible_objects"] = v.visible_objects;
    return j;
}

inline MaskView mask_view_from_json(const nlohmann::json& j, const io::Image16& raster) {
    MaskView v;
    try {
        v.camera_id = j.at("camera").get<int>();
        v.width = j.at("width").get<int>();
        v.height = j.at("height").get<int>();
        v.embeddings = detail::rows_matrix(j.at("embeddings"), "mask embeddings");
        v.mask_object = j.value("mask_object", std::vector<Index>{});
        v.members = j.value("members", std::vector<std::vector<Index>>{});
        v.perturbed_objects = j.value("perturbed_objects", std::vector<Index>{});
        v.visible_objects = j.value("visible_objects", std::vector<Index>{});
        if (j.at("num_masks").get<int>() != v.embeddings.rows()) throw SchemaError("mask view: num_masks differs from embedding rows");
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("mask view: ") + e.what());
    }
    if (raster.width != v.width || raster.height != v.height) throw SchemaError("mask view: raster size differs from its JSON");
    v.raster = raster.pixels;
    for (auto id : v.raster)
        if (id > v.embeddings.rows()) throw SchemaError("mask view: raster uses a mask id without an embedding");
    if (v.mask_object.size() != static_cast<std::size_t>(v.embeddings.rows())) v.mask_object.assign(static_cast<std::size_t>(v.embeddings.rows()), -1);
    return v;
}

/// Writes a dataset under `dir`; returns the manifest path.
inline std::string save_dataset(const SyntheticDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "masks");
    save_scene(ds.scene, (fs::path(dir) / "scene.ply").string());
    write_json_file((fs::path(dir) / "cameras.json").string(), cameras_to_json(ds.cameras));
    nlohmann::ordered_json cat;
    cat["language_dim"] = ds.category_embeddings.cols();
    cat["embeddings"] = detail::matrix_rows(ds.category_embeddings);
    cat["object_categories"] = ds.object_categories;
    write_json_file((fs::path(dir) / "categories.json").string(), cat);

    nlohmann::ordered_json man;
    man["format_version"] = kDatasetFormatVersion;
    man["scene"] = "scene.ply";
    man["cameras"] = "cameras.json";
    man["categories"] = "categories.json";
    man["views"] = nlohmann::ordered_json::array();
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        const auto& mv = ds.views[v];
        const std::string stem = "masks/" + detail::view_stem(v);
        io::Image16 img{mv.width, mv.height, mv.raster};
        io::write_pgm16((fs::path(dir) / (stem + ".pgm")).string(), img);
        write_json_file((fs::path(dir) / (stem + ".json")).string(), mask_view_to_json(mv));
        man["views"].push_back({{"camera", mv.camera_id}, {"masks", stem + ".pgm"}, {"embeddings", stem + ".json"}});
    }
    const std::string path = (fs::path(dir) / "manifest.json").string();
    write_json_file(path, man);
    return path;
}

/// Paths of every file a manifest references, manifest first.
inline std::vector<std::string> dataset_files(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const nlohmann::json man = read_json_file(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<std::string> files{manifest_path};
    auto add = [&](const std::string& rel) { files.push_back((base / rel).string()); };
    add(man.at("scene").get<std::string>());
    add(scene_sidecar_path(man.at("scene").get<std::string>()));
    add(man.at("cameras").get<std::string>());
    add(man.at("categories").get<std::string>());
    for (const auto& v : man.at("views")) {
        add(v.at("masks").get<std::string>());
        add(v.at("embeddings").get<std::string>());
    }
    return files;
}

inline SyntheticDataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    require_file(manifest_path, "dataset manifest");
    const nlohmann::json man = read_json_file(manifest_path);
    std::vector<std::string> missing;
    for (const char* key : {"format_version", "scene", "cameras", "categories", "views"})
        if (!man.contains(key)) missing.emplace_back(key);
    if (!missing.empty()) throw SchemaError("dataset manifest lacks required fields", missing);
    if (man["format_version"] != kDatasetFormatVersion)
        throw SchemaError("dataset manifest: unsupported format_version " + man["format_version"].dump());
    const fs::path base = fs::path(manifest_path).parent_path();
    auto path_of = [&](const nlohmann::json& rel, const char* what) {
        if (!rel.is_string()) throw SchemaError(std::string("dataset manifest: ") + what + " must be a path string");
        const std::string p = (base / rel.get<std::string>()).string();
        require_file(p, what);
        return p;
    };
    SyntheticDataset ds;
    ds.scene = load_scene(path_of(man["scene"], "scene PLY"));
    ds.cameras = cameras_from_json(read_json_file(path_of(man["cameras"], "cameras file")));
    const nlohmann::json cat = read_json_file(path_of(man["categories"], "categories file"));
    try {
        ds.category_embeddings = detail::rows_matrix(cat.at("embeddings"), "category embeddings");
        ds.object_categories = cat.at("object_categories").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("categories: ") + e.what());
    }
    for (const auto& v : man["views"]) {
        if (!v.contains("masks") || !v.contains("embeddings")) throw SchemaError("dataset manifest: view entry needs masks and embeddings");
        const io::Image16 raster = io::read_pgm16(path_of(v["masks"], "mask raster"));
        MaskView mv = mask_view_from_json(read_json_file(path_of(v["embeddings"], "mask embeddings")), raster);
        if (mv.camera_id < 0 || mv.camera_id >= static_cast<int>(ds.cameras.size()))
            throw SchemaError("dataset manifest: view references camera " + std::to_string(mv.camera_id) + " which does not exist");
        if (ds.cameras[static_cast<std::size_t>(mv.camera_id)].width != mv.width ||
            ds.cameras[static_cast<std::size_t>(mv.camera_id)].height != mv.height)
            throw SchemaError("dataset manifest: mask raster size differs from its camera");
        ds.views.push_back(std::move(mv));
    }
    return ds;
}

}  // namespace cags
