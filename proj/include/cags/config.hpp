#pragma once

// Run configuration: one JSON document whose optional sections configure
// each pipeline stage. Validation collects every offending field before
// failing, so a single run reports all problems at once.
//
// {
//   "seed": 0,
//   "dataset": {"num_objects", "gaussians_per_object", "placement_radius", "blob_sigma",
//               "gaussian_scale", "categories", "feature_dim", "feature_noise", "color_noise",
//               "ground_gaussians", "num_views", "view_distance", "image_width", "image_height",
//               "focal", "elevation_low_deg", "elevation_high_deg", "granularity_p",
//               "perturb_mode" ("mixed"|"split"|"merge"), "language_dim"},
//   "graph":   {"ratio", "k", "start_index", "cell_multiple"},
//   "net":     {"num_layers", "hidden", "final_relu"},
//   "train":   {"iterations", "feature_lr", "net_lr", "momentum", "temperature",
//               "loss" ("per-mask"|"per-pixel"|"per-mask+cohesion"|"per-pixel+cohesion"),
//               "cohesion_weight", "views_per_iteration", "pixel_samples",
//               "include_self_in_denominator"},
//   "cluster": {"min_cluster_size", "min_samples", "allow_single_cluster"},   (0 = derived default)
//   "match":   {"min_score"},
//   "query":   {"mode"}                               ("argmax" | "threshold:<t>")
//   "bench":   {"seeds": [..], "cells": [{"name", "granularity_p", "num_layers", "loss"}],
//               "rendered_metric", "parallel_cells"}
// }

#include "cags/eval.hpp"

#include <json.hpp>

#include <functional>
#include <set>
#include <string>
#include <vector>

namespace cags {

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    PrecomputeOptions graph;
    int num_layers = 2;
    int hidden = kHiddenWidth;
    bool final_relu = true;
    TrainConfig train;
    HdbscanParams cluster;
    MatchParams match;
    std::string query_mode = "argmax";
    std::vector<std::uint64_t> bench_seeds{0, 1, 2, 3, 4};
    std::vector<BenchCell> bench_cells = standard_cells();
    bool rendered_metric = true;
    bool parallel_cells = true;

    BenchmarkConfig benchmark() const {
        BenchmarkConfig b;
        b.dataset = dataset;
        b.seeds = bench_seeds;
        b.cells = bench_cells;
        b.graph = graph;
        b.hidden = hidden;
        b.final_relu = final_relu;
        b.train = train;
        b.cluster = cluster;
        b.match = match;
        b.query_mode = query_mode;
        b.rendered_metric = rendered_metric;
        b.parallel_cells = parallel_cells;
        return b;
    }
};

inline const char* to_string(PerturbMode m) {
    switch (m) {
        case PerturbMode::mixed: return "mixed";
        case PerturbMode::split_only: return "split";
        case PerturbMode::merge_only: return "merge";
    }
    return "?";
}

namespace detail {

/// Walks one JSON object, recording type/range problems and unknown keys.
class SchemaReader {
public:
    SchemaReader(const nlohmann::json* obj, std::string path, std::vector<std::string>& issues)
        : obj_(obj), path_(std::move(path)), issues_(issues) {
        if (obj_ && !obj_->is_object()) {
            issues_.push_back(where() + ": expected an object");
            obj_ = nullptr;
        }
    }
    ~SchemaReader() = default;
    SchemaReader(const SchemaReader&) = delete;
    SchemaReader& operator=(const SchemaReader&) = delete;

    template <class T>
    void field(const char* key, T& out, const std::function<const char*(const T&)>& check = {}) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return;
        const auto& v = (*obj_)[key];
        const std::string p = child(key);
        if (!type_ok<T>(v)) {
            issues_.push_back(p + ": expected " + type_name<T>());
            return;
        }
        T value = v.get<T>();
        if (check) {
            if (const char* msg = check(value)) {
                issues_.push_back(p + ": " + msg);
                return;
            }
        }
        out = std::move(value);
    }

    const nlohmann::json* section(const char* key) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return nullptr;
        return &(*obj_)[key];
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() {
        if (!obj_) return;
        for (auto it = obj_->begin(); it != obj_->end(); ++it)
            if (!seen_.count(it.key())) issues_.push_back(child(it.key()) + ": unknown field");
    }

private:
    template <class T>
    static bool type_ok(const nlohmann::json& v) {
        if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
        else if constexpr (std::is_same_v<T, std::uint64_t>) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
        else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
        else if constexpr (std::is_floating_point_v<T>) return v.is_number();
        else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
        else if constexpr (std::is_same_v<T, std::vector<int>>) {
            if (!v.is_array()) return false;
            for (const auto& e : v)
                if (!e.is_number_integer()) return false;
            return true;
        } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
            if (!v.is_array()) return false;
            for (const auto& e : v)
                if (!(e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0))) return false;
            return true;
        }
        return false;
    }
    template <class T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_same_v<T, std::uint64_t>) return "a non-negative integer";
        else if constexpr (std::is_integral_v<T>) return "an integer";
        else if constexpr (std::is_floating_point_v<T>) return "a number";
        else if constexpr (std::is_same_v<T, std::string>) return "a string";
        else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) return "an array of non-negative integers";
        else return "an array of integers";
    }
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    const nlohmann::json* obj_;
    std::string path_;
    std::vector<std::string>& issues_;
    std::set<std::string> seen_;
};

template <class T>
std::function<const char*(const T&)> at_least(T lo, const char* msg) {
    return [lo, msg](const T& v) -> const char* { return v >= lo ? nullptr : msg; };
}
template <class T>
std::function<const char*(const T&)> positive(const char* msg) {
    return [msg](const T& v) -> const char* { return v > T(0) ? nullptr : msg; };
}
inline std::function<const char*(const double&)> unit_interval(const char* msg) {
    return [msg](const double& v) -> const char* { return (v >= 0.0 && v <= 1.0) ? nullptr : msg; };
}

inline const char* check_loss(const std::string& s) {
    try {
        loss_variant_from_string(s);
        return nullptr;
    } catch (const InvalidArgument&) {
        return "must be one of per-mask, per-pixel, per-mask+cohesion, per-pixel+cohesion";
    }
}

inline const char* check_query_mode(const std::string& s) {
    try {
        QueryMode::parse(s);
        return nullptr;
    } catch (const InvalidArgument&) {
        return "must be 'argmax' or 'threshold:<t>'";
    }
}

}  // namespace detail

/// Parses and validates a run configuration. Throws SchemaError listing
/// every problem found.
inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::SchemaReader;
    std::vector<std::string> issues;
    RunConfig c;
    SchemaReader root(&j, "", issues);
    root.field<std::uint64_t>("seed", c.seed);

    {
        SchemaReader r(root.section("dataset"), "dataset", issues);
        auto& s = c.dataset.scene;
        auto& v = c.dataset.views;
        r.field<int>("num_objects", s.num_objects, detail::at_least(1, "must be >= 1"));
        r.field<int>("gaussians_per_object", s.gaussians_per_object, detail::at_least(1, "must be >= 1"));
        r.field<double>("placement_radius", s.placement_radius, detail::at_least(0.0, "must be >= 0"));
        r.field<double>("blob_sigma", s.blob_sigma, detail::positive<double>("must be > 0"));
        r.field<double>("gaussian_scale", s.gaussian_scale, detail::positive<double>("must be > 0"));
        r.field<std::vector<int>>("categories", s.categories, [](const std::vector<int>& cats) -> const char* {
            for (int x : cats)
                if (x < 0) return "category ids must be >= 0";
            return nullptr;
        });
        r.field<int>("feature_dim", s.feature_dim, detail::at_least(1, "must be >= 1"));
        r.field<double>("feature_noise", s.feature_noise, detail::at_least(0.0, "must be >= 0"));
        r.field<double>("color_noise", s.color_noise, detail::at_least(0.0, "must be >= 0"));
        r.field<int>("ground_gaussians", s.ground_gaussians, detail::at_least(0, "must be >= 0"));
        r.field<int>("num_views", v.count, detail::at_least(1, "must be >= 1"));
        r.field<double>("view_distance", v.distance, detail::positive<double>("must be > 0"));
        r.field<int>("image_width", v.width, detail::at_least(1, "must be >= 1"));
        r.field<int>("image_height", v.height, detail::at_least(1, "must be >= 1"));
        r.field<double>("focal", v.focal, detail::positive<double>("must be > 0"));
        r.field<double>("elevation_low_deg", v.elevation_low_deg);
        r.field<double>("elevation_high_deg", v.elevation_high_deg);
        r.field<double>("granularity_p", c.dataset.granularity_p, detail::unit_interval("must be in [0,1]"));
        std::string mode = to_string(c.dataset.perturb_mode);
        r.field<std::string>("perturb_mode", mode, [](const std::string& m) -> const char* {
            return (m == "mixed" || m == "split" || m == "merge") ? nullptr : "must be mixed, split or merge";
        });
        c.dataset.perturb_mode = mode == "split" ? PerturbMode::split_only : mode == "merge" ? PerturbMode::merge_only : PerturbMode::mixed;
        r.field<int>("language_dim", c.dataset.language_dim, detail::at_least(8, "must be >= 8"));
        r.finish();
        if (!s.categories.empty() && static_cast<int>(s.categories.size()) != s.num_objects)
            issues.push_back("dataset.categories: must list one id per object");
    }
    {
        SchemaReader r(root.section("graph"), "graph", issues);
        r.field<double>("ratio", c.graph.ratio, [](const double& x) -> const char* {
            return (x > 0.0 && x <= 1.0) ? nullptr : "must be in (0,1]";
        });
        r.field<int>("k", c.graph.k, detail::at_least(1, "must be >= 1"));
        r.field<Index>("start_index", c.graph.start_index, detail::at_least(Index{0}, "must be >= 0"));
        r.field<double>("cell_multiple", c.graph.cell_multiple, detail::positive<double>("must be > 0"));
        r.finish();
    }
    {
        SchemaReader r(root.section("net"), "net", issues);
        r.field<int>("num_layers", c.num_layers, detail::at_least(0, "must be >= 0"));
        r.field<int>("hidden", c.hidden, detail::at_least(1, "must be >= 1"));
        r.field<bool>("final_relu", c.final_relu);
        r.finish();
    }
    {
        SchemaReader r(root.section("train"), "train", issues);
        auto& t = c.train;
        r.field<int>("iterations", t.iterations, detail::at_least(0, "must be >= 0"));
        r.field<double>("feature_lr", t.feature_lr, detail::at_least(0.0, "must be >= 0"));
        r.field<double>("net_lr", t.net_lr, detail::at_least(0.0, "must be >= 0"));
        r.field<double>("momentum", t.momentum, [](const double& m) -> const char* {
            return (m >= 0.0 && m < 1.0) ? nullptr : "must be in [0,1)";
        });
        r.field<double>("temperature", t.temperature, detail::positive<double>("must be > 0"));
        std::string loss = to_string(t.loss);
        r.field<std::string>("loss", loss, detail::check_loss);
        if (!detail::check_loss(loss)) t.loss = loss_variant_from_string(loss);
        r.field<double>("cohesion_weight", t.cohesion_weight, detail::at_least(0.0, "must be >= 0"));
        r.field<int>("views_per_iteration", t.views_per_iteration, detail::at_least(1, "must be >= 1"));
        r.field<int>("pixel_samples", t.pixel_samples, detail::at_least(1, "must be >= 1"));
        r.field<bool>("include_self_in_denominator", t.include_self_in_denominator);
        r.finish();
    }
    {
        SchemaReader r(root.section("cluster"), "cluster", issues);
        r.field<int>("min_cluster_size", c.cluster.min_cluster_size, [](const int& v) -> const char* {
            return (v == 0 || v >= 2) ? nullptr : "must be 0 (default) or >= 2";
        });
        r.field<int>("min_samples", c.cluster.min_samples, detail::at_least(0, "must be >= 0"));
        r.field<bool>("allow_single_cluster", c.cluster.allow_single_cluster);
        r.finish();
    }
    {
        SchemaReader r(root.section("match"), "match", issues);
        r.field<double>("min_score", c.match.min_score, detail::unit_interval("must be in [0,1]"));
        r.finish();
    }
    {
        SchemaReader r(root.section("query"), "query", issues);
        r.field<std::string>("mode", c.query_mode, detail::check_query_mode);
        r.finish();
    }
    {
        SchemaReader r(root.section("bench"), "bench", issues);
        r.field<std::vector<std::uint64_t>>("seeds", c.bench_seeds);
        r.field<bool>("rendered_metric", c.rendered_metric);
        r.field<bool>("parallel_cells", c.parallel_cells);
        if (const auto* cells = r.section("cells")) {
            if (!cells->is_array()) {
                issues.push_back("bench.cells: expected an array");
            } else {
                c.bench_cells.clear();
                for (std::size_t i = 0; i < cells->size(); ++i) {
                    SchemaReader cr(&(*cells)[i], "bench.cells[" + std::to_string(i) + "]", issues);
                    BenchCell cell;
                    cell.name = "cell" + std::to_string(i);
                    cr.field<std::string>("name", cell.name);
                    cr.field<double>("granularity_p", cell.granularity_p, detail::unit_interval("must be in [0,1]"));
                    cr.field<int>("num_layers", cell.num_layers, detail::at_least(0, "must be >= 0"));
                    std::string loss = to_string(cell.loss);
                    cr.field<std::string>("loss", loss, detail::check_loss);
                    if (!detail::check_loss(loss)) cell.loss = loss_variant_from_string(loss);
                    cr.finish();
                    c.bench_cells.push_back(cell);
                }
            }
        }
        r.finish();
    }
    root.finish();
    if (!issues.empty()) {
        const std::string head = "configuration has " + std::to_string(issues.size()) + " problem(s):";
        throw SchemaError(head, issues);
    }
    c.train.seed = c.seed;
    c.dataset.scene.seed = c.seed;
    return c;
}

/// Effective configuration with every default filled in.
inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    const auto& s = c.dataset.scene;
    const auto& v = c.dataset.views;
    j["dataset"] = {{"num_objects", s.num_objects},
                    {"gaussians_per_object", s.gaussians_per_object},
                    {"placement_radius", s.placement_radius},
                    {"blob_sigma", s.blob_sigma},
                    {"gaussian_scale", s.gaussian_scale},
                    {"categories", s.categories},
                    {"feature_dim", s.feature_dim},
                    {"feature_noise", s.feature_noise},
                    {"color_noise", s.color_noise},
                    {"ground_gaussians", s.ground_gaussians},
                    {"num_views", v.count},
                    {"view_distance", v.distance},
                    {"image_width", v.width},
                    {"image_height", v.height},
                    {"focal", v.focal},
                    {"elevation_low_deg", v.elevation_low_deg},
                    {"elevation_high_deg", v.elevation_high_deg},
                    {"granularity_p", c.dataset.granularity_p},
                    {"perturb_mode", to_string(c.dataset.perturb_mode)},
                    {"language_dim", c.dataset.language_dim}};
    j["graph"] = {{"ratio", c.graph.ratio}, {"k", c.graph.k}, {"start_index", c.graph.start_index}, {"cell_multiple", c.graph.cell_multiple}};
    j["net"] = {{"num_layers", c.num_layers}, {"hidden", c.hidden}, {"final_relu", c.final_relu}};
    const auto& t = c.train;
    j["train"] = {{"iterations", t.iterations},
                  {"feature_lr", t.feature_lr},
                  {"net_lr", t.net_lr},
                  {"momentum", t.momentum},
                  {"temperature", t.temperature},
                  {"loss", to_string(t.loss)},
                  {"cohesion_weight", t.cohesion_weight},
                  {"views_per_iteration", t.views_per_iteration},
                  {"pixel_samples", t.pixel_samples},
                  {"include_self_in_denominator", t.include_self_in_denominator}};
    j["cluster"] = {{"min_cluster_size", c.cluster.min_cluster_size}, {"min_samples", c.cluster.min_samples}, {"allow_single_cluster", c.cluster.allow_single_cluster}};
    j["match"] = {{"min_score", c.match.min_score}};
    j["query"] = {{"mode", c.query_mode}};
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& cell : c.bench_cells)
        cells.push_back({{"name", cell.name}, {"granularity_p", cell.granularity_p}, {"num_layers", cell.num_layers}, {"loss", to_string(cell.loss)}});
    j["bench"] = {{"seeds", c.bench_seeds}, {"cells", cells}, {"rendered_metric", c.rendered_metric}, {"parallel_cells", c.parallel_cells}};
    return j;
}

}  // namespace cags
