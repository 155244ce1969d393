#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace cags;

namespace {

std::vector<std::string> issues_of(const std::string& text) {
    try {
        parse_run_config(nlohmann::json::parse(text));
    } catch (const SchemaError& e) {
        return e.issues();
    }
    return {};
}

bool mentions(const std::vector<std::string>& issues, const std::string& needle) {
    return std::any_of(issues.begin(), issues.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

}  // namespace

TEST(RunConfig, EmptyDocumentGivesDefaults) {
    const RunConfig c = parse_run_config(nlohmann::json::object());
    EXPECT_EQ(c.train.iterations, 10000);
    EXPECT_EQ(c.train.temperature, 0.1);
    EXPECT_EQ(c.train.momentum, 0.9);
    EXPECT_EQ(c.train.loss, LossVariant::per_mask);
    EXPECT_EQ(c.graph.ratio, 0.1);
    EXPECT_EQ(c.graph.k, 16);
    EXPECT_EQ(c.num_layers, 2);
    EXPECT_EQ(c.hidden, 16);
    EXPECT_EQ(c.dataset.scene.feature_dim, 16);
    EXPECT_EQ(c.match.min_score, 0.1);
    EXPECT_EQ(c.bench_seeds.size(), 5u);
    EXPECT_EQ(c.bench_cells.size(), standard_cells().size());
    EXPECT_FALSE(c.train.include_self_in_denominator);
}

TEST(RunConfig, ReadsEverySection) {
    const RunConfig c = parse_run_config(nlohmann::json::parse(R"({
        "seed": 7,
        "dataset": {"num_objects": 3, "granularity_p": 0.2, "perturb_mode": "split", "categories": [0, 0, 1]},
        "graph": {"ratio": 0.2, "k": 8},
        "net": {"num_layers": 3, "final_relu": false},
        "train": {"iterations": 50, "loss": "per-pixel+cohesion", "include_self_in_denominator": true},
        "cluster": {"min_cluster_size": 12},
        "match": {"min_score": 0.2},
        "query": {"mode": "threshold:0.4"},
        "bench": {"seeds": [3], "cells": [{"name": "a", "num_layers": 1, "loss": "per-pixel"}]}
    })"));
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.dataset.scene.seed, 7u);
    EXPECT_EQ(c.train.seed, 7u);
    EXPECT_EQ(c.dataset.scene.num_objects, 3);
    EXPECT_EQ(c.dataset.perturb_mode, PerturbMode::split_only);
    EXPECT_EQ(c.dataset.scene.categories, (std::vector<int>{0, 0, 1}));
    EXPECT_EQ(c.graph.k, 8);
    EXPECT_EQ(c.num_layers, 3);
    EXPECT_FALSE(c.final_relu);
    EXPECT_EQ(c.train.loss, LossVariant::per_pixel_cohesion);
    EXPECT_TRUE(c.train.include_self_in_denominator);
    EXPECT_EQ(c.cluster.min_cluster_size, 12);
    EXPECT_EQ(c.query_mode, "threshold:0.4");
    ASSERT_EQ(c.bench_cells.size(), 1u);
    EXPECT_EQ(c.bench_cells[0].name, "a");
    EXPECT_EQ(c.bench_cells[0].loss, LossVariant::per_pixel);
    EXPECT_EQ(c.bench_cells[0].granularity_p, 0.3);
    const auto b = c.benchmark();
    EXPECT_EQ(b.seeds, (std::vector<std::uint64_t>{3}));
    EXPECT_EQ(b.train.iterations, 50);
}

TEST(RunConfig, ReportsAllProblemsAtOnce) {
    const auto issues = issues_of(R"({
        "dataset": {"num_objects": 0, "granularity_p": 1.5, "perturb_mode": "spin"},
        "graph": {"ratio": 0},
        "train": {"temperature": -1, "loss": "per-voxel", "iterations": "many"},
        "query": {"mode": "top3"},
        "colour": 1
    })");
    EXPECT_EQ(issues.size(), 9u);
    EXPECT_TRUE(mentions(issues, "dataset.num_objects: must be >= 1"));
    EXPECT_TRUE(mentions(issues, "dataset.granularity_p"));
    EXPECT_TRUE(mentions(issues, "dataset.perturb_mode"));
    EXPECT_TRUE(mentions(issues, "graph.ratio"));
    EXPECT_TRUE(mentions(issues, "train.temperature"));
    EXPECT_TRUE(mentions(issues, "train.loss"));
    EXPECT_TRUE(mentions(issues, "train.iterations: expected an integer"));
    EXPECT_TRUE(mentions(issues, "query.mode"));
    EXPECT_TRUE(mentions(issues, "colour: unknown field"));
}

TEST(RunConfig, StructuralErrors) {
    EXPECT_TRUE(mentions(issues_of(R"({"train": 3})"), "train: expected an object"));
    EXPECT_TRUE(mentions(issues_of(R"({"bench": {"cells": {}}})"), "bench.cells: expected an array"));
    EXPECT_TRUE(mentions(issues_of(R"({"bench": {"cells": [{"loss": "x", "extra": 1}]}})"), "bench.cells[0].extra: unknown field"));
    EXPECT_TRUE(mentions(issues_of(R"({"seed": -1})"), "seed: expected a non-negative integer"));
    EXPECT_TRUE(mentions(issues_of(R"({"dataset": {"num_objects": 2, "categories": [0]}})"), "one id per object"));
    EXPECT_TRUE(mentions(issues_of(R"({"cluster": {"min_cluster_size": 1}})"), "cluster.min_cluster_size"));
}

TEST(RunConfig, EffectiveJsonRoundTrips) {
    const RunConfig c = parse_run_config(nlohmann::json::parse(R"({"seed": 4, "train": {"loss": "per-mask+cohesion"}})"));
    const auto j = run_config_to_json(c);
    const RunConfig back = parse_run_config(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(run_config_to_json(back).dump(), j.dump());
}

TEST(Provenance, RecordsHashesAndStableRecordHash) {
    const auto dir = std::filesystem::temp_directory_path() / "cags_test_prov";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const std::string out = (dir / "artifact.bin").string();
    io::write_text(out, "payload");
    ProvenanceRecord r;
    r.stage = "precompute";
    r.config = {{"ratio", 0.1}};
    r.outputs = {out};
    r.wall_seconds = 1.5;
    write_provenance(dir.string(), r);
    const std::string h1 = find_record_hash(dir.string(), "precompute");
    EXPECT_EQ(h1.size(), 16u);
    r.wall_seconds = 9.0;
    write_provenance(dir.string(), r);
    EXPECT_EQ(find_record_hash(dir.string(), "precompute"), h1);
    io::write_text(out, "payload2");
    write_provenance(dir.string(), r);
    EXPECT_NE(find_record_hash(dir.string(), "precompute"), h1);
    const auto j = nlohmann::json::parse(io::read_text(provenance_path(dir.string())));
    EXPECT_EQ(j["precompute"]["outputs"][0]["path"], "artifact.bin");
    EXPECT_EQ(find_record_hash(dir.string(), "train"), "");
}
