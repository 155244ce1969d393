#pragma once

// provenance.json: one record per pipeline stage, keyed by stage name and
// merged across runs in the same output directory. Input hashes of a stage
// equal the output hashes recorded by the stage that produced them, which
// chains records across directories.

#include "cags/binary_io.hpp"
#include "cags/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <span>
#include <vector>

namespace cags {

struct ProvenanceRecord {
    std::string stage;
    nlohmann::ordered_json config;
    std::uint64_t seed = 0;
    int threads = 1;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::vector<std::string> volatile_outputs;  // listed but not hashed (they carry wall time)
    double wall_seconds = 0.0;
    std::string upstream;  // record hash of the stage that produced the inputs
};

inline nlohmann::ordered_json hash_list(const std::vector<std::string>& paths) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& p : paths)
        a.push_back({{"path", std::filesystem::path(p).filename().string()}, {"fnv1a64", io::file_hash(p)}});
    return a;
}

/// Hash over the reproducible part of a record (wall time excluded).
inline std::string record_hash(const nlohmann::ordered_json& rec) {
    nlohmann::ordered_json r = rec;
    r.erase("wall_seconds");
    r.erase("record_hash");
    const std::string s = r.dump();
    return io::hex64(io::fnv1a(std::span<const char>(s.data(), s.size())));
}

inline std::string provenance_path(const std::string& dir) { return (std::filesystem::path(dir) / "provenance.json").string(); }

/// Record hash of `stage` in `dir`'s provenance file, empty if absent.
inline std::string find_record_hash(const std::string& dir, const std::string& stage) {
    const std::string p = provenance_path(dir);
    if (!std::filesystem::exists(p)) return {};
    try {
        const auto j = nlohmann::json::parse(io::read_text(p));
        if (j.contains(stage) && j[stage].contains("record_hash")) return j[stage]["record_hash"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    return {};
}

inline void write_provenance(const std::string& dir, const ProvenanceRecord& r) {
    nlohmann::ordered_json all;
    const std::string p = provenance_path(dir);
    if (std::filesystem::exists(p)) {
        try {
            all = nlohmann::ordered_json::parse(io::read_text(p));
        } catch (const nlohmann::json::exception&) {
            all = nlohmann::ordered_json::object();
        }
    }
    nlohmann::ordered_json rec;
    rec["stage"] = r.stage;
    rec["version"] = kVersion;
    rec["seed"] = r.seed;
    rec["threads"] = r.threads;
    rec["config"] = r.config;
    rec["inputs"] = hash_list(r.inputs);
    rec["outputs"] = hash_list(r.outputs);
    for (const auto& v : r.volatile_outputs)
        rec["outputs"].push_back({{"path", std::filesystem::path(v).filename().string()}, {"volatile", true}});
    rec["upstream"] = r.upstream;
    rec["wall_seconds"] = r.wall_seconds;
    rec["record_hash"] = record_hash(rec);
    all[r.stage] = rec;
    io::write_text(p, all.dump(2) + "\n");
}

}  // namespace cags
