// cags: command-line driver for the pipeline stages.
//
//   gen -> precompute -> train -> cluster -> assign -> query / render
//   eval runs the whole chain over a benchmark grid.
//
// Every stage writes its artifacts plus a provenance.json record into its
// output directory. Exit codes: 0 ok, 1 runtime failure, 2 usage or missing
// input, 3 config-schema violation.

#include "cags/cags.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace cags;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kSchema = 3 };

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

RunConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    require_file(path, "config file");
    nlohmann::json j;
    try {
        j = read_json_file(path);
    } catch (const ParseError& e) {
        throw SchemaError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

// The sections of the effective config a stage depends on.
nlohmann::ordered_json sections(const RunConfig& c, std::initializer_list<const char*> keys) {
    const auto all = run_config_to_json(c);
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const char* k : keys)
        if (all.contains(k)) out[k] = all[k];
    return out;
}

std::string dir_of(const std::string& path) {
    const fs::path p = fs::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Record hash of the first of `stages` found in `dir`.
std::string upstream_of(const std::string& dir, std::initializer_list<const char*> stages) {
    for (const char* s : stages) {
        const std::string h = find_record_hash(dir, s);
        if (!h.empty()) return h;
    }
    return {};
}

std::vector<std::string> scene_files(const std::string& ply) {
    std::vector<std::string> f{ply};
    if (fs::exists(scene_sidecar_path(ply))) f.push_back(scene_sidecar_path(ply));
    return f;
}

void append(std::vector<std::string>& a, const std::vector<std::string>& b) { a.insert(a.end(), b.begin(), b.end()); }

std::string manifest_scene_path(const std::string& manifest) {
    const auto man = read_json_file(manifest);
    if (!man.contains("scene") || !man["scene"].is_string()) throw SchemaError("dataset manifest: scene must be a path string");
    return join(dir_of(manifest), man["scene"].get<std::string>());
}

std::string default_graph_path(const std::string& scene_ply) {
    return (fs::path(scene_ply).replace_extension(".graph")).string();
}

void save_labels(const std::vector<Index>& labels, const std::string& path) {
    io::ByteWriter w;
    w.put_span(std::span<const Index>(labels));
    io::write_file(path, w.bytes());
}

std::vector<Index> load_labels(const std::string& path) {
    require_file(path, "cluster labels");
    const auto bytes = io::read_file(path);
    if (bytes.size() % sizeof(Index) != 0) throw ParseError(path + ": label file length is not a multiple of 4", bytes.size());
    std::vector<Index> labels(bytes.size() / sizeof(Index));
    io::ByteReader r(bytes);
    r.get_span(std::span<Index>(labels));
    return labels;
}

// A query vector: a bare JSON array or an object with an "embedding" array.
Eigen::VectorXd load_embedding(const std::string& path) {
    require_file(path, "text embedding");
    const auto j = read_json_file(path);
    const nlohmann::json& a = j.is_object() && j.contains("embedding") ? j["embedding"] : j;
    if (!a.is_array() || a.empty()) throw SchemaError(path + ": expected a non-empty array of numbers (or {\"embedding\": [...]})");
    Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number()) throw SchemaError(path + ": embedding entry " + std::to_string(i) + " is not a number");
        v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
    }
    return v;
}

std::vector<int> parse_views(const std::string& spec, int num_cameras) {
    std::vector<int> out;
    if (spec.empty() || spec == "all") {
        for (int i = 0; i < num_cameras; ++i) out.push_back(i);
        return out;
    }
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        int v = 0;
        try {
            std::size_t used = 0;
            v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw InvalidArgument("--views: '" + tok + "' is not a camera index");
        }
        if (v < 0 || v >= num_cameras) throw InvalidArgument("--views: camera " + tok + " does not exist");
        out.push_back(v);
    }
    return out;
}

std::string safe_name(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
    return s;
}

void finish(ProvenanceRecord rec, const std::string& dir, const Stopwatch& sw) {
    rec.threads = num_threads();
    rec.wall_seconds = sw.seconds();
    write_provenance(dir, rec);
    log::info(rec.stage + ".done", {{"out", dir}, {"outputs", log::str(rec.outputs.size())}, {"seconds", log::str(rec.wall_seconds)},
                                    {"record", find_record_hash(dir, rec.stage)}});
}

// ---------------------------------------------------------------------------
// Stages

struct GenArgs {
    std::string config, out;
};

int run_gen(const GenArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    const SyntheticDataset ds = generate_dataset(cfg.dataset);
    fs::create_directories(a.out);
    const std::string manifest = save_dataset(ds, a.out);
    ProvenanceRecord rec;
    rec.stage = "gen";
    rec.config = sections(cfg, {"seed", "dataset"});
    rec.seed = cfg.seed;
    if (!a.config.empty()) rec.inputs = {a.config};
    rec.outputs = dataset_files(manifest);
    fs::create_directories(join(a.out, "queries"));
    for (Eigen::Index c = 0; c < ds.category_embeddings.rows(); ++c) {
        char name[48];
        std::snprintf(name, sizeof name, "queries/category_%02d.json", static_cast<int>(c));
        nlohmann::ordered_json q;
        q["category"] = c;
        q["embedding"] = std::vector<double>(ds.category_embeddings.row(c).data(), ds.category_embeddings.row(c).data() + ds.category_embeddings.cols());
        write_json_file(join(a.out, name), q);
        rec.outputs.push_back(join(a.out, name));
    }
    log::info("gen.dataset", {{"gaussians", log::str(ds.scene.size())}, {"views", log::str(ds.views.size())},
                              {"objects", log::str(cfg.dataset.scene.num_objects)}, {"granularity_p", log::str(cfg.dataset.granularity_p)}});
    finish(rec, a.out, sw);
    return kOk;
}

struct PrecomputeArgs {
    std::string scene, out, config;
    bool freeze = false;
};

int run_precompute(const PrecomputeArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    require_file(a.scene, "scene PLY");
    GaussianScene scene = load_scene(a.scene);
    if (!scene.geometry_frozen) {
        if (!a.freeze)
            throw PreconditionError("precompute: " + a.scene + " does not mark its geometry frozen; pass --freeze to fix positions now");
        scene.geometry_frozen = true;
    }
    const std::string out = a.out.empty() ? default_graph_path(a.scene) : a.out;
    if (!dir_of(out).empty()) fs::create_directories(dir_of(out));
    const AnchorGraph g = precompute(scene, cfg.graph);
    save_graph(g, out);
    log::info("precompute.graph", {{"gaussians", log::str(scene.size())}, {"anchors", log::str(g.anchors.size())}, {"k", log::str(cfg.graph.k)}});
    ProvenanceRecord rec;
    rec.stage = "precompute";
    rec.config = sections(cfg, {"graph"});
    rec.config["freeze"] = a.freeze;
    rec.inputs = scene_files(a.scene);
    if (!a.config.empty()) rec.inputs.push_back(a.config);
    rec.outputs = {out};
    rec.upstream = upstream_of(dir_of(a.scene), {"gen"});
    finish(rec, dir_of(out), sw);
    return kOk;
}

struct TrainArgs {
    std::string dataset, graph, config, out;
};

int run_train(const TrainArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    require_file(a.dataset, "dataset manifest");
    const std::string scene_ply = manifest_scene_path(a.dataset);
    const std::string graph_path = a.graph.empty() ? default_graph_path(scene_ply) : a.graph;
    if (!fs::exists(graph_path))
        throw MissingInputError("anchor graph not found: " + graph_path + "; run the precompute stage first (cags precompute --scene " +
                                scene_ply + ")");
    SyntheticDataset ds = load_dataset(a.dataset);
    const AnchorGraph graph = load_graph(graph_path);
    validate_graph(graph, ds.scene.size());
    // The graph was built on these positions, so they are fixed from here on.
    ds.scene.geometry_frozen = true;

    const std::string out = a.out.empty() ? dir_of(a.dataset) : a.out;
    fs::create_directories(out);
    PropagationNet net = PropagationNet::init(cfg.num_layers, ds.scene.feature_dim(), cfg.train.seed, cfg.hidden, cfg.final_relu);
    std::vector<TrainView> views;
    for (const auto& v : ds.views) views.push_back({v.camera_id, v.raster});
    const int every = std::max(1, cfg.train.iterations / 10);
    TrainResult res;
    try {
        res = train_stage2(ds.scene, graph, views, ds.cameras, net, cfg.train, [&](int it, double loss) {
            if ((it + 1) % every == 0 || it == 0) log::info("train.progress", {{"iteration", log::str(it)}, {"loss", log::str(loss)}});
        });
    } catch (const TrainingDiverged& e) {
        log::error("train.diverged", {{"iteration", log::str(e.iteration())}, {"message", e.what()}});
        return kRuntime;
    }

    const std::string ply = join(out, "trained.ply"), netf = join(out, "net.bin"), csv = join(out, "train_log.csv");
    save_scene(ds.scene, ply);
    save_net(net, netf);
    std::ostringstream log_csv;
    log_csv.precision(17);
    log_csv << "iteration,loss,wall_seconds\n";
    for (std::size_t i = 0; i < res.loss.size(); ++i) log_csv << i << ',' << res.loss[i] << ',' << res.seconds[i] << '\n';
    io::write_text(csv, log_csv.str());

    ProvenanceRecord rec;
    rec.stage = "train";
    rec.config = sections(cfg, {"seed", "net", "train"});
    rec.seed = cfg.train.seed;
    rec.inputs = dataset_files(a.dataset);
    rec.inputs.push_back(graph_path);
    if (!a.config.empty()) rec.inputs.push_back(a.config);
    rec.outputs = scene_files(ply);
    rec.outputs.push_back(netf);
    rec.volatile_outputs = {csv};
    rec.upstream = upstream_of(dir_of(graph_path), {"precompute"});
    log::info("train.result", {{"iterations", log::str(res.loss.size())}, {"final_loss", res.loss.empty() ? "nan" : log::str(res.loss.back())}});
    finish(rec, out, sw);
    return kOk;
}

struct ClusterArgs {
    std::string scene, config, out;
};

int run_cluster(const ClusterArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    require_file(a.scene, "trained scene PLY");
    const GaussianScene scene = load_scene(a.scene);
    const ClusterResult cr = hdbscan(standardize_features(scene.features), cfg.cluster);
    const std::string out = a.out.empty() ? dir_of(a.scene) : a.out;
    fs::create_directories(out);
    const std::string labels = join(out, "labels.i32"), summary = join(out, "clusters.json");
    save_labels(cr.labels, labels);
    nlohmann::ordered_json j;
    j["num_points"] = cr.labels.size();
    j["num_clusters"] = cr.num_clusters;
    j["sizes"] = cr.sizes;
    j["stability"] = cr.stability;
    j["noise_fraction"] = cr.noise_fraction();
    j["degenerate"] = cr.degenerate;
    j["labels"] = {{"path", "labels.i32"}, {"dtype", "int32"}, {"byte_order", "little"}, {"noise", -1}};
    write_json_file(summary, j);
    log::info("cluster.result", {{"clusters", log::str(cr.num_clusters)}, {"noise_fraction", log::str(cr.noise_fraction())}});
    ProvenanceRecord rec;
    rec.stage = "cluster";
    rec.config = sections(cfg, {"cluster"});
    rec.inputs = scene_files(a.scene);
    if (!a.config.empty()) rec.inputs.push_back(a.config);
    rec.outputs = {labels, summary};
    rec.upstream = upstream_of(dir_of(a.scene), {"train"});
    finish(rec, out, sw);
    return kOk;
}

struct AssignArgs {
    std::string dataset, scene, labels, config, out;
};

int run_assign(const AssignArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    const std::string out = a.out.empty() ? dir_of(a.dataset) : a.out;
    const std::string scene_ply = a.scene.empty() ? join(out, "trained.ply") : a.scene;
    const std::string labels_path = a.labels.empty() ? join(dir_of(scene_ply), "labels.i32") : a.labels;
    require_file(scene_ply, "trained scene PLY");
    const SyntheticDataset ds = load_dataset(a.dataset);
    const GaussianScene scene = load_scene(scene_ply);
    const std::vector<Index> labels = load_labels(labels_path);
    if (static_cast<Index>(labels.size()) != scene.size())
        throw InvalidArgument("assign: " + labels_path + " has " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(scene.size()) + " Gaussians");
    const int num_instances = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<SemanticView> views;
    for (const auto& v : ds.views) views.push_back({v.camera_id, v.raster, &v.embeddings});
    std::vector<Association> assoc;
    const SemanticTable t = match_and_accumulate(scene, labels, num_instances, views, ds.cameras, cfg.match, &assoc);
    fs::create_directories(out);
    const std::string table = join(out, "semantics.json");
    write_json_file(table, semantic_table_to_json(t));
    const int matched = static_cast<int>(std::count_if(t.match_count.begin(), t.match_count.end(), [](int c) { return c > 0; }));
    log::info("assign.result", {{"instances", log::str(num_instances)}, {"matched", log::str(matched)}, {"associations", log::str(assoc.size())}});
    ProvenanceRecord rec;
    rec.stage = "assign";
    rec.config = sections(cfg, {"match"});
    rec.inputs = dataset_files(a.dataset);
    append(rec.inputs, scene_files(scene_ply));
    rec.inputs.push_back(labels_path);
    if (!a.config.empty()) rec.inputs.push_back(a.config);
    rec.outputs = {table};
    rec.upstream = upstream_of(dir_of(labels_path), {"cluster"});
    finish(rec, out, sw);
    return kOk;
}

struct QueryArgs {
    std::string semantics, labels, embedding, mode, config, out, dataset, scene;
    bool render_masks = false;
};

int run_query(const QueryArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.config);
    const std::string mode_text = a.mode.empty() ? cfg.query_mode : a.mode;
    const QueryMode mode = QueryMode::parse(mode_text);
    require_file(a.semantics, "semantic table");
    const SemanticTable table = semantic_table_from_json(read_json_file(a.semantics));
    const std::string labels_path = a.labels.empty() ? join(dir_of(a.semantics), "labels.i32") : a.labels;
    const std::vector<Index> labels = load_labels(labels_path);
    const Eigen::VectorXd q = load_embedding(a.embedding);
    const QueryResult r = text_query(table, labels, q, mode);
    if (r.empty_table) log::warn("query.empty_table", {{"semantics", a.semantics}});

    const std::string out = a.out.empty() ? join(dir_of(a.semantics), "selection.json") : a.out;
    if (!dir_of(out).empty()) fs::create_directories(dir_of(out));
    nlohmann::ordered_json j;
    j["mode"] = mode_text;
    j["instances"] = r.instances;
    nlohmann::ordered_json sim = nlohmann::ordered_json::array();
    for (double s : r.similarity) sim.push_back(std::isnan(s) ? nlohmann::ordered_json() : nlohmann::ordered_json(s));
    j["similarity"] = sim;
    j["num_selected"] = r.gaussians.size();
    j["gaussians"] = r.gaussians;
    write_json_file(out, j);

    ProvenanceRecord rec;
    const std::string stem = fs::path(out).stem().string();
    rec.stage = "query:" + stem;
    rec.config = {{"mode", mode_text}, {"render_masks", a.render_masks}};
    rec.inputs = {a.semantics, labels_path, a.embedding};
    rec.outputs = {out};
    if (a.render_masks) {
        if (a.dataset.empty()) throw InvalidArgument("query: --render-masks needs --dataset");
        const SyntheticDataset ds = load_dataset(a.dataset);
        const std::string ply = a.scene.empty() ? join(dir_of(a.semantics), "trained.ply") : a.scene;
        require_file(ply, "trained scene PLY");
        const GaussianScene scene = load_scene(ply);
        for (std::size_t v = 0; v < ds.cameras.size(); ++v) {
            const auto& cam = ds.cameras[v];
            io::Image16 img{cam.width, cam.height, std::vector<std::uint16_t>(static_cast<std::size_t>(cam.width) * cam.height, 0)};
            if (!r.gaussians.empty()) {
                const auto m = threshold_silhouette(render(scene, cam, RenderChannels::silhouette, r.gaussians));
                for (std::size_t p = 0; p < m.size(); ++p) img.pixels[p] = m[p];
            }
            char name[64];
            std::snprintf(name, sizeof name, "_view_%03zu.pgm", v);
            const std::string path = join(dir_of(out), stem + name);
            io::write_pgm16(path, img);
            rec.outputs.push_back(path);
        }
        append(rec.inputs, dataset_files(a.dataset));
        append(rec.inputs, scene_files(ply));
    }
    rec.upstream = upstream_of(dir_of(a.semantics), {"assign"});
    log::info("query.result", {{"instances", log::str(r.instances.size())}, {"gaussians", log::str(r.gaussians.size())}});
    finish(rec, dir_of(out), sw);
    return kOk;
}

struct RenderArgs {
    std::string dataset, scene, selection, labels, views, out;
    std::vector<std::string> channels{"color"};
};

int run_render(const RenderArgs& a) {
    Stopwatch sw;
    require_file(a.dataset, "dataset manifest");
    const std::string ply = a.scene.empty() ? manifest_scene_path(a.dataset) : a.scene;
    require_file(ply, "scene PLY");
    const GaussianScene scene = load_scene(ply);
    const std::string cams_rel = read_json_file(a.dataset).at("cameras").get<std::string>();
    const std::string cams_path = join(dir_of(a.dataset), cams_rel);
    require_file(cams_path, "cameras file");
    const std::vector<Camera> cams = cameras_from_json(read_json_file(cams_path));
    const std::vector<int> views = parse_views(a.views, static_cast<int>(cams.size()));

    ProvenanceRecord rec;
    rec.stage = "render";
    rec.inputs = {a.dataset, cams_path};
    append(rec.inputs, scene_files(ply));
    std::vector<Index> selection, labels;
    int num_labels = 0;
    for (const auto& ch : a.channels) {
        if (ch == "silhouette" && selection.empty()) {
            if (a.selection.empty()) throw InvalidArgument("render: the silhouette channel needs --selection");
            require_file(a.selection, "selection");
            selection = read_json_file(a.selection).at("gaussians").get<std::vector<Index>>();
            rec.inputs.push_back(a.selection);
        }
        if (ch == "ids" && labels.empty()) {
            if (a.labels.empty()) throw InvalidArgument("render: the ids channel needs --labels");
            labels = load_labels(a.labels);
            if (static_cast<Index>(labels.size()) != scene.size()) throw InvalidArgument("render: label count differs from the scene");
            num_labels = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
            if (num_labels > 65535) throw InvalidArgument("render: too many labels for a 16-bit id map");
            rec.inputs.push_back(a.labels);
        }
    }
    fs::create_directories(a.out);
    for (int v : views) {
        const Camera& cam = cams[static_cast<std::size_t>(v)];
        const CompositingWeights w = compute_weights(scene, cam);
        const std::string stem = join(a.out, detail::view_stem(static_cast<std::size_t>(v)));
        for (const auto& ch : a.channels) {
            if (ch == "color") {
                io::write_ppm(stem + "_color.ppm", composite(w, RowMatrix(scene.colors)));
                rec.outputs.push_back(stem + "_color.ppm");
            } else if (ch == "feature") {
                io::write_feature_map(stem + "_feature", composite(w, scene.features));
                rec.outputs.push_back(stem + "_feature.bin");
                rec.outputs.push_back(stem + "_feature.json");
            } else if (ch == "silhouette") {
                io::Image16 img{cam.width, cam.height, std::vector<std::uint16_t>(w.pixels(), 0)};
                if (!selection.empty()) {
                    RowMatrix ind = RowMatrix::Zero(scene.size(), 1);
                    for (Index i : selection) {
                        if (i < 0 || i >= scene.size()) throw InvalidArgument("render: selection index out of range");
                        ind(i, 0) = 1.0;
                    }
                    const auto m = threshold_silhouette(composite(w, ind));
                    for (std::size_t p = 0; p < m.size(); ++p) img.pixels[p] = m[p];
                }
                io::write_pgm16(stem + "_silhouette.pgm", img);
                rec.outputs.push_back(stem + "_silhouette.pgm");
            } else if (ch == "ids") {
                io::write_pgm16(stem + "_ids.pgm", io::Image16{cam.width, cam.height, object_id_map(w, labels, num_labels)});
                rec.outputs.push_back(stem + "_ids.pgm");
            }
        }
    }
    rec.config = {{"channels", a.channels}, {"views", views}};
    rec.upstream = upstream_of(dir_of(ply), {"train", "gen"});
    finish(rec, a.out, sw);
    return kOk;
}

struct EvalArgs {
    std::string bench, out;
};

int run_eval(const EvalArgs& a) {
    Stopwatch sw;
    const RunConfig cfg = load_config(a.bench);
    const auto eff = run_config_to_json(cfg);
    const std::string eff_text = eff.dump();
    const std::string fingerprint = io::hex64(io::fnv1a(std::span<const char>(eff_text.data(), eff_text.size())));
    const BenchmarkConfig bc = cfg.benchmark();
    log::info("eval.start", {{"cells", log::str(bc.cells.size())}, {"seeds", log::str(bc.seeds.size())}, {"fingerprint", fingerprint}});
    const EvalReport rep = run_benchmark(bc, fingerprint, [](const CellRun& r) {
        if (r.ok)
            log::info("eval.run", {{"cell", r.cell}, {"seed", log::str(r.seed)}, {"miou", log::str(r.miou)}, {"clusters", log::str(r.num_clusters)}});
        else
            log::error("eval.run_failed", {{"cell", r.cell}, {"seed", log::str(r.seed)}, {"error", r.error}});
    });

    fs::create_directories(join(a.out, "logs"));
    ProvenanceRecord rec;
    rec.stage = "eval";
    rec.config = eff;
    rec.seed = cfg.seed;
    rec.inputs = {a.bench};
    const std::string report_json = join(a.out, "report.json"), report_csv = join(a.out, "report.csv");
    write_json_file(report_json, report_to_json(rep));
    io::write_text(report_csv, report_to_csv(rep));
    rec.outputs = {report_json, report_csv};
    for (const auto& r : rep.runs) {
        if (!r.ok) continue;
        const std::string path = join(a.out, "logs/" + safe_name(r.cell) + "_seed" + std::to_string(r.seed) + ".csv");
        std::ostringstream os;
        os.precision(17);
        os << "iteration,loss\n";
        for (std::size_t i = 0; i < r.loss_curve.size(); ++i) os << i << ',' << r.loss_curve[i] << '\n';
        io::write_text(path, os.str());
        rec.outputs.push_back(path);
    }
    for (const auto& s : rep.summary)
        log::info("eval.cell", {{"cell", s.cell}, {"mean_miou", log::str(s.mean_miou)}, {"median_miou", log::str(s.median_miou)},
                                {"failed", log::str(s.failed)}});
    finish(rec, a.out, sw);
    const bool any_failed = std::any_of(rep.runs.begin(), rep.runs.end(), [](const CellRun& r) { return !r.ok; });
    return any_failed ? kRuntime : kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cags: context-aware Gaussian feature learning pipeline"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker thread cap (default: hardware concurrency)")->check(CLI::NonNegativeNumber);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic dataset (scene, cameras, masks, embeddings)");
    g->add_option("--config", gen.config, "Run config JSON")->check(CLI::ExistingFile);
    g->add_option("--out", gen.out, "Output directory")->required();

    PrecomputeArgs pre;
    auto* p = app.add_subcommand("precompute", "Sample anchors and build the anchor k-NN graph");
    p->add_option("--scene", pre.scene, "Scene PLY")->required();
    p->add_option("--out", pre.out, "Graph file (default: <scene>.graph)");
    p->add_option("--config", pre.config, "Run config JSON (graph section)")->check(CLI::ExistingFile);
    p->add_flag("--freeze", pre.freeze, "Freeze the scene's geometry if its PLY does not already");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Contrastive feature training with context propagation");
    t->add_option("--dataset", tr.dataset, "Dataset manifest JSON")->required();
    t->add_option("--graph", tr.graph, "Anchor graph (default: <scene>.graph)");
    t->add_option("--config", tr.config, "Run config JSON (net and train sections)")->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Output directory (default: the dataset directory)");

    ClusterArgs cl;
    auto* c = app.add_subcommand("cluster", "HDBSCAN over standardized trained features");
    c->add_option("--scene", cl.scene, "Trained scene PLY")->required();
    c->add_option("--config", cl.config, "Run config JSON (cluster section)")->check(CLI::ExistingFile);
    c->add_option("--out", cl.out, "Output directory (default: the scene directory)");

    AssignArgs as;
    auto* s = app.add_subcommand("assign", "Match instances to masks and accumulate language embeddings");
    s->add_option("--dataset", as.dataset, "Dataset manifest JSON")->required();
    s->add_option("--scene", as.scene, "Trained scene PLY (default: <out>/trained.ply)");
    s->add_option("--labels", as.labels, "Cluster labels (default: labels.i32 beside the scene)");
    s->add_option("--config", as.config, "Run config JSON (match section)")->check(CLI::ExistingFile);
    s->add_option("--out", as.out, "Output directory (default: the dataset directory)");

    QueryArgs qu;
    auto* q = app.add_subcommand("query", "Select Gaussians matching a text embedding");
    q->add_option("--semantics", qu.semantics, "Semantic table JSON from assign")->required();
    q->add_option("--text-embedding", qu.embedding, "Query vector JSON: [..] or {\"embedding\": [..]}")->required();
    q->add_option("--labels", qu.labels, "Cluster labels (default: labels.i32 beside the table)");
    q->add_option("--mode", qu.mode, "argmax | threshold:<t> (default: config query.mode)");
    q->add_option("--config", qu.config, "Run config JSON (query section)")->check(CLI::ExistingFile);
    q->add_option("--out", qu.out, "Selection JSON (default: selection.json beside the table)");
    q->add_flag("--render-masks", qu.render_masks, "Also write a selection mask PGM per view");
    q->add_option("--dataset", qu.dataset, "Dataset manifest, for --render-masks");
    q->add_option("--scene", qu.scene, "Trained scene PLY, for --render-masks");

    RenderArgs re;
    auto* r = app.add_subcommand("render", "Render colors, features, selection silhouettes or cluster ids");
    r->add_option("--dataset", re.dataset, "Dataset manifest (cameras)")->required();
    r->add_option("--scene", re.scene, "Scene PLY (default: the dataset scene)");
    r->add_option("--channels", re.channels, "color, feature, silhouette, ids")
        ->delimiter(',')
        ->check(CLI::IsMember({"color", "feature", "silhouette", "ids"}));
    r->add_option("--selection", re.selection, "Selection JSON from query (silhouette channel)");
    r->add_option("--labels", re.labels, "Cluster labels (ids channel)");
    r->add_option("--views", re.views, "Comma-separated camera indices (default: all)");
    r->add_option("--out", re.out, "Output directory")->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Run the benchmark grid and write report.json / report.csv");
    e->add_option("--bench", ev.bench, "Benchmark config JSON")->required();
    e->add_option("--out", ev.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    set_num_threads(threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        if (*g) return run_gen(gen);
        if (*p) return run_precompute(pre);
        if (*t) return run_train(tr);
        if (*c) return run_cluster(cl);
        if (*s) return run_assign(as);
        if (*q) return run_query(qu);
        if (*r) return run_render(re);
        if (*e) return run_eval(ev);
    } catch (const SchemaError& ex) {
        log::error("config.invalid", {{"stage", stage}, {"message", ex.what()}});
        return kSchema;
    } catch (const MissingInputError& ex) {
        log::error("input.missing", {{"stage", stage}, {"message", ex.what()}});
        return kUsage;
    } catch (const PreconditionError& ex) {
        log::error("input.precondition", {{"stage", stage}, {"message", ex.what()}});
        return kUsage;
    } catch (const InvalidArgument& ex) {
        log::error("input.invalid", {{"stage", stage}, {"message", ex.what()}});
        return kUsage;
    } catch (const std::exception& ex) {
        log::error("stage.failed", {{"stage", stage}, {"message", ex.what()}});
        return kRuntime;
    }
    return kUsage;
}
