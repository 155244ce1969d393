#pragma once

// Selection metrics against synthetic ground truth and the benchmark driver
// that runs generate -> precompute -> train -> cluster -> assign -> query ->
// score for every (cell, seed) pair.

#include "cags/hdbscan.hpp"
#include "cags/semantics.hpp"
#include "cags/spatial_index.hpp"
#include "cags/synthetic.hpp"
#include "cags/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <span>
#include <vector>

namespace cags {

inline constexpr double kAccuracyIoU = 0.25;

/// |sel ∩ gt| / |sel ∪ gt| over Gaussian indices, gt = {i : labels[i] == target}.
/// An empty union gives 0 and sets `degenerate` when provided.
inline double selection_iou(std::span<const Index> selected, std::span<const Index> labels, Index target,
                            bool* degenerate = nullptr) {
    std::vector<char> sel(labels.size(), 0);
    for (Index i : selected) {
        if (i < 0 || static_cast<std::size_t>(i) >= labels.size()) throw InvalidArgument("selection_iou: index out of range");
        sel[static_cast<std::size_t>(i)] = 1;
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool g = labels[i] == target;
        inter += (sel[i] && g) ? 1 : 0;
        uni += (sel[i] || g) ? 1 : 0;
    }
    if (degenerate) *degenerate = uni == 0;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Fraction of values >= threshold.
inline double accuracy_at(const std::vector<double>& ious, double threshold = kAccuracyIoU) {
    if (ious.empty()) return 0.0;
    std::size_t hit = 0;
    for (double x : ious) hit += x >= threshold ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(ious.size());
}

struct PointMetrics {
    std::vector<double> iou;  // per category present in ground truth
    std::vector<double> acc;
    double miou = 0.0;
    double macc = 0.0;
};

/// Every Gaussian takes the category whose embedding best matches its
/// instance embedding (none for noise / unmatched); scored per category.
inline PointMetrics point_level_metrics(const SemanticTable& table, std::span<const Index> cluster_labels,
                                        std::span<const int> gt_category, const RowMatrix& category_embeddings) {
    if (cluster_labels.size() != gt_category.size()) throw InvalidArgument("point_level_metrics: label count mismatch");
    const int nc = static_cast<int>(category_embeddings.rows());
    std::vector<int> inst_cat(static_cast<std::size_t>(table.size()), -1);
    for (int k = 0; k < table.size(); ++k) {
        if (table.match_count[static_cast<std::size_t>(k)] == 0) continue;
        int best = -1;
        double best_s = -2.0;
        for (int c = 0; c < nc; ++c) {
            const double s = table.embeddings.row(k).dot(category_embeddings.row(c)) / category_embeddings.row(c).norm();
            if (s > best_s) {
                best_s = s;
                best = c;
            }
        }
        inst_cat[static_cast<std::size_t>(k)] = best;
    }
    PointMetrics m;
    for (int c = 0; c < nc; ++c) {
        std::size_t inter = 0, uni = 0, gt = 0;
        for (std::size_t i = 0; i < gt_category.size(); ++i) {
            const Index l = cluster_labels[i];
            const bool pred = l >= 0 && l < table.size() && inst_cat[static_cast<std::size_t>(l)] == c;
            const bool g = gt_category[i] == c;
            inter += (pred && g) ? 1 : 0;
            uni += (pred || g) ? 1 : 0;
            gt += g ? 1 : 0;
        }
        if (gt == 0) continue;
        m.iou.push_back(static_cast<double>(inter) / static_cast<double>(uni));
        m.acc.push_back(static_cast<double>(inter) / static_cast<double>(gt));
    }
    m.miou = mean_of(m.iou);
    m.macc = mean_of(m.acc);
    return m;
}

/// Mean over views of the 2D IoU between the thresholded silhouettes of the
/// selection and of the ground-truth Gaussians. Views where both are empty
/// are skipped.
inline double rendered_selection_iou(const GaussianScene& scene, const std::vector<Camera>& cameras,
                                     std::span<const Index> selected, std::span<const Index> ground_truth) {
    std::vector<double> per_view;
    for (const auto& cam : cameras) {
        const auto w = compute_weights(scene, cam);
        auto silhouette = [&](std::span<const Index> subset) {
            RowMatrix ind = RowMatrix::Zero(scene.size(), 1);
            for (Index i : subset) ind(i, 0) = 1.0;
            return threshold_silhouette(composite(w, ind));
        };
        const auto a = silhouette(selected);
        const auto b = silhouette(ground_truth);
        std::size_t uni = 0;
        for (std::size_t p = 0; p < a.size(); ++p) uni += (a[p] || b[p]) ? 1 : 0;
        if (uni == 0) continue;
        per_view.push_back(mask_iou(a, b));
    }
    return mean_of(per_view);
}

/// One ablation cell: the knobs that vary across the benchmark grid.
struct BenchCell {
    std::string name;
    double granularity_p = 0.3;
    int num_layers = 2;
    LossVariant loss = LossVariant::per_mask;
};

struct BenchmarkConfig {
    DatasetSpec dataset;  // granularity_p and seeds are taken from cells / seeds
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<BenchCell> cells;
    PrecomputeOptions graph;
    int hidden = kHiddenWidth;
    bool final_relu = true;
    TrainConfig train;
    HdbscanParams cluster;
    MatchParams match;
    std::string query_mode = "argmax";
    bool rendered_metric = true;
    bool parallel_cells = true;
};

struct CellRun {
    std::string cell;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::vector<double> query_iou;  // one query per category present
    double miou = 0.0;
    double macc25 = 0.0;
    double point_miou = 0.0;
    double point_macc = 0.0;
    double miou_2d = 0.0;
    int num_clusters = 0;
    double noise_fraction = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_curve;          // per training iteration
    std::map<std::string, double> seconds;  // wall time per stage
};

struct CellSummary {
    std::string cell;
    int runs = 0;
    int failed = 0;
    double mean_miou = 0.0;
    double median_miou = 0.0;
    double mean_macc25 = 0.0;
    double mean_point_miou = 0.0;
    double mean_miou_2d = 0.0;
};

struct EvalReport {
    std::string config_fingerprint;
    std::vector<CellRun> runs;
    std::vector<CellSummary> summary;

    const CellRun* find(const std::string& cell, std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.cell == cell && r.seed == seed) return &r;
        return nullptr;
    }
    const CellSummary* summary_of(const std::string& cell) const {
        for (const auto& s : summary)
            if (s.cell == cell) return &s;
        return nullptr;
    }
};

/// Runs one (cell, seed) end to end; throws on stage failure.
inline CellRun run_cell(const BenchmarkConfig& cfg, const BenchCell& cell, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    CellRun out;
    out.cell = cell.name;
    out.seed = seed;
    auto t = clock::now();
    auto lap = [&](const char* stage) {
        const auto now = clock::now();
        out.seconds[stage] = std::chrono::duration<double>(now - t).count();
        t = now;
    };

    DatasetSpec ds_spec = cfg.dataset;
    ds_spec.scene.seed = seed;
    ds_spec.granularity_p = cell.granularity_p;
    SyntheticDataset ds = generate_dataset(ds_spec);
    lap("generate");

    const AnchorGraph graph = precompute(ds.scene, cfg.graph);
    lap("precompute");

    PropagationNet net = PropagationNet::init(cell.num_layers, ds.scene.feature_dim(), seed, cfg.hidden, cfg.final_relu);
    TrainConfig tc = cfg.train;
    tc.loss = cell.loss;
    tc.seed = seed;
    std::vector<TrainView> tviews;
    for (const auto& v : ds.views) tviews.push_back({v.camera_id, v.raster});
    const TrainResult tr = train_stage2(ds.scene, graph, tviews, ds.cameras, net, tc);
    out.final_loss = tr.loss.empty() ? 0.0 : tr.loss.back();
    out.loss_curve = tr.loss;
    lap("train");

    const ClusterResult cr = hdbscan(standardize_features(ds.scene.features), cfg.cluster);
    out.num_clusters = cr.num_clusters;
    out.noise_fraction = cr.noise_fraction();
    lap("cluster");

    std::vector<SemanticView> sviews;
    for (const auto& v : ds.views) sviews.push_back({v.camera_id, v.raster, &v.embeddings});
    const SemanticTable table = match_and_accumulate(ds.scene, cr.labels, cr.num_clusters, sviews, ds.cameras, cfg.match);
    lap("assign");

    const auto& gt = *ds.scene.instance_labels;
    std::vector<int> gt_cat(gt.size(), -1);
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (gt[i] >= 0) gt_cat[i] = ds.object_categories[static_cast<std::size_t>(gt[i])];
    const QueryMode mode = QueryMode::parse(cfg.query_mode);
    std::vector<double> iou2d;
    for (int c = 0; c < static_cast<int>(ds.category_embeddings.rows()); ++c) {
        std::vector<Index> gt_members;
        for (std::size_t i = 0; i < gt_cat.size(); ++i)
            if (gt_cat[i] == c) gt_members.push_back(static_cast<Index>(i));
        if (gt_members.empty()) continue;
        const QueryResult q = text_query(table, cr.labels, ds.category_embeddings.row(c).transpose(), mode);
        out.query_iou.push_back(selection_iou(q.gaussians, std::span<const int>(gt_cat), c));
        if (cfg.rendered_metric) iou2d.push_back(rendered_selection_iou(ds.scene, ds.cameras, q.gaussians, gt_members));
    }
    out.miou = mean_of(out.query_iou);
    out.macc25 = accuracy_at(out.query_iou);
    out.miou_2d = mean_of(iou2d);
    const PointMetrics pm = point_level_metrics(table, cr.labels, gt_cat, ds.category_embeddings);
    out.point_miou = pm.miou;
    out.point_macc = pm.macc;
    lap("query");
    out.ok = true;
    return out;
}

inline std::vector<CellSummary> summarize(const std::vector<BenchCell>& cells, const std::vector<CellRun>& runs) {
    std::vector<CellSummary> out;
    for (const auto& c : cells) {
        CellSummary s;
        s.cell = c.name;
        std::vector<double> miou, macc, pmiou, m2d;
        for (const auto& r : runs) {
            if (r.cell != c.name) continue;
            ++s.runs;
            if (!r.ok) {
                ++s.failed;
                continue;
            }
            miou.push_back(r.miou);
            macc.push_back(r.macc25);
            pmiou.push_back(r.point_miou);
            m2d.push_back(r.miou_2d);
        }
        s.mean_miou = mean_of(miou);
        s.median_miou = median_of(miou);
        s.mean_macc25 = mean_of(macc);
        s.mean_point_miou = mean_of(pmiou);
        s.mean_miou_2d = mean_of(m2d);
        out.push_back(s);
    }
    return out;
}

/// Runs every (cell, seed). A failing run is recorded and the rest continue.
/// `fingerprint` identifies the configuration in the report.
inline EvalReport run_benchmark(const BenchmarkConfig& cfg, const std::string& fingerprint = {},
                                const std::function<void(const CellRun&)>& on_done = {}) {
    struct Job {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < cfg.cells.size(); ++c)
        for (auto s : cfg.seeds) jobs.push_back({c, s});
    std::vector<CellRun> runs(jobs.size());

#pragma omp parallel for schedule(dynamic, 1) if (cfg.parallel_cells)
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        const auto& cell = cfg.cells[jobs[j].cell];
        try {
            runs[j] = run_cell(cfg, cell, jobs[j].seed);
        } catch (const std::exception& e) {
            runs[j].cell = cell.name;
            runs[j].seed = jobs[j].seed;
            runs[j].ok = false;
            runs[j].error = e.what();
        }
        if (on_done) {
#pragma omp critical(cags_bench_progress)
            on_done(runs[j]);
        }
    }
    EvalReport rep;
    rep.config_fingerprint = fingerprint;
    rep.runs = std::move(runs);
    rep.summary = summarize(cfg.cells, rep.runs);
    return rep;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
    nlohmann::ordered_json j;
    j["config_fingerprint"] = rep.config_fingerprint;
    j["summary"] = nlohmann::ordered_json::array();
    for (const auto& s : rep.summary)
        j["summary"].push_back({{"cell", s.cell},
                                {"runs", s.runs},
                                {"failed", s.failed},
                                {"mean_miou", s.mean_miou},
                                {"median_miou", s.median_miou},
                                {"mean_macc25", s.mean_macc25},
                                {"mean_point_miou", s.mean_point_miou},
                                {"mean_miou_2d", s.mean_miou_2d}});
    j["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : rep.runs) {
        nlohmann::ordered_json e;
        e["cell"] = r.cell;
        e["seed"] = r.seed;
        e["ok"] = r.ok;
        if (!r.ok) e["error"] = r.error;
        e["query_iou"] = r.query_iou;
        e["miou"] = r.miou;
        e["macc25"] = r.macc25;
        e["point_miou"] = r.point_miou;
        e["point_macc"] = r.point_macc;
        e["miou_2d"] = r.miou_2d;
        e["num_clusters"] = r.num_clusters;
        e["noise_fraction"] = r.noise_fraction;
        e["final_loss"] = r.final_loss;
        e["seconds"] = r.seconds;
        j["runs"].push_back(e);
    }
    return j;
}

/// One row per (cell, seed); failed runs keep their row with ok=0.
inline std::string report_to_csv(const EvalReport& rep) {
    std::ostringstream os;
    os.precision(17);
    os << "cell,seed,ok,miou,macc25,point_miou,point_macc,miou_2d,num_clusters,noise_fraction,final_loss\n";
    for (const auto& r : rep.runs)
        os << r.cell << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << r.miou << ',' << r.macc25 << ',' << r.point_miou << ','
           << r.point_macc << ',' << r.miou_2d << ',' << r.num_clusters << ',' << r.noise_fraction << ',' << r.final_loss << '\n';
    return os.str();
}

/// The ablation grid used by the acceptance benchmark.
inline std::vector<BenchCell> standard_cells() {
    return {
        {"loss/per-mask", 0.3, 2, LossVariant::per_mask},
        {"loss/per-pixel", 0.3, 2, LossVariant::per_pixel},
        {"loss/per-mask+cohesion", 0.3, 2, LossVariant::per_mask_cohesion},
        {"loss/per-pixel+cohesion", 0.3, 2, LossVariant::per_pixel_cohesion},
        {"layers/L0", 0.3, 0, LossVariant::per_mask},
        {"layers/L1", 0.3, 1, LossVariant::per_mask},
        {"layers/L3", 0.3, 3, LossVariant::per_mask},
        {"layers/L4", 0.3, 4, LossVariant::per_mask},
        {"clean/full", 0.0, 2, LossVariant::per_mask},
        {"baseline/noisy", 0.3, 0, LossVariant::per_pixel},
        {"baseline/clean", 0.0, 0, LossVariant::per_pixel},
    };
}

}  // namespace cags
