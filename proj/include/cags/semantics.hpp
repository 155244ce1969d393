#pragma once

// Instance-to-mask association across views, consensus language
// embeddings per instance, and embedding queries that select Gaussians.

#include "cags/renderer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cags {

inline constexpr double kDefaultMinAssociation = 0.1;

/// IoU-style overlap of two binary masks; 0 when both are empty.
inline double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) throw InvalidArgument("mask_iou: masks differ in size");
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        inter += (a[p] && b[p]) ? 1 : 0;
        uni += (a[p] || b[p]) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Cosine similarity clamped to [0, 1]; zero-norm inputs give 0.
inline double semantic_factor(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw InvalidArgument("semantic_factor: feature dims differ");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(a.dot(b) / (na * nb), 0.0, 1.0);
}

inline double score_from_parts(double iou, double semantic) { return iou * semantic; }

inline double association_score(std::span<const std::uint8_t> silhouette, std::span<const std::uint8_t> mask,
                                 const Eigen::VectorXd& instance_feature, const Eigen::VectorXd& mask_feature) {
    return score_from_parts(mask_iou(silhouette, mask), semantic_factor(instance_feature, mask_feature));
}

/// A view's masks as seen by the matcher.
struct SemanticView {
    int camera = 0;
    std::span<const std::uint16_t> raster;
    const RowMatrix* embeddings = nullptr;  // one row per mask id (row k-1 is mask k)
};

struct SemanticTable {
    RowMatrix embeddings;            // I x d_lang, zero rows for unmatched instances
    std::vector<int> match_count;    // views in which each instance was matched

    int size() const { return static_cast<int>(match_count.size()); }
    int language_dim() const { return static_cast<int>(embeddings.cols()); }
    bool operator==(const SemanticTable& o) const {
        return match_count == o.match_count && embeddings.rows() == o.embeddings.rows() &&
               embeddings.cols() == o.embeddings.cols() && embeddings == o.embeddings;
    }
};

struct MatchParams {
    double min_score = kDefaultMinAssociation;
};

/// One matched (instance, mask) pair in a view.
struct Association {
    int view = 0;
    Index instance = 0;
    int mask_id = 0;
    double score = 0.0;
};

/// Per view, every instance independently takes its best-scoring mask when
/// the score exceeds `min_score`; matched mask embeddings are averaged per
/// instance and normalised. Noise Gaussians (label < 0) belong to no instance.
inline SemanticTable match_and_accumulate(const GaussianScene& scene, std::span<const Index> labels, int num_instances,
                                          std::span<const SemanticView> views, const std::vector<Camera>& cameras,
                                          const MatchParams& params = {}, std::vector<Association>* log = nullptr) {
    if (static_cast<Index>(labels.size()) != scene.size()) throw InvalidArgument("match_and_accumulate: label count mismatch");
    int d_lang = 0;
    for (const auto& v : views) {
        if (!v.embeddings) throw InvalidArgument("match_and_accumulate: view without embeddings");
        if (v.embeddings->rows() > 0) {
            if (d_lang && v.embeddings->cols() != d_lang) throw InvalidArgument("match_and_accumulate: embedding dims differ across views");
            d_lang = static_cast<int>(v.embeddings->cols());
        }
        if (v.camera < 0 || v.camera >= static_cast<int>(cameras.size())) throw InvalidArgument("match_and_accumulate: camera out of range");
        cameras[static_cast<std::size_t>(v.camera)].validate();
        if (v.raster.size() != cameras[static_cast<std::size_t>(v.camera)].pixel_count())
            throw InvalidArgument("match_and_accumulate: raster size differs from camera");
        for (std::uint16_t m : v.raster)
            if (m > v.embeddings->rows()) throw InvalidArgument("match_and_accumulate: mask id without an embedding");
    }
    std::vector<std::vector<Association>> per_view(views.size());

#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        const auto& v = views[vi];
        const auto w = compute_weights(scene, cameras[static_cast<std::size_t>(v.camera)]);
        const FeatureMap fm = composite(w, scene.features);
        const RowMatrix cov = label_coverage(w, labels, num_instances);
        const auto hw = w.pixels();
        const int num_masks = static_cast<int>(v.embeddings->rows());
        const int d = static_cast<int>(fm.values.cols());

        std::vector<Index> sil_n(static_cast<std::size_t>(num_instances), 0);
        std::vector<Index> mask_n(static_cast<std::size_t>(num_masks) + 1, 0);
        RowMatrix inst_sum = RowMatrix::Zero(num_instances, d);
        RowMatrix mask_sum = RowMatrix::Zero(num_masks + 1, d);
        RowMatrix inter = RowMatrix::Zero(num_instances, num_masks + 1);
        for (std::size_t p = 0; p < hw; ++p) {
            const int m = v.raster[p];
            const auto pe = static_cast<Eigen::Index>(p);
            if (m > 0) {
                ++mask_n[static_cast<std::size_t>(m)];
                mask_sum.row(m) += fm.values.row(pe);
            }
            for (int k = 0; k < num_instances; ++k) {
                if (!(cov(pe, k) > 0.5)) continue;
                ++sil_n[static_cast<std::size_t>(k)];
                inst_sum.row(k) += fm.values.row(pe);
                if (m > 0) inter(k, m) += 1.0;
            }
        }
        for (int k = 0; k < num_instances; ++k) {
            if (sil_n[static_cast<std::size_t>(k)] == 0) continue;
            const Eigen::VectorXd fk = inst_sum.row(k).transpose() / static_cast<double>(sil_n[static_cast<std::size_t>(k)]);
            int best = 0;
            double best_s = -1.0;
            for (int m = 1; m <= num_masks; ++m) {
                if (mask_n[static_cast<std::size_t>(m)] == 0) continue;
                const double uni = static_cast<double>(sil_n[static_cast<std::size_t>(k)] + mask_n[static_cast<std::size_t>(m)]) - inter(k, m);
                const double iou = inter(k, m) / uni;
                const Eigen::VectorXd fj = mask_sum.row(m).transpose() / static_cast<double>(mask_n[static_cast<std::size_t>(m)]);
                const double s = score_from_parts(iou, semantic_factor(fk, fj));
                if (s > best_s) {
                    best_s = s;
                    best = m;
                }
            }
            if (best > 0 && best_s > params.min_score) per_view[vi].push_back({static_cast<int>(vi), k, best, best_s});
        }
    }

    SemanticTable t;
    t.embeddings = RowMatrix::Zero(num_instances, d_lang);
    t.match_count.assign(static_cast<std::size_t>(num_instances), 0);
    for (std::size_t vi = 0; vi < views.size(); ++vi)
        for (const auto& a : per_view[vi]) {
            t.embeddings.row(a.instance) += views[vi].embeddings->row(a.mask_id - 1);
            ++t.match_count[static_cast<std::size_t>(a.instance)];
            if (log) log->push_back(a);
        }
    for (int k = 0; k < num_instances; ++k) {
        const int c = t.match_count[static_cast<std::size_t>(k)];
        if (c == 0) continue;
        const Eigen::RowVectorXd mean = t.embeddings.row(k) / static_cast<double>(c);
        const double nrm = mean.norm();
        t.embeddings.row(k) = nrm > 0.0 ? Eigen::RowVectorXd(mean / nrm) : Eigen::RowVectorXd::Zero(d_lang);
    }
    return t;
}

struct QueryMode {
    enum Kind { argmax, threshold } kind = argmax;
    double threshold_value = 0.5;

    static QueryMode parse(const std::string& s) {
        if (s == "argmax") return {};
        const std::string prefix = "threshold:";
        if (s.rfind(prefix, 0) == 0) {
            std::size_t used = 0;
            const std::string num = s.substr(prefix.size());
            double t = 0.0;
            try {
                t = std::stod(num, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != num.size()) throw InvalidArgument("query mode: bad threshold in '" + s + "'");
            return {threshold, t};
        }
        throw InvalidArgument("query mode must be 'argmax' or 'threshold:<t>', got '" + s + "'");
    }
};

struct QueryResult {
    std::vector<Index> gaussians;    // ascending
    std::vector<Index> instances;    // selected instance ids, ascending
    std::vector<double> similarity;  // per instance; NaN when unmatched
    bool empty_table = false;
};

/// Gaussians whose instance embedding matches the query. Unmatched
/// instances and noise Gaussians are never selected.
inline QueryResult text_query(const SemanticTable& table, std::span<const Index> labels, const Eigen::VectorXd& query,
                              const QueryMode& mode) {
    if (table.size() > 0 && query.size() != table.language_dim())
        throw InvalidArgument("text_query: query dim differs from the table");
    QueryResult r;
    r.similarity.assign(static_cast<std::size_t>(table.size()), std::nan(""));
    const double qn = query.norm();
    int best = -1;
    for (int k = 0; k < table.size(); ++k) {
        if (table.match_count[static_cast<std::size_t>(k)] == 0) continue;
        const double s = qn > 0.0 ? table.embeddings.row(k).dot(query) / qn : 0.0;
        r.similarity[static_cast<std::size_t>(k)] = s;
        if (mode.kind == QueryMode::threshold && s >= mode.threshold_value) r.instances.push_back(k);
        if (best < 0 || s > r.similarity[static_cast<std::size_t>(best)]) best = k;
    }
    if (best < 0) {
        r.empty_table = true;
        return r;
    }
    if (mode.kind == QueryMode::argmax) r.instances.push_back(best);
    std::vector<char> take(static_cast<std::size_t>(table.size()), 0);
    for (Index k : r.instances) take[static_cast<std::size_t>(k)] = 1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Index l = labels[i];
        if (l >= 0 && l < table.size() && take[static_cast<std::size_t>(l)]) r.gaussians.push_back(static_cast<Index>(i));
    }
    return r;
}

inline nlohmann::ordered_json semantic_table_to_json(const SemanticTable& t) {
    nlohmann::ordered_json j;
    j["num_instances"] = t.size();
    j["language_dim"] = t.language_dim();
    j["instances"] = nlohmann::ordered_json::array();
    for (int k = 0; k < t.size(); ++k) {
        nlohmann::ordered_json e;
        e["id"] = k;
        e["match_count"] = t.match_count[static_cast<std::size_t>(k)];
        std::vector<double> v(t.embeddings.row(k).data(), t.embeddings.row(k).data() + t.embeddings.cols());
        e["embedding"] = v;
        j["instances"].push_back(e);
    }
    return j;
}

inline SemanticTable semantic_table_from_json(const nlohmann::json& j) {
    SemanticTable t;
    const int n = j.at("num_instances").get<int>();
    const int d = j.at("language_dim").get<int>();
    const auto& inst = j.at("instances");
    if (static_cast<int>(inst.size()) != n) throw SchemaError("semantic table: instance count differs from num_instances");
    t.embeddings = RowMatrix::Zero(n, d);
    t.match_count.assign(static_cast<std::size_t>(n), 0);
    for (const auto& e : inst) {
        const int k = e.at("id").get<int>();
        if (k < 0 || k >= n) throw SchemaError("semantic table: instance id out of range");
        const auto v = e.at("embedding").get<std::vector<double>>();
        if (static_cast<int>(v.size()) != d) throw SchemaError("semantic table: embedding length differs from language_dim");
        for (int c = 0; c < d; ++c) t.embeddings(k, c) = v[static_cast<std::size_t>(c)];
        t.match_count[static_cast<std::size_t>(k)] = e.at("match_count").get<int>();
    }
    return t;
}

}  // namespace cags
