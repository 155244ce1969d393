#pragma once

// HDBSCAN over dense feature vectors: core distances, mutual-reachability
// MST (Prim), single-linkage hierarchy, condensed tree and excess-of-mass
// cluster selection. Exact and O(N^2 d); meant for scene-scale N.

#include "cags/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

namespace cags {

/// Per-channel z-score over rows; constant channels map to 0.
inline RowMatrix standardize_features(const RowMatrix& x) {
    if (x.rows() < 2) throw InvalidArgument("standardize_features: need at least 2 rows");
    RowMatrix z(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const auto col = x.col(c);
        if (col.maxCoeff() == col.minCoeff()) {
            z.col(c).setZero();
            continue;
        }
        const double mean = col.mean();
        const double sd = std::sqrt((col.array() - mean).square().mean());
        z.col(c) = (col.array() - mean) / sd;
    }
    return z;
}

inline int default_min_cluster_size(Index n) { return std::max(10, static_cast<int>(n / 200)); }

struct MstEdge {
    Index a = 0;
    Index b = 0;
    double weight = 0.0;
};

struct LinkageRow {
    Index left = 0;
    Index right = 0;
    double distance = 0.0;
    Index size = 0;
};

struct CondensedEdge {
    Index parent = 0;  // cluster id (>= N)
    Index child = 0;   // point id (< N) or cluster id
    double lambda = 0.0;
    Index child_size = 0;
};

struct ClusterResult {
    std::vector<Index> labels;        // -1 noise, else 0..C-1
    std::vector<double> stability;    // per output cluster
    std::vector<Index> sizes;         // per output cluster
    int num_clusters = 0;
    bool degenerate = false;          // N < min_cluster_size: everything is noise

    double noise_fraction() const {
        if (labels.empty()) return 0.0;
        return static_cast<double>(std::count(labels.begin(), labels.end(), Index{-1})) / static_cast<double>(labels.size());
    }
};

namespace detail {

inline double row_distance(const RowMatrix& x, Index i, Index j) { return (x.row(i) - x.row(j)).norm(); }

}  // namespace detail

/// Distance to the `min_samples`-th nearest point, the point itself counting
/// as the first.
inline std::vector<double> core_distances(const RowMatrix& x, int min_samples) {
    const auto n = static_cast<Index>(x.rows());
    if (min_samples < 1 || min_samples > n) throw InvalidArgument("core_distances: min_samples must be in [1, N]");
    std::vector<double> core(static_cast<std::size_t>(n));
#pragma omp parallel
    {
        std::vector<double> d(static_cast<std::size_t>(n));
#pragma omp for schedule(static)
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < n; ++j) d[static_cast<std::size_t>(j)] = detail::row_distance(x, i, j);
            d[static_cast<std::size_t>(i)] = 0.0;
            std::nth_element(d.begin(), d.begin() + (min_samples - 1), d.end());
            core[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(min_samples - 1)];
        }
    }
    return core;
}

/// Prim's algorithm on max(core_a, core_b, d(a,b)), started at point 0.
/// Among equal candidate weights the lowest point index joins first.
/// Edges are returned in insertion order.
inline std::vector<MstEdge> mutual_reachability_mst(const RowMatrix& x, const std::vector<double>& core) {
    const auto n = static_cast<Index>(x.rows());
    std::vector<MstEdge> edges;
    if (n < 2) return edges;
    edges.reserve(static_cast<std::size_t>(n - 1));
    std::vector<char> in_tree(static_cast<std::size_t>(n), 0);
    std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<Index> source(static_cast<std::size_t>(n), 0);
    Index current = 0;
    in_tree[0] = 1;
    for (Index step = 1; step < n; ++step) {
        const double cc = core[static_cast<std::size_t>(current)];
#pragma omp parallel for schedule(static)
        for (Index j = 0; j < n; ++j) {
            if (in_tree[static_cast<std::size_t>(j)]) continue;
            const double mr = std::max({cc, core[static_cast<std::size_t>(j)], detail::row_distance(x, current, j)});
            if (mr < best[static_cast<std::size_t>(j)]) {
                best[static_cast<std::size_t>(j)] = mr;
                source[static_cast<std::size_t>(j)] = current;
            }
        }
        Index next = -1;
        for (Index j = 0; j < n; ++j)
            if (!in_tree[static_cast<std::size_t>(j)] && (next < 0 || best[static_cast<std::size_t>(j)] < best[static_cast<std::size_t>(next)]))
                next = j;
        edges.push_back({source[static_cast<std::size_t>(next)], next, best[static_cast<std::size_t>(next)]});
        in_tree[static_cast<std::size_t>(next)] = 1;
        current = next;
    }
    return edges;
}

inline double mst_weight(const std::vector<MstEdge>& edges) {
    double w = 0.0;
    for (const auto& e : edges) w += e.weight;
    return w;
}

/// Single-linkage dendrogram: edges merged in ascending weight (stable),
/// new clusters numbered N, N+1, ...
inline std::vector<LinkageRow> single_linkage(std::vector<MstEdge> edges, Index n) {
    std::stable_sort(edges.begin(), edges.end(), [](const MstEdge& a, const MstEdge& b) { return a.weight < b.weight; });
    std::vector<Index> parent(static_cast<std::size_t>(2 * n - 1));
    std::iota(parent.begin(), parent.end(), Index{0});
    std::vector<Index> size(static_cast<std::size_t>(2 * n - 1), 1);
    auto find = [&](Index v) {
        Index r = v;
        while (parent[static_cast<std::size_t>(r)] != r) r = parent[static_cast<std::size_t>(r)];
        while (parent[static_cast<std::size_t>(v)] != r) {
            const Index nx = parent[static_cast<std::size_t>(v)];
            parent[static_cast<std::size_t>(v)] = r;
            v = nx;
        }
        return r;
    };
    std::vector<LinkageRow> rows;
    rows.reserve(edges.size());
    Index next = n;
    for (const auto& e : edges) {
        const Index a = find(e.a), b = find(e.b);
        const Index s = size[static_cast<std::size_t>(a)] + size[static_cast<std::size_t>(b)];
        rows.push_back({a, b, e.weight, s});
        parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(b)] = next;
        size[static_cast<std::size_t>(next)] = s;
        ++next;
    }
    return rows;
}

/// Condenses the dendrogram: a split creates two child clusters only when
/// both sides hold at least `min_cluster_size` points, otherwise the small
/// side's points fall out of the surviving cluster at that lambda.
inline std::vector<CondensedEdge> condense_tree(const std::vector<LinkageRow>& linkage, Index n, int min_cluster_size) {
    std::vector<CondensedEdge> out;
    if (linkage.empty()) return out;
    const Index root = 2 * n - 2;
    auto node_size = [&](Index v) { return v < n ? Index{1} : linkage[static_cast<std::size_t>(v - n)].size; };
    auto leaves_of = [&](Index v, std::vector<Index>& acc) {
        std::vector<Index> stack{v};
        while (!stack.empty()) {
            const Index u = stack.back();
            stack.pop_back();
            if (u < n) {
                acc.push_back(u);
                continue;
            }
            const auto& r = linkage[static_cast<std::size_t>(u - n)];
            stack.push_back(r.right);
            stack.push_back(r.left);
        }
    };
    std::vector<Index> relabel(static_cast<std::size_t>(root + 1), -1);
    relabel[static_cast<std::size_t>(root)] = n;
    Index next_label = n + 1;
    // Breadth-first over the dendrogram, skipping subtrees that fell out.
    std::vector<Index> queue{root};
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
        const Index node = queue[qi];
        if (node < n) continue;
        const auto& r = linkage[static_cast<std::size_t>(node - n)];
        const double lambda = r.distance > 0.0 ? 1.0 / r.distance : std::numeric_limits<double>::infinity();
        const Index parent = relabel[static_cast<std::size_t>(node)];
        const Index ls = node_size(r.left), rs = node_size(r.right);
        auto fall_out = [&](Index sub) {
            std::vector<Index> pts;
            leaves_of(sub, pts);
            for (Index p : pts) out.push_back({parent, p, lambda, 1});
        };
        if (ls >= min_cluster_size && rs >= min_cluster_size) {
            for (Index c : {r.left, r.right}) {
                relabel[static_cast<std::size_t>(c)] = next_label++;
                out.push_back({parent, relabel[static_cast<std::size_t>(c)], lambda, node_size(c)});
                queue.push_back(c);
            }
        } else if (ls < min_cluster_size && rs < min_cluster_size) {
            fall_out(r.left);
            fall_out(r.right);
        } else if (ls < min_cluster_size) {
            relabel[static_cast<std::size_t>(r.right)] = parent;
            fall_out(r.left);
            queue.push_back(r.right);
        } else {
            relabel[static_cast<std::size_t>(r.left)] = parent;
            fall_out(r.right);
            queue.push_back(r.left);
        }
    }
    return out;
}

/// Excess-of-mass selection over the condensed tree. The root competes only
/// when `allow_single_cluster` is set; if it wins, every point joins it.
/// Labels are renamed so cluster ids follow the order of each cluster's
/// smallest member index.
inline ClusterResult extract_clusters(const std::vector<CondensedEdge>& tree, Index n, bool allow_single_cluster = false) {
    ClusterResult res;
    res.labels.assign(static_cast<std::size_t>(n), -1);
    if (tree.empty()) return res;
    Index max_cluster = n;
    for (const auto& e : tree) max_cluster = std::max({max_cluster, e.parent, e.child});
    const auto nc = static_cast<std::size_t>(max_cluster - n + 1);
    std::vector<double> birth(nc, 0.0), stability(nc, 0.0);
    std::vector<std::vector<Index>> children(nc);
    for (const auto& e : tree)
        if (e.child >= n) {
            birth[static_cast<std::size_t>(e.child - n)] = e.lambda;
            children[static_cast<std::size_t>(e.parent - n)].push_back(e.child);
        }
    for (const auto& e : tree)
        stability[static_cast<std::size_t>(e.parent - n)] += (e.lambda - birth[static_cast<std::size_t>(e.parent - n)]) * static_cast<double>(e.child_size);

    std::vector<char> selected(nc, 0);
    std::vector<double> subtree = stability;
    // Children always carry larger ids than their parents.
    const std::size_t lowest = allow_single_cluster ? 0 : 1;
    for (std::size_t c = nc; c-- > lowest;) {
        double child_sum = 0.0;
        for (Index ch : children[c]) child_sum += subtree[static_cast<std::size_t>(ch - n)];
        if (!children[c].empty() && child_sum > stability[c]) {
            subtree[c] = child_sum;
        } else {
            selected[c] = 1;
            std::vector<Index> stack(children[c].begin(), children[c].end());
            while (!stack.empty()) {
                const Index u = stack.back();
                stack.pop_back();
                selected[static_cast<std::size_t>(u - n)] = 0;
                for (Index ch : children[static_cast<std::size_t>(u - n)]) stack.push_back(ch);
            }
        }
    }
    // Every point belongs to the innermost condensed cluster it fell out of;
    // climb to the selected ancestor, if any.
    std::vector<Index> cluster_parent(nc, -1);
    for (const auto& e : tree)
        if (e.child >= n) cluster_parent[static_cast<std::size_t>(e.child - n)] = e.parent;
    std::vector<Index> owner(nc, -1);
    for (std::size_t c = 0; c < nc; ++c) {
        Index u = static_cast<Index>(c) + n;
        while (u >= 0 && !selected[static_cast<std::size_t>(u - n)]) u = cluster_parent[static_cast<std::size_t>(u - n)];
        owner[c] = u;
    }
    std::vector<Index> raw(static_cast<std::size_t>(n), -1);
    for (const auto& e : tree)
        if (e.child < n) raw[static_cast<std::size_t>(e.child)] = owner[static_cast<std::size_t>(e.parent - n)];

    std::map<Index, Index> rename;
    for (Index i = 0; i < n; ++i) {
        const Index c = raw[static_cast<std::size_t>(i)];
        if (c < 0) continue;
        auto it = rename.find(c);
        if (it == rename.end()) {
            const auto id = static_cast<Index>(rename.size());
            rename.emplace(c, id);
            res.stability.push_back(stability[static_cast<std::size_t>(c - n)]);
            res.sizes.push_back(0);
        }
        const Index id = rename[c];
        res.labels[static_cast<std::size_t>(i)] = id;
        ++res.sizes[static_cast<std::size_t>(id)];
    }
    res.num_clusters = static_cast<int>(rename.size());
    return res;
}

struct HdbscanParams {
    int min_cluster_size = 0;  // 0 = max(10, floor(0.005 N))
    int min_samples = 0;       // 0 = min_cluster_size
    bool allow_single_cluster = false;

    HdbscanParams resolved(Index n) const {
        HdbscanParams p = *this;
        if (p.min_cluster_size <= 0) p.min_cluster_size = default_min_cluster_size(n);
        if (p.min_samples <= 0) p.min_samples = p.min_cluster_size;
        return p;
    }
};

inline ClusterResult hdbscan(const RowMatrix& points, HdbscanParams params = {}) {
    const auto n = static_cast<Index>(points.rows());
    params = params.resolved(n);
    if (params.min_cluster_size < 2) throw InvalidArgument("hdbscan: min_cluster_size must be >= 2");
    if (!all_finite(points)) throw InvalidArgument("hdbscan: points contain non-finite values");
    if (n < params.min_cluster_size || n < 2) {
        ClusterResult r;
        r.labels.assign(static_cast<std::size_t>(n), -1);
        r.degenerate = true;
        return r;
    }
    const int ms = std::min<Index>(params.min_samples, n);
    const auto core = core_distances(points, ms);
    const auto mst = mutual_reachability_mst(points, core);
    const auto link = single_linkage(mst, n);
    const auto tree = condense_tree(link, n, params.min_cluster_size);
    return extract_clusters(tree, n, params.allow_single_cluster);
}

}  // namespace cags
