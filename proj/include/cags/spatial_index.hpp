#pragma once

// Anchor selection and one-time neighbourhood precomputation over frozen
// Gaussian positions. All queries are exact; the hash grid only prunes the
// candidate set. Ties are always resolved towards the lowest index.

#include "cags/binary_io.hpp"
#include "cags/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cags {

inline constexpr int kDefaultNeighbors = 16;
inline constexpr double kDefaultAnchorRatio = 0.1;
inline constexpr double kDefaultCellMultiple = 2.0;

inline Index anchor_count(Index n, double ratio) {
    return std::max<Index>(1, static_cast<Index>(std::floor(ratio * static_cast<double>(n))));
}

inline double squared_distance(const Points3& a, Index i, const Points3& b, Index j) {
    const double dx = a(i, 0) - b(j, 0);
    const double dy = a(i, 1) - b(j, 1);
    const double dz = a(i, 2) - b(j, 2);
    return dx * dx + dy * dy + dz * dz;
}

/// Greedy farthest point sampling starting from `start_index`.
inline std::vector<Index> fps_sample(const Points3& positions, double ratio, Index start_index = 0) {
    const Index n = static_cast<Index>(positions.rows());
    if (n == 0) throw InvalidArgument("fps_sample: empty position set");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidArgument("fps_sample: ratio must be in (0, 1]");
    if (start_index < 0 || start_index >= n) throw InvalidArgument("fps_sample: start_index out of range");
    const Index m = anchor_count(n, ratio);

    std::vector<double> xs(static_cast<std::size_t>(n)), ys(xs.size()), zs(xs.size());
    for (Index i = 0; i < n; ++i) {
        xs[static_cast<std::size_t>(i)] = positions(i, 0);
        ys[static_cast<std::size_t>(i)] = positions(i, 1);
        zs[static_cast<std::size_t>(i)] = positions(i, 2);
    }
    // Squared distance to the selected set; -1 marks already selected points.
    std::vector<double> mind(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(m));
    Index last = start_index;
    out.push_back(last);
    mind[static_cast<std::size_t>(last)] = -1.0;

    double* md = mind.data();
    const double* px = xs.data();
    const double* py = ys.data();
    const double* pz = zs.data();
    for (Index s = 1; s < m; ++s) {
        const double qx = px[last], qy = py[last], qz = pz[last];
        double best = -2.0;
        Index best_i = -1;
#pragma omp parallel
        {
            double lb = -2.0;
            Index li = -1;
#pragma omp for schedule(static) nowait
            for (Index i = 0; i < n; ++i) {
                const double dx = px[i] - qx, dy = py[i] - qy, dz = pz[i] - qz;
                const double d2 = dx * dx + dy * dy + dz * dz;
                double v = md[i];
                if (d2 < v) v = md[i] = d2;
                if (v > lb) {
                    lb = v;
                    li = i;
                }
            }
#pragma omp critical(cags_fps_reduce)
            {
                if (li >= 0 && (lb > best || (lb == best && li < best_i))) {
                    best = lb;
                    best_i = li;
                }
            }
        }
        last = best_i;
        out.push_back(last);
        md[last] = -1.0;
    }
    return out;
}

/// Uniform hash grid over a point set. Cells are keyed by packed integer
/// coordinates; each occupied cell maps to a contiguous run of point slots.
class SpatialHashGrid {
public:
    using Neighbor = std::pair<double, Index>;  // (squared distance, id)

    /// `ids[j]` is the external id reported (and used for tie-breaking) for row j.
    SpatialHashGrid(const Points3& points, std::span<const Index> ids, double cell_size)
        : cell_(cell_size) {
        const Index n = static_cast<Index>(points.rows());
        if (n == 0) throw InvalidArgument("SpatialHashGrid: empty point set");
        if (!(cell_size > 0.0) || !std::isfinite(cell_size)) throw InvalidArgument("SpatialHashGrid: bad cell size");
        origin_ = points.colwise().minCoeff().transpose();
        const Eigen::Vector3d extent = points.colwise().maxCoeff().transpose() - origin_;
        // Keep every axis within the 21-bit key range.
        const double max_extent = extent.maxCoeff();
        if (max_extent / cell_ > double((1 << 20) - 2)) cell_ = max_extent / double((1 << 20) - 2);
        for (int a = 0; a < 3; ++a) dims_[a] = static_cast<std::int64_t>(std::floor(extent[a] / cell_)) + 1;

        std::vector<std::pair<std::uint64_t, Index>> keyed(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
            const auto c = cell_of(points.row(j).transpose());
            keyed[static_cast<std::size_t>(j)] = {pack(c[0], c[1], c[2]), j};
        }
        std::sort(keyed.begin(), keyed.end());
        xs_.resize(keyed.size());
        ys_.resize(keyed.size());
        zs_.resize(keyed.size());
        ids_.resize(keyed.size());
        cells_.reserve(keyed.size());
        for (std::size_t s = 0; s < keyed.size(); ++s) {
            const Index j = keyed[s].second;
            xs_[s] = points(j, 0);
            ys_[s] = points(j, 1);
            zs_[s] = points(j, 2);
            ids_[s] = ids.empty() ? j : ids[static_cast<std::size_t>(j)];
            auto [it, inserted] = cells_.try_emplace(keyed[s].first, static_cast<Index>(s), static_cast<Index>(s + 1));
            if (!inserted) it->second.second = static_cast<Index>(s + 1);
        }
    }

    double cell_size() const { return cell_; }
    std::size_t occupied_cells() const { return cells_.size(); }

    /// The k nearest points to q ordered by (squared distance, id), skipping `exclude_id`.
    void knn(const Eigen::Vector3d& q, int k, Index exclude_id, std::vector<Neighbor>& best) const {
        best.clear();
        if (k <= 0) return;
        const auto c = cell_of(q);
        std::int64_t r_max = 0;
        for (int a = 0; a < 3; ++a)
            r_max = std::max({r_max, std::abs(c[a]), std::abs(dims_[a] - 1 - c[a])});
        auto scan = [&](Index b, Index e) {
            for (Index s = b; s < e; ++s) {
                const Index id = ids_[static_cast<std::size_t>(s)];
                if (id == exclude_id) continue;
                const double dx = xs_[static_cast<std::size_t>(s)] - q[0];
                const double dy = ys_[static_cast<std::size_t>(s)] - q[1];
                const double dz = zs_[static_cast<std::size_t>(s)] - q[2];
                const Neighbor cand{dx * dx + dy * dy + dz * dz, id};
                if (static_cast<int>(best.size()) < k) {
                    best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
                } else if (cand < best.back()) {
                    best.pop_back();
                    best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
                }
            }
        };
        const auto slots = static_cast<double>(ids_.size());
        for (std::int64_t r = 0; r <= r_max; ++r) {
            // Sparse outliers can make rings far larger than the point set;
            // past that point a linear scan is cheaper and still exact.
            const double ring_cells = r == 0 ? 1.0 : 24.0 * double(r) * double(r) + 2.0;
            if (ring_cells > slots) {
                best.clear();
                scan(0, static_cast<Index>(ids_.size()));
                return;
            }
            visit_ring(c, r, scan);
            if (static_cast<int>(best.size()) == k) {
                // Anything not yet visited lies outside the box of rings 0..r.
                double bound = std::numeric_limits<double>::infinity();
                for (int a = 0; a < 3; ++a) {
                    const double lo = origin_[a] + static_cast<double>(c[a] - r) * cell_;
                    const double hi = origin_[a] + static_cast<double>(c[a] + r + 1) * cell_;
                    bound = std::min({bound, q[a] - lo, hi - q[a]});
                }
                bound -= 1e-9 * cell_;
                if (bound > 0.0 && best.back().first < bound * bound) return;
            }
        }
    }

private:
    std::array<std::int64_t, 3> cell_of(const Eigen::Vector3d& p) const {
        std::array<std::int64_t, 3> c{};
        for (int a = 0; a < 3; ++a) c[a] = static_cast<std::int64_t>(std::floor((p[a] - origin_[a]) / cell_));
        return c;
    }

    static std::uint64_t pack(std::int64_t x, std::int64_t y, std::int64_t z) {
        return (static_cast<std::uint64_t>(x) << 42) | (static_cast<std::uint64_t>(y) << 21) |
               static_cast<std::uint64_t>(z);
    }

    template <typename F>
    void visit_cell(std::int64_t x, std::int64_t y, std::int64_t z, F&& f) const {
        if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
        auto it = cells_.find(pack(x, y, z));
        if (it != cells_.end()) f(it->second.first, it->second.second);
    }

    template <typename F>
    void visit_ring(const std::array<std::int64_t, 3>& c, std::int64_t r, F&& f) const {
        if (r == 0) {
            visit_cell(c[0], c[1], c[2], f);
            return;
        }
        for (std::int64_t dx = -r; dx <= r; ++dx) {
            for (std::int64_t dy = -r; dy <= r; ++dy) {
                const bool face = std::abs(dx) == r || std::abs(dy) == r;
                if (face) {
                    for (std::int64_t dz = -r; dz <= r; ++dz) visit_cell(c[0] + dx, c[1] + dy, c[2] + dz, f);
                } else {
                    visit_cell(c[0] + dx, c[1] + dy, c[2] - r, f);
                    visit_cell(c[0] + dx, c[1] + dy, c[2] + r, f);
                }
            }
        }
    }

    double cell_;
    Eigen::Vector3d origin_;
    std::array<std::int64_t, 3> dims_{};
    std::vector<double> xs_, ys_, zs_;
    std::vector<Index> ids_;
    std::unordered_map<std::uint64_t, std::pair<Index, Index>> cells_;
};

/// Median nearest-neighbour spacing of `points`, estimated from an evenly
/// strided subsample of at most `sample` query points against the full set.
inline double median_nn_spacing(const Points3& points, Index sample = 1000) {
    const Index n = static_cast<Index>(points.rows());
    if (n < 2) return 1.0;
    const Index stride = std::max<Index>(1, (n + sample - 1) / sample);
    std::vector<double> d;
    for (Index q = 0; q < n; q += stride) {
        double best = std::numeric_limits<double>::infinity();
        for (Index j = 0; j < n; ++j)
            if (j != q) best = std::min(best, squared_distance(points, q, points, j));
        d.push_back(std::sqrt(best));
    }
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    double med = *mid;
    if (!(med > 0.0)) {
        const double diag = (points.colwise().maxCoeff() - points.colwise().minCoeff()).norm();
        med = diag > 0.0 ? diag / std::cbrt(static_cast<double>(n)) : 1.0;
    }
    return med;
}

/// Row-major M x k neighbour table.
struct KnnTable {
    Index rows = 0;
    int k = 0;
    std::vector<Index> ids;
    std::span<const Index> row(Index m) const {
        return {ids.data() + static_cast<std::size_t>(m) * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
    }
};

/// Exact k nearest neighbours of every point among the others. `ids` (if
/// given) names each row externally and drives tie-breaking.
inline KnnTable build_knn_adjacency(const Points3& anchor_positions, int k, std::span<const Index> ids = {},
                                    double cell_multiple = kDefaultCellMultiple) {
    const Index m = static_cast<Index>(anchor_positions.rows());
    if (k < 1) throw InvalidArgument("build_knn_adjacency: k must be >= 1");
    if (m <= k)
        throw InvalidArgument("build_knn_adjacency: need more than k=" + std::to_string(k) + " anchors (at least " +
                              std::to_string(k + 1) + "), got " + std::to_string(m));
    if (!ids.empty() && static_cast<Index>(ids.size()) != m) throw InvalidArgument("build_knn_adjacency: ids size");
    const SpatialHashGrid grid(anchor_positions, ids, cell_multiple * median_nn_spacing(anchor_positions));
    KnnTable t;
    t.rows = m;
    t.k = k;
    t.ids.resize(static_cast<std::size_t>(m) * static_cast<std::size_t>(k));
#pragma omp parallel
    {
        std::vector<SpatialHashGrid::Neighbor> best;
#pragma omp for schedule(dynamic, 256)
        for (Index a = 0; a < m; ++a) {
            const Index self = ids.empty() ? a : ids[static_cast<std::size_t>(a)];
            grid.knn(anchor_positions.row(a).transpose(), k, self, best);
            for (int j = 0; j < k; ++j)
                t.ids[static_cast<std::size_t>(a) * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] =
                    best[static_cast<std::size_t>(j)].second;
        }
    }
    return t;
}

/// Exact nearest anchor (by id) for every position, searched over the anchor set only.
inline std::vector<Index> assign_nearest_anchor(const Points3& positions, std::span<const Index> anchors,
                                                const Points3& anchor_positions,
                                                double cell_multiple = kDefaultCellMultiple) {
    if (anchors.empty()) throw InvalidArgument("assign_nearest_anchor: empty anchor set");
    if (static_cast<Index>(anchors.size()) != anchor_positions.rows())
        throw InvalidArgument("assign_nearest_anchor: anchors and anchor_positions disagree");
    const Index n = static_cast<Index>(positions.rows());
    const SpatialHashGrid grid(anchor_positions, anchors, cell_multiple * median_nn_spacing(anchor_positions));
    std::vector<Index> out(static_cast<std::size_t>(n));
#pragma omp parallel
    {
        std::vector<SpatialHashGrid::Neighbor> best;
#pragma omp for schedule(dynamic, 1024)
        for (Index i = 0; i < n; ++i) {
            grid.knn(positions.row(i).transpose(), 1, -1, best);
            out[static_cast<std::size_t>(i)] = best.front().second;
        }
    }
    return out;
}

/// The precomputed anchor graph. `adjacency` and `nearest_anchor` hold
/// Gaussian indices (members of `anchors`).
struct AnchorGraph {
    Index num_gaussians = 0;
    int k = 0;
    double ratio = 0.0;
    std::vector<Index> anchors;
    std::vector<Index> adjacency;       // M * k
    std::vector<Index> nearest_anchor;  // N

    Index num_anchors() const { return static_cast<Index>(anchors.size()); }
    std::span<const Index> neighbors(Index m) const {
        return {adjacency.data() + static_cast<std::size_t>(m) * static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
    }

    /// Gaussian index -> anchor slot (position in `anchors`), -1 for non-anchors.
    std::vector<Index> anchor_slots() const {
        std::vector<Index> slot(static_cast<std::size_t>(num_gaussians), -1);
        for (Index m = 0; m < num_anchors(); ++m) slot[static_cast<std::size_t>(anchors[static_cast<std::size_t>(m)])] = m;
        return slot;
    }

    bool operator==(const AnchorGraph&) const = default;
};

inline Points3 gather_rows(const Points3& p, std::span<const Index> idx) {
    Points3 out(static_cast<Eigen::Index>(idx.size()), 3);
    for (std::size_t j = 0; j < idx.size(); ++j) out.row(static_cast<Eigen::Index>(j)) = p.row(idx[j]);
    return out;
}

struct PrecomputeOptions {
    double ratio = kDefaultAnchorRatio;
    int k = kDefaultNeighbors;
    Index start_index = 0;
    double cell_multiple = kDefaultCellMultiple;
};

inline AnchorGraph precompute(const GaussianScene& scene, const PrecomputeOptions& opt = {}) {
    if (!scene.geometry_frozen)
        throw PreconditionError("precompute: scene geometry is not frozen; the anchor graph is only valid for fixed positions");
    AnchorGraph g;
    g.num_gaussians = scene.size();
    g.k = opt.k;
    g.ratio = opt.ratio;
    g.anchors = fps_sample(scene.positions, opt.ratio, opt.start_index);
    const Points3 ap = gather_rows(scene.positions, g.anchors);
    g.adjacency = build_knn_adjacency(ap, opt.k, g.anchors, opt.cell_multiple).ids;
    g.nearest_anchor = assign_nearest_anchor(scene.positions, g.anchors, ap, opt.cell_multiple);
    return g;
}

/// Structural checks of a (possibly loaded) graph against a scene size.
inline void validate_graph(const AnchorGraph& g, Index num_gaussians) {
    if (g.num_gaussians != num_gaussians) throw InvalidArgument("graph was built for a different Gaussian count");
    const Index m = g.num_anchors();
    if (m < 1 || g.adjacency.size() != static_cast<std::size_t>(m) * static_cast<std::size_t>(g.k) ||
        g.nearest_anchor.size() != static_cast<std::size_t>(num_gaussians))
        throw InvalidArgument("graph array sizes are inconsistent");
    const auto slot = g.anchor_slots();
    for (Index a : g.anchors)
        if (a < 0 || a >= num_gaussians) throw InvalidArgument("graph anchor index out of range");
    for (Index a : g.adjacency)
        if (a < 0 || a >= num_gaussians || slot[static_cast<std::size_t>(a)] < 0)
            throw InvalidArgument("graph adjacency references a non-anchor");
    for (Index a : g.nearest_anchor)
        if (a < 0 || a >= num_gaussians || slot[static_cast<std::size_t>(a)] < 0)
            throw InvalidArgument("graph nearest_anchor references a non-anchor");
}

// Binary container: "CAGSGRPH", u32 version, u64 N, u64 M, u64 k, f64 ratio,
// then int32 arrays anchors[M], adjacency[M*k], nearest_anchor[N].
inline constexpr std::string_view kGraphMagic = "CAGSGRPH";
inline constexpr std::uint32_t kGraphVersion = 1;

inline std::vector<char> serialize_graph(const AnchorGraph& g) {
    io::ByteWriter w;
    w.put_bytes(kGraphMagic);
    w.put(kGraphVersion);
    w.put(static_cast<std::uint64_t>(g.num_gaussians));
    w.put(static_cast<std::uint64_t>(g.num_anchors()));
    w.put(static_cast<std::uint64_t>(g.k));
    w.put(g.ratio);
    w.put_span(std::span<const Index>(g.anchors));
    w.put_span(std::span<const Index>(g.adjacency));
    w.put_span(std::span<const Index>(g.nearest_anchor));
    return w.bytes();
}

inline AnchorGraph deserialize_graph(std::span<const char> bytes) {
    io::ByteReader r(bytes);
    if (r.get_bytes(kGraphMagic.size()) != kGraphMagic) throw ParseError("not an anchor graph file", 0);
    const auto version = r.get<std::uint32_t>();
    if (version != kGraphVersion) throw ParseError("unsupported graph version " + std::to_string(version), 8);
    AnchorGraph g;
    const auto n = r.get<std::uint64_t>();
    const auto m = r.get<std::uint64_t>();
    const auto k = r.get<std::uint64_t>();
    if (n > std::uint64_t(std::numeric_limits<Index>::max()) || m > n || k > m)
        throw ParseError("implausible graph header", r.position());
    g.num_gaussians = static_cast<Index>(n);
    g.k = static_cast<int>(k);
    g.ratio = r.get<double>();
    g.anchors.resize(m);
    g.adjacency.resize(m * k);
    g.nearest_anchor.resize(n);
    r.get_span(std::span<Index>(g.anchors));
    r.get_span(std::span<Index>(g.adjacency));
    r.get_span(std::span<Index>(g.nearest_anchor));
    validate_graph(g, g.num_gaussians);
    return g;
}

inline void save_graph(const AnchorGraph& g, const std::string& path) { io::write_file(path, serialize_graph(g)); }
inline AnchorGraph load_graph(const std::string& path) { return deserialize_graph(io::read_file(path)); }

}  // namespace cags
