#pragma once

// Contextual feature propagation over the anchor graph:
//
//   h_n      = standardize(detach(f_n) || detach(c_n))
//   a_m^0    = h_m
//   a_m^l+1  = ReLU(W1_l a_m^l + W2_l * sum_{n in N(m)} h_n)
//   f_final_i = f_i + standardize(a_{m*(i)}^L)
//
// The neighbour term re-reads the same static h_n at every layer.

#include "cags/binary_io.hpp"
#include "cags/spatial_index.hpp"

#include <cmath>
#include <random>
#include <string>
#include <span>
#include <vector>

namespace cags {

inline constexpr int kHiddenWidth = 16;
inline constexpr double kStandardizeEpsilon = 1e-10;
inline constexpr int kColorChannels = 3;

/// (v - mean) / (std + eps) over the entries of one vector, population std.
/// A constant vector maps to exactly zero.
template <typename Derived>
Eigen::VectorXd standardize(const Eigen::MatrixBase<Derived>& v, double eps = kStandardizeEpsilon) {
    const Eigen::Index n = v.size();
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    if (n == 0) return out;
    if ((v.array() == v(0)).all()) return out;
    const double mean = v.mean();
    const Eigen::VectorXd u = v.array() - mean;
    const double sd = std::sqrt(u.squaredNorm() / static_cast<double>(n));
    out = u / (sd + eps);
    return out;
}

/// Vector-Jacobian product of `standardize` at v. Zero for constant v,
/// matching the constant branch of the forward pass.
template <typename D1, typename D2>
Eigen::VectorXd standardize_backward(const Eigen::MatrixBase<D1>& v, const Eigen::MatrixBase<D2>& grad_out,
                                     double eps = kStandardizeEpsilon) {
    const Eigen::Index n = v.size();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
    if (n == 0 || (v.array() == v(0)).all()) return g;
    const double nd = static_cast<double>(n);
    const Eigen::VectorXd u = v.array() - v.mean();
    const double sd = std::sqrt(u.squaredNorm() / nd);
    const double s = sd + eps;
    const double gmean = grad_out.mean();
    const double gu = grad_out.dot(u);
    g = (grad_out.array() - gmean) / s - u.array() * (gu / (nd * sd * s * s));
    return g;
}

/// Learnable weights of the propagation network. Layer l maps an
/// in_l-wide anchor state (d+3 for l = 0, `hidden` afterwards) to `hidden`
/// channels, except the last layer which emits d channels. W2 always reads
/// the (d+3)-wide neighbour inputs.
struct PropagationNet {
    int num_layers = 2;
    int feature_dim = kDefaultFeatureDim;
    int hidden = kHiddenWidth;
    bool final_relu = true;
    double epsilon = kStandardizeEpsilon;
    std::vector<RowMatrix> w_self;   // W1 per layer
    std::vector<RowMatrix> w_neigh;  // W2 per layer

    int input_dim() const { return feature_dim + kColorChannels; }
    int layer_in(int l) const { return l == 0 ? input_dim() : hidden; }
    int layer_out(int l) const { return l == num_layers - 1 ? feature_dim : hidden; }

    /// Glorot-uniform initialisation, deterministic in `seed`.
    static PropagationNet init(int num_layers, int feature_dim, std::uint64_t seed, int hidden = kHiddenWidth,
                               bool final_relu = true) {
        if (num_layers < 0 || num_layers > 8) throw InvalidArgument("PropagationNet: num_layers must be in [0, 8]");
        if (feature_dim < 1 || hidden < 1) throw InvalidArgument("PropagationNet: widths must be positive");
        PropagationNet net;
        net.num_layers = num_layers;
        net.feature_dim = feature_dim;
        net.hidden = hidden;
        net.final_relu = final_relu;
        std::mt19937_64 rng(seed);
        auto glorot = [&](int rows, int cols) {
            const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::uniform_real_distribution<double> u(-lim, lim);
            RowMatrix w(rows, cols);
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
            return w;
        };
        for (int l = 0; l < num_layers; ++l) {
            net.w_self.push_back(glorot(net.layer_out(l), net.layer_in(l)));
            net.w_neigh.push_back(glorot(net.layer_out(l), net.input_dim()));
        }
        return net;
    }

    void validate() const {
        if (static_cast<int>(w_self.size()) != num_layers || static_cast<int>(w_neigh.size()) != num_layers)
            throw InvalidArgument("PropagationNet: layer count does not match weight list");
        for (int l = 0; l < num_layers; ++l) {
            const auto& a = w_self[static_cast<std::size_t>(l)];
            const auto& b = w_neigh[static_cast<std::size_t>(l)];
            if (a.rows() != layer_out(l) || a.cols() != layer_in(l))
                throw InvalidArgument("PropagationNet: W1 of layer " + std::to_string(l) + " has wrong shape");
            if (b.rows() != layer_out(l) || b.cols() != input_dim())
                throw InvalidArgument("PropagationNet: W2 of layer " + std::to_string(l) + " has wrong shape");
            if (!a.allFinite() || !b.allFinite()) throw InvalidArgument("PropagationNet: non-finite weights");
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (int l = 0; l < num_layers; ++l)
            n += static_cast<std::size_t>(w_self[static_cast<std::size_t>(l)].size() + w_neigh[static_cast<std::size_t>(l)].size());
        return n;
    }

    bool operator==(const PropagationNet& o) const {
        if (num_layers != o.num_layers || feature_dim != o.feature_dim || hidden != o.hidden ||
            final_relu != o.final_relu || epsilon != o.epsilon)
            return false;
        for (int l = 0; l < num_layers; ++l)
            if (w_self[static_cast<std::size_t>(l)] != o.w_self[static_cast<std::size_t>(l)] ||
                w_neigh[static_cast<std::size_t>(l)] != o.w_neigh[static_cast<std::size_t>(l)])
                return false;
        return true;
    }
};

struct NetGradients {
    std::vector<RowMatrix> w_self;
    std::vector<RowMatrix> w_neigh;

    static NetGradients zeros_like(const PropagationNet& net) {
        NetGradients g;
        for (int l = 0; l < net.num_layers; ++l) {
            g.w_self.push_back(RowMatrix::Zero(net.w_self[static_cast<std::size_t>(l)].rows(),
                                               net.w_self[static_cast<std::size_t>(l)].cols()));
            g.w_neigh.push_back(RowMatrix::Zero(net.w_neigh[static_cast<std::size_t>(l)].rows(),
                                                net.w_neigh[static_cast<std::size_t>(l)].cols()));
        }
        return g;
    }
};

/// Standardized, detached (feature || color) inputs for every Gaussian: N x (d+3).
inline RowMatrix build_inputs(const RowMatrix& features, const Points3& colors, double eps = kStandardizeEpsilon) {
    if (features.rows() != colors.rows()) throw InvalidArgument("build_inputs: features and colors disagree on N");
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    RowMatrix h(n, d + kColorChannels);
#pragma omp parallel for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd v(d + kColorChannels);
        v.head(d) = features.row(i).transpose();
        v.tail(kColorChannels) = colors.row(i).transpose();
        h.row(i) = standardize(v, eps).transpose();
    }
    return h;
}

inline RowMatrix build_inputs(const GaussianScene& scene, const AnchorGraph& graph, double eps = kStandardizeEpsilon) {
    if (graph.num_gaussians != scene.size()) throw InvalidArgument("build_inputs: graph does not match scene");
    return build_inputs(scene.features, scene.colors, eps);
}

/// Intermediates cached by the forward pass.
struct AggregateCache {
    RowMatrix neighbor_sum;            // M x (d+3), sum of neighbour h
    std::vector<RowMatrix> layer_in;   // a^l, M x in_l
    std::vector<RowMatrix> layer_pre;  // z^l, M x out_l
};

/// Runs the L-layer aggregation; `h` holds inputs for all N Gaussians.
/// Returns the M x d anchor features a^L in anchor-slot order.
inline RowMatrix aggregate(const RowMatrix& h, const AnchorGraph& graph, const PropagationNet& net,
                           AggregateCache* cache = nullptr) {
    net.validate();
    if (h.cols() != net.input_dim()) throw InvalidArgument("aggregate: input width does not match net (d+3)");
    if (h.rows() != graph.num_gaussians) throw InvalidArgument("aggregate: input rows do not match graph");
    const Index m = graph.num_anchors();
    const Eigen::Index din = h.cols();
    RowMatrix self(m, din);
    RowMatrix nsum = RowMatrix::Zero(m, din);
#pragma omp parallel for schedule(static)
    for (Index a = 0; a < m; ++a) {
        self.row(a) = h.row(graph.anchors[static_cast<std::size_t>(a)]);
        for (Index nb : graph.neighbors(a)) nsum.row(a) += h.row(nb);
    }
    RowMatrix state = std::move(self);
    if (cache) {
        cache->layer_in.clear();
        cache->layer_pre.clear();
    }
    for (int l = 0; l < net.num_layers; ++l) {
        const auto& w1 = net.w_self[static_cast<std::size_t>(l)];
        const auto& w2 = net.w_neigh[static_cast<std::size_t>(l)];
        RowMatrix z = state * w1.transpose() + nsum * w2.transpose();
        const bool relu = l < net.num_layers - 1 || net.final_relu;
        RowMatrix next = relu ? RowMatrix(z.cwiseMax(0.0)) : z;
        if (cache) {
            cache->layer_in.push_back(std::move(state));
            cache->layer_pre.push_back(std::move(z));
        }
        state = std::move(next);
    }
    if (cache) cache->neighbor_sum = std::move(nsum);
    return state;
}

/// f_final_i = f_i + standardize(anchor_features[slot(m*(i))]).
inline RowMatrix propagate_and_fuse(const RowMatrix& features, const AnchorGraph& graph,
                                    const RowMatrix& anchor_features, double eps = kStandardizeEpsilon) {
    if (features.rows() != graph.num_gaussians) throw InvalidArgument("propagate_and_fuse: features do not match graph");
    if (anchor_features.rows() != graph.num_anchors() || anchor_features.cols() != features.cols())
        throw InvalidArgument("propagate_and_fuse: anchor feature shape mismatch");
    const auto slot = graph.anchor_slots();
    const Index m = graph.num_anchors();
    RowMatrix normed(m, anchor_features.cols());
    for (Index a = 0; a < m; ++a) normed.row(a) = standardize(anchor_features.row(a).transpose(), eps).transpose();
    RowMatrix out = features;
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < graph.num_gaussians; ++i)
        out.row(i) += normed.row(slot[static_cast<std::size_t>(graph.nearest_anchor[static_cast<std::size_t>(i)])]);
    return out;
}

struct PropagationGradients {
    RowMatrix features;  // dL/df through the residual path only
    NetGradients net;
};

/// Forward/backward driver that keeps the intermediates between the two passes.
class Propagator {
public:
    /// `detached_source` (defaults to `features`) feeds the propagation
    /// inputs; gradients never flow into it.
    RowMatrix forward(const RowMatrix& features, const Points3& colors, const AnchorGraph& graph,
                      const PropagationNet& net, const RowMatrix* detached_source = nullptr) {
        net.validate();
        if (features.cols() != net.feature_dim) throw InvalidArgument("Propagator: feature dim differs from net");
        graph_ = &graph;
        net_ = &net;
        num_gaussians_ = features.rows();
        if (net.num_layers == 0) {
            has_forward_ = true;
            return features;
        }
        const RowMatrix h = build_inputs(detached_source ? *detached_source : features, colors, net.epsilon);
        anchor_out_ = aggregate(h, graph, net, &cache_);
        has_forward_ = true;
        return propagate_and_fuse(features, graph, anchor_out_, net.epsilon);
    }

    PropagationGradients backward(const RowMatrix& grad_final) const {
        if (!has_forward_) throw StateError("Propagator::backward called before forward");
        if (grad_final.rows() != num_gaussians_ || grad_final.cols() != net_->feature_dim)
            throw InvalidArgument("Propagator::backward: gradient shape mismatch");
        PropagationGradients out;
        out.features = grad_final;
        out.net = NetGradients::zeros_like(*net_);
        if (net_->num_layers == 0) return out;

        const AnchorGraph& g = *graph_;
        const Index m = g.num_anchors();
        const auto slot = g.anchor_slots();
        // Scatter per-Gaussian gradients onto their anchors in index order.
        RowMatrix grad_normed = RowMatrix::Zero(m, net_->feature_dim);
        for (Index i = 0; i < g.num_gaussians; ++i)
            grad_normed.row(slot[static_cast<std::size_t>(g.nearest_anchor[static_cast<std::size_t>(i)])]) += grad_final.row(i);
        RowMatrix grad_state(m, net_->feature_dim);
        for (Index a = 0; a < m; ++a)
            grad_state.row(a) =
                standardize_backward(anchor_out_.row(a).transpose(), grad_normed.row(a).transpose(), net_->epsilon).transpose();

        for (int l = net_->num_layers - 1; l >= 0; --l) {
            const auto ul = static_cast<std::size_t>(l);
            const bool relu = l < net_->num_layers - 1 || net_->final_relu;
            RowMatrix delta = grad_state;
            if (relu) delta = delta.cwiseProduct(RowMatrix((cache_.layer_pre[ul].array() > 0.0).cast<double>()));
            out.net.w_self[ul] = delta.transpose() * cache_.layer_in[ul];
            out.net.w_neigh[ul] = delta.transpose() * cache_.neighbor_sum;
            if (l > 0) grad_state = delta * net_->w_self[ul];
        }
        return out;
    }

    bool has_forward() const { return has_forward_; }

private:
    const AnchorGraph* graph_ = nullptr;
    const PropagationNet* net_ = nullptr;
    Eigen::Index num_gaussians_ = 0;
    bool has_forward_ = false;
    RowMatrix anchor_out_;
    AggregateCache cache_;
};

// Binary container: "CAGSNETW", u32 version, u32 L, u32 d, u32 hidden,
// u8 final_relu, f64 epsilon, then per layer W1 and W2 as
// (u32 rows, u32 cols, row-major f64 data).
inline constexpr std::string_view kNetMagic = "CAGSNETW";
inline constexpr std::uint32_t kNetVersion = 1;

inline std::vector<char> serialize_net(const PropagationNet& net) {
    net.validate();
    io::ByteWriter w;
    w.put_bytes(kNetMagic);
    w.put(kNetVersion);
    w.put(static_cast<std::uint32_t>(net.num_layers));
    w.put(static_cast<std::uint32_t>(net.feature_dim));
    w.put(static_cast<std::uint32_t>(net.hidden));
    w.put(static_cast<std::uint8_t>(net.final_relu ? 1 : 0));
    w.put(net.epsilon);
    auto put_matrix = [&](const RowMatrix& m) {
        w.put(static_cast<std::uint32_t>(m.rows()));
        w.put(static_cast<std::uint32_t>(m.cols()));
        w.put_span(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
    };
    for (int l = 0; l < net.num_layers; ++l) {
        put_matrix(net.w_self[static_cast<std::size_t>(l)]);
        put_matrix(net.w_neigh[static_cast<std::size_t>(l)]);
    }
    return w.bytes();
}

inline PropagationNet deserialize_net(std::span<const char> bytes) {
    io::ByteReader r(bytes);
    if (r.get_bytes(kNetMagic.size()) != kNetMagic) throw ParseError("not a propagation net file", 0);
    if (r.get<std::uint32_t>() != kNetVersion) throw ParseError("unsupported net version", 8);
    PropagationNet net;
    net.num_layers = static_cast<int>(r.get<std::uint32_t>());
    net.feature_dim = static_cast<int>(r.get<std::uint32_t>());
    net.hidden = static_cast<int>(r.get<std::uint32_t>());
    net.final_relu = r.get<std::uint8_t>() != 0;
    net.epsilon = r.get<double>();
    if (net.num_layers > 8 || net.feature_dim > 4096 || net.hidden > 4096) throw ParseError("implausible net header", r.position());
    auto get_matrix = [&] {
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        if (rows > 4096 || cols > 4096) throw ParseError("implausible matrix shape", r.position());
        RowMatrix m(rows, cols);
        r.get_span(std::span<double>(m.data(), static_cast<std::size_t>(m.size())));
        return m;
    };
    for (int l = 0; l < net.num_layers; ++l) {
        net.w_self.push_back(get_matrix());
        net.w_neigh.push_back(get_matrix());
    }
    net.validate();
    return net;
}

inline void save_net(const PropagationNet& net, const std::string& path) { io::write_file(path, serialize_net(net)); }
inline PropagationNet load_net(const std::string& path) { return deserialize_net(io::read_file(path)); }

}  // namespace cags
