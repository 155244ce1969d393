#include "test_util.hpp"

#include <gtest/gtest.h>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace cags;

namespace {

using Vec = std::vector<double>;

Vec plain_standardize(const Vec& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / double(v.size()));
    Vec out(v.size(), 0.0);
    if (sd == 0.0) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / (sd + kStandardizeEpsilon);
    return out;
}

Vec matvec(const RowMatrix& w, const Vec& x) {
    Vec y(static_cast<std::size_t>(w.rows()), 0.0);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) y[static_cast<std::size_t>(r)] += w(r, c) * x[static_cast<std::size_t>(c)];
    return y;
}

/// Loop-by-loop evaluation of the whole propagation: inputs, layers, nearest
/// anchor lookup, standardisation and the residual.
RowMatrix scripted_forward(const GaussianScene& s, const AnchorGraph& g, const PropagationNet& net) {
    const int d = s.feature_dim();
    std::vector<Vec> h(static_cast<std::size_t>(s.size()));
    for (Index i = 0; i < s.size(); ++i) {
        Vec v;
        for (int j = 0; j < d; ++j) v.push_back(s.features(i, j));
        for (int a = 0; a < 3; ++a) v.push_back(s.colors(i, a));
        h[static_cast<std::size_t>(i)] = plain_standardize(v);
    }
    std::vector<Vec> anchor_out;
    for (Index m = 0; m < g.num_anchors(); ++m) {
        Vec nsum(static_cast<std::size_t>(d + 3), 0.0);
        for (Index nb : g.neighbors(m))
            for (int c = 0; c < d + 3; ++c) nsum[static_cast<std::size_t>(c)] += h[static_cast<std::size_t>(nb)][static_cast<std::size_t>(c)];
        Vec state = h[static_cast<std::size_t>(g.anchors[static_cast<std::size_t>(m)])];
        for (int l = 0; l < net.num_layers; ++l) {
            Vec a = matvec(net.w_self[static_cast<std::size_t>(l)], state);
            const Vec b = matvec(net.w_neigh[static_cast<std::size_t>(l)], nsum);
            for (std::size_t r = 0; r < a.size(); ++r) {
                a[r] += b[r];
                if (l < net.num_layers - 1 || net.final_relu) a[r] = std::max(0.0, a[r]);
            }
            state = a;
        }
        anchor_out.push_back(state);
    }
    RowMatrix out = s.features;
    for (Index i = 0; i < s.size(); ++i) {
        Index slot = -1;
        for (Index m = 0; m < g.num_anchors(); ++m)
            if (g.anchors[static_cast<std::size_t>(m)] == g.nearest_anchor[static_cast<std::size_t>(i)]) slot = m;
        if (net.num_layers == 0) continue;
        const Vec z = plain_standardize(anchor_out[static_cast<std::size_t>(slot)]);
        for (int j = 0; j < d; ++j) out(i, j) += z[static_cast<std::size_t>(j)];
    }
    return out;
}

double weighted_sum(const RowMatrix& a, const RowMatrix& w) { return (a.array() * w.array()).sum(); }

RowMatrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0, 1);
    RowMatrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

}  // namespace

TEST(Standardize, Examples) {
    EXPECT_EQ(standardize(Eigen::Vector3d(3, 3, 3)), Eigen::Vector3d::Zero());
    const Eigen::VectorXd a = standardize(Eigen::Vector2d(1, -1));
    EXPECT_NEAR(a[0], 1.0, 1e-9);
    EXPECT_NEAR(a[1], -1.0, 1e-9);
    const Eigen::VectorXd b = standardize(Eigen::Vector2d(0, 2));
    EXPECT_NEAR(b[0], -1.0, 1e-9);
    EXPECT_NEAR(b[1], 1.0, 1e-9);
}

TEST(Standardize, JacobianMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0, 1);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd v(16), up(16);
        for (int i = 0; i < 16; ++i) {
            v[i] = g(rng);
            up[i] = g(rng);
        }
        const Eigen::VectorXd an = standardize_backward(v, up);
        for (int i = 0; i < 16; ++i) {
            const double h = 1e-6;
            Eigen::VectorXd p = v, m = v;
            p[i] += h;
            m[i] -= h;
            const double fd = (standardize(p).dot(up) - standardize(m).dot(up)) / (2 * h);
            EXPECT_NEAR(an[i], fd, 1e-6);
        }
    }
}

TEST(BuildInputs, Examples) {
    RowMatrix f(2, 2);
    f << 1, 1, 2, 0;
    Points3 c(2, 3);
    c << 1, 1, 1, 0, 0, 0;
    const RowMatrix h = build_inputs(f, c);
    EXPECT_EQ(h.row(0).cwiseAbs().maxCoeff(), 0.0);
    const double want[5] = {2, -0.5, -0.5, -0.5, -0.5};
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(h(1, j), want[j], 1e-9);
    EXPECT_THROW(build_inputs(f, Points3(3, 3)), InvalidArgument);
}

TEST(Aggregate, ZeroWeightsGiveZero) {
    const GaussianScene s = fixtures::random_scene(40, 4, 1);
    const AnchorGraph g = precompute(s, {.ratio = 0.25, .k = 3});
    PropagationNet net = PropagationNet::init(2, 4, 1);
    for (auto& w : net.w_self) w.setZero();
    for (auto& w : net.w_neigh) w.setZero();
    const RowMatrix out = aggregate(build_inputs(s, g), g, net);
    EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Aggregate, IsolatedAnchorFollowsSelfPath) {
    // One anchor, k clamped to zero: output is ReLU(W1 h) with W1 a padded identity.
    AnchorGraph g;
    g.num_gaussians = 1;
    g.k = 0;
    g.anchors = {0};
    g.nearest_anchor = {0};
    PropagationNet net = PropagationNet::init(1, 2, 0);
    net.w_self[0] = RowMatrix::Identity(2, 5);
    net.w_neigh[0].setZero();
    RowMatrix h(1, 5);
    h << 0.5, 2.0, 0.1, 0.2, 0.3;
    const RowMatrix out = aggregate(h, g, net);
    EXPECT_DOUBLE_EQ(out(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(out(0, 1), 2.0);
}

TEST(Aggregate, LineGraphMatchesScript) {
    // Three anchors on a line, each the neighbour of the next; d = 1 so W is 1 x 4.
    AnchorGraph g;
    g.num_gaussians = 3;
    g.k = 1;
    g.anchors = {0, 1, 2};
    g.adjacency = {1, 2, 1};
    g.nearest_anchor = {0, 1, 2};
    PropagationNet net = PropagationNet::init(1, 1, 0);
    net.w_self[0] = (RowMatrix(1, 4) << 0.5, -1.0, 0.25, 2.0).finished();
    net.w_neigh[0] = (RowMatrix(1, 4) << 1.0, 0.5, -0.5, 0.1).finished();
    RowMatrix h(3, 4);
    h << 1, 2, 3, 4, -1, 0, 1, 0.5, 2, -2, 0, 1;
    const RowMatrix out = aggregate(h, g, net);
    const Index nb[3] = {1, 2, 1};
    for (int m = 0; m < 3; ++m) {
        double z = 0;
        for (int c = 0; c < 4; ++c) z += net.w_self[0](0, c) * h(m, c) + net.w_neigh[0](0, c) * h(nb[m], c);
        EXPECT_NEAR(out(m, 0), std::max(0.0, z), 1e-12) << m;
    }
}

TEST(PropagateAndFuse, ZeroNetIsResidualIdentity) {
    const GaussianScene s = fixtures::random_scene(50, 6, 2);
    const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 4});
    PropagationNet net = PropagationNet::init(2, 6, 2);
    for (auto& w : net.w_self) w.setZero();
    for (auto& w : net.w_neigh) w.setZero();
    Propagator p;
    EXPECT_EQ(p.forward(s.features, s.colors, g, net), s.features);
}

TEST(PropagateAndFuse, SharedAnchorSharesContribution) {
    const GaussianScene s = fixtures::random_scene(60, 5, 3);
    const AnchorGraph g = precompute(s, {.ratio = 0.1, .k = 3});
    const PropagationNet net = PropagationNet::init(2, 5, 3);
    Propagator p;
    const RowMatrix delta = p.forward(s.features, s.colors, g, net) - s.features;
    for (Index i = 0; i < 60; ++i)
        for (Index j = i + 1; j < 60; ++j)
            if (g.nearest_anchor[static_cast<std::size_t>(i)] == g.nearest_anchor[static_cast<std::size_t>(j)])
                EXPECT_LT((delta.row(i) - delta.row(j)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PropagateAndFuse, MatchesScriptedEvaluation) {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const GaussianScene s = fixtures::random_scene(20, 6, seed);
        const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 3});
        ASSERT_EQ(g.num_anchors(), 4);
        for (bool final_relu : {true, false}) {
            const PropagationNet net = PropagationNet::init(2, 6, seed, kHiddenWidth, final_relu);
            Propagator p;
            const RowMatrix got = p.forward(s.features, s.colors, g, net);
            EXPECT_LT((got - scripted_forward(s, g, net)).cwiseAbs().maxCoeff(), 1e-10);
        }
    }
}

TEST(PropagateAndFuse, ZeroLayersIsIdentity) {
    const GaussianScene s = fixtures::random_scene(30, 4, 4);
    const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 3});
    const PropagationNet net = PropagationNet::init(0, 4, 4);
    Propagator p;
    EXPECT_EQ(p.forward(s.features, s.colors, g, net), s.features);
    const auto grads = p.backward(RowMatrix::Ones(30, 4));
    EXPECT_EQ(grads.features, RowMatrix::Ones(30, 4));
    EXPECT_EQ(net.parameter_count(), 0u);
}

TEST(PropagateAndFuse, PermutationEquivariance) {
    const GaussianScene s = fixtures::random_scene(40, 4, 6);
    const AnchorGraph g = precompute(s, {.ratio = 0.25, .k = 3});
    const PropagationNet net = PropagationNet::init(2, 4, 6);
    std::vector<Index> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(6));
    std::vector<Index> inv(40);
    for (Index i = 0; i < 40; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    // New row i holds old Gaussian perm[i].
    RowMatrix pf(40, 4);
    Points3 pc(40, 3);
    for (Index i = 0; i < 40; ++i) {
        pf.row(i) = s.features.row(perm[static_cast<std::size_t>(i)]);
        pc.row(i) = s.colors.row(perm[static_cast<std::size_t>(i)]);
    }
    AnchorGraph pg = g;
    for (auto& a : pg.anchors) a = inv[static_cast<std::size_t>(a)];
    for (auto& a : pg.adjacency) a = inv[static_cast<std::size_t>(a)];
    for (Index i = 0; i < 40; ++i)
        pg.nearest_anchor[static_cast<std::size_t>(i)] = inv[static_cast<std::size_t>(g.nearest_anchor[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])])];
    Propagator p1, p2;
    const RowMatrix a = p1.forward(s.features, s.colors, g, net);
    const RowMatrix b = p2.forward(pf, pc, pg, net);
    for (Index i = 0; i < 40; ++i) EXPECT_LT((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, RequiresForward) {
    Propagator p;
    EXPECT_THROW(p.backward(RowMatrix::Zero(1, 1)), StateError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    const GaussianScene s = fixtures::random_scene(30, 4, 7);
    const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 3});
    const PropagationNet net = PropagationNet::init(2, 4, 7);
    Propagator p;
    p.forward(s.features, s.colors, g, net);
    const auto grads = p.backward(RowMatrix::Zero(30, 4));
    for (int l = 0; l < 2; ++l) {
        EXPECT_EQ(grads.net.w_self[static_cast<std::size_t>(l)].cwiseAbs().maxCoeff(), 0.0);
        EXPECT_EQ(grads.net.w_neigh[static_cast<std::size_t>(l)].cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Backward, WeightGradientsMatchFiniteDifferences) {
    for (int layers : {1, 2, 3}) {
        const GaussianScene s = fixtures::random_scene(30, 6, 8 + static_cast<std::uint64_t>(layers));
        const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 3});
        const PropagationNet net = PropagationNet::init(layers, 6, 8, kHiddenWidth, layers != 3);
        const RowMatrix up = random_matrix(30, 6, 99);
        Propagator p;
        p.forward(s.features, s.colors, g, net);
        const auto grads = p.backward(up);
        EXPECT_EQ(grads.features, up);
        const double h = 1e-5;
        double worst = 0.0;
        for (int l = 0; l < layers; ++l) {
            for (int which = 0; which < 2; ++which) {
                const auto& an = which == 0 ? grads.net.w_self[static_cast<std::size_t>(l)] : grads.net.w_neigh[static_cast<std::size_t>(l)];
                for (Eigen::Index e = 0; e < an.size(); ++e) {
                    PropagationNet a = net, b = net;
                    (which == 0 ? a.w_self : a.w_neigh)[static_cast<std::size_t>(l)].data()[e] += h;
                    (which == 0 ? b.w_self : b.w_neigh)[static_cast<std::size_t>(l)].data()[e] -= h;
                    Propagator pa, pb;
                    const double fd = (weighted_sum(pa.forward(s.features, s.colors, g, a), up) -
                                       weighted_sum(pb.forward(s.features, s.colors, g, b), up)) /
                                      (2 * h);
                    const double err = std::abs(fd - an.data()[e]) / std::max({std::abs(fd), std::abs(an.data()[e]), 1e-6});
                    worst = std::max(worst, err);
                }
            }
        }
        EXPECT_LT(worst, 1e-4) << "layers " << layers;
    }
}

TEST(Backward, DetachedSourceBlocksPropagationPath) {
    // Perturbing features while keeping the detached source fixed moves f_final one-for-one.
    const GaussianScene s = fixtures::random_scene(30, 4, 9);
    const AnchorGraph g = precompute(s, {.ratio = 0.2, .k = 3});
    const PropagationNet net = PropagationNet::init(2, 4, 9);
    RowMatrix moved = s.features;
    moved(5, 2) += 0.3;
    Propagator p1, p2;
    const RowMatrix a = p1.forward(s.features, s.colors, g, net, &s.features);
    const RowMatrix b = p2.forward(moved, s.colors, g, net, &s.features);
    RowMatrix diff = b - a;
    EXPECT_NEAR(diff(5, 2), 0.3, 1e-12);
    diff(5, 2) = 0.0;
    EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Smoothing, TwoClusterFixtureAcrossSeeds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto o = fixtures::smoothing_outcome(seed);
        EXPECT_LT(o.variance_ratio, 1.0) << "seed " << seed;
        EXPECT_GT(o.separation_over_std, 3.0) << "seed " << seed;
    }
}

TEST(Determinism, ThreadCountsAgree) {
    const GaussianScene s = fixtures::random_scene(400, 8, 10);
    const AnchorGraph g = precompute(s, {.ratio = 0.1, .k = 8});
    const PropagationNet net = PropagationNet::init(2, 8, 10);
    Propagator p1;
    const RowMatrix a = p1.forward(s.features, s.colors, g, net);
    const auto ga = p1.backward(random_matrix(400, 8, 1));
#ifdef _OPENMP
    const int before = omp_get_max_threads();
    omp_set_num_threads(3);
#endif
    Propagator p2;
    const RowMatrix b = p2.forward(s.features, s.colors, g, net);
    const auto gb = p2.backward(random_matrix(400, 8, 1));
#ifdef _OPENMP
    omp_set_num_threads(before);
#endif
    EXPECT_EQ(a, b);
    EXPECT_EQ(ga.net.w_self[0], gb.net.w_self[0]);
}

TEST(NetIo, RoundTrip) {
    const PropagationNet net = PropagationNet::init(3, 5, 11, 7, false);
    const PropagationNet back = deserialize_net(serialize_net(net));
    EXPECT_TRUE(back == net);
    auto bytes = serialize_net(net);
    bytes.resize(bytes.size() - 1);
    EXPECT_THROW(deserialize_net(bytes), ParseError);
    PropagationNet bad = net;
    bad.w_self[1].resize(2, 2);
    EXPECT_THROW(bad.validate(), InvalidArgument);
}
