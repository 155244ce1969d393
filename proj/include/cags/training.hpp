#pragma once

// Stage-2 optimisation: per-Gaussian features and the propagation net are
// trained jointly against 2D masks through the feature renderer.

#include "cags/losses.hpp"
#include "cags/propagation.hpp"
#include "cags/renderer.hpp"

#include <chrono>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cags {

enum class LossVariant { per_mask, per_pixel, per_mask_cohesion, per_pixel_cohesion };

inline const char* to_string(LossVariant v) {
    switch (v) {
        case LossVariant::per_mask: return "per-mask";
        case LossVariant::per_pixel: return "per-pixel";
        case LossVariant::per_mask_cohesion: return "per-mask+cohesion";
        case LossVariant::per_pixel_cohesion: return "per-pixel+cohesion";
    }
    return "?";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
    for (auto v : {LossVariant::per_mask, LossVariant::per_pixel, LossVariant::per_mask_cohesion, LossVariant::per_pixel_cohesion})
        if (s == to_string(v)) return v;
    throw InvalidArgument("unknown loss variant '" + s + "'");
}

inline bool uses_cohesion(LossVariant v) {
    return v == LossVariant::per_mask_cohesion || v == LossVariant::per_pixel_cohesion;
}
inline bool uses_pixel_loss(LossVariant v) {
    return v == LossVariant::per_pixel || v == LossVariant::per_pixel_cohesion;
}

struct TrainConfig {
    int iterations = 10000;
    double feature_lr = 2.5e-2;
    double net_lr = 1e-3;
    double momentum = 0.9;
    double temperature = kDefaultTemperature;
    LossVariant loss = LossVariant::per_mask;
    double cohesion_weight = 1.0;
    int views_per_iteration = 1;
    int pixel_samples = kDefaultPixelSamples;
    bool include_self_in_denominator = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (iterations < 0) throw InvalidArgument("TrainConfig: iterations must be >= 0");
        if (!(temperature > 0.0)) throw InvalidArgument("TrainConfig: temperature must be > 0");
        if (!(feature_lr >= 0.0) || !(net_lr >= 0.0)) throw InvalidArgument("TrainConfig: learning rates must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("TrainConfig: momentum must be in [0,1)");
        if (views_per_iteration < 1) throw InvalidArgument("TrainConfig: views_per_iteration must be >= 1");
        if (pixel_samples < 1) throw InvalidArgument("TrainConfig: pixel_samples must be >= 1");
        if (!(cohesion_weight >= 0.0)) throw InvalidArgument("TrainConfig: cohesion_weight must be >= 0");
    }
};

/// A training view reduced to what the losses need.
struct TrainView {
    int camera = 0;
    std::span<const std::uint16_t> raster;
};

/// Value and HW x d gradient of the configured objective on one feature map.
inline LossResult view_objective(const RowMatrix& values, std::span<const std::uint16_t> raster, const TrainConfig& cfg,
                                 std::uint64_t sample_seed) {
    LossResult r = uses_pixel_loss(cfg.loss)
                       ? loss_infonce_pixel(values, raster, cfg.temperature, cfg.pixel_samples, sample_seed,
                                            cfg.include_self_in_denominator)
                       : mask_infonce_on_map(values, raster, cfg.temperature, cfg.include_self_in_denominator);
    if (r.valid && uses_cohesion(cfg.loss) && cfg.cohesion_weight > 0.0) {
        const LossResult c = loss_cohesion(values, raster);
        r.value += cfg.cohesion_weight * c.value;
        r.grad += cfg.cohesion_weight * c.grad;
    }
    return r;
}

/// Raised when the loss or a parameter turns non-finite. Carries the last
/// parameters that gave a finite loss.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int iteration, RowMatrix features, PropagationNet net)
        : std::runtime_error("training diverged: non-finite loss at iteration " + std::to_string(iteration)),
          iteration_(iteration), features_(std::move(features)), net_(std::move(net)) {}
    int iteration() const { return iteration_; }
    const RowMatrix& checkpoint_features() const { return features_; }
    const PropagationNet& checkpoint_net() const { return net_; }

private:
    int iteration_;
    RowMatrix features_;
    PropagationNet net_;
};

struct TrainResult {
    std::vector<double> loss;     // per iteration, mean over valid views
    std::vector<double> seconds;  // cumulative wall time per iteration
    RowMatrix features;           // learned per-Gaussian features f
    RowMatrix final_features;     // f + propagated context
};

/// View order for an epoch: a seeded permutation, fixed per (seed, epoch).
inline std::vector<int> epoch_order(int num_views, std::uint64_t seed, int epoch) {
    std::vector<int> order(static_cast<std::size_t>(num_views));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// Fused features f + propagated context for the current parameters.
inline RowMatrix fused_features(const RowMatrix& features, const Points3& colors, const AnchorGraph& graph,
                                const PropagationNet& net) {
    Propagator p;
    return p.forward(features, colors, graph, net);
}

/// Trains scene features and `net` in place. On return `scene.features`
/// holds the fused features used downstream (clustering, rendering).
inline TrainResult train_stage2(GaussianScene& scene, const AnchorGraph& graph, std::span<const TrainView> views,
                                const std::vector<Camera>& cameras, PropagationNet& net, const TrainConfig& cfg,
                                const std::function<void(int, double)>& on_iteration = {}) {
    cfg.validate();
    validate_scene(scene);
    net.validate();
    if (!scene.geometry_frozen) throw PreconditionError("train_stage2: geometry must be frozen before training");
    if (graph.num_gaussians != scene.size()) throw PreconditionError("train_stage2: graph was built for a different scene");
    if (net.feature_dim != scene.feature_dim()) throw InvalidArgument("train_stage2: net feature dim differs from scene");
    for (const auto& v : views) {
        if (v.camera < 0 || v.camera >= static_cast<int>(cameras.size())) throw InvalidArgument("train_stage2: view camera out of range");
        if (v.raster.size() != cameras[static_cast<std::size_t>(v.camera)].pixel_count())
            throw InvalidArgument("train_stage2: mask raster size differs from camera resolution");
    }
    TrainResult res;
    res.features = scene.features;
    if (cfg.iterations == 0 || views.empty()) {
        res.final_features = fused_features(res.features, scene.colors, graph, net);
        return res;
    }

    // Geometry is frozen, so compositing weights are computed once per view.
    std::vector<CompositingWeights> weights(views.size());
    for (std::size_t v = 0; v < views.size(); ++v) weights[v] = compute_weights(scene, cameras[static_cast<std::size_t>(views[v].camera)]);

    RowMatrix& f = res.features;
    RowMatrix vel_f = RowMatrix::Zero(f.rows(), f.cols());
    NetGradients vel_net = NetGradients::zeros_like(net);
    const int nv = static_cast<int>(views.size());
    std::vector<int> order;
    int epoch = -1;
    int cursor = nv;
    Propagator prop;
    RowMatrix good_f = f;  // parameters that last produced a finite loss
    PropagationNet good_net = net;
    const auto t0 = std::chrono::steady_clock::now();

    for (int it = 0; it < cfg.iterations; ++it) {
        const RowMatrix fused = prop.forward(f, scene.colors, graph, net);
        RowMatrix grad_fused = RowMatrix::Zero(f.rows(), f.cols());
        double loss = 0.0;
        int valid = 0;
        for (int b = 0; b < cfg.views_per_iteration; ++b) {
            if (cursor >= nv) {
                order = epoch_order(nv, cfg.seed, ++epoch);
                cursor = 0;
            }
            const int v = order[static_cast<std::size_t>(cursor++)];
            const auto& w = weights[static_cast<std::size_t>(v)];
            const FeatureMap fm = composite(w, fused);
            const std::uint64_t sample_seed = cfg.seed ^ (0x51ed270b27a7f3a5ull * (static_cast<std::uint64_t>(it) + 1)) ^
                                              static_cast<std::uint64_t>(b);
            const LossResult lr = view_objective(fm.values, views[static_cast<std::size_t>(v)].raster, cfg, sample_seed);
            if (!lr.valid) continue;
            ++valid;
            loss += lr.value;
            grad_fused += composite_backward(w, lr.grad);
        }
        if (valid > 0) {
            loss /= valid;
            grad_fused /= valid;
        }
        if (!std::isfinite(loss) || !all_finite(grad_fused))
            throw TrainingDiverged(it, good_f, good_net);
        good_f = f;
        good_net = net;
        if (valid > 0) {
            const PropagationGradients g = prop.backward(grad_fused);
            vel_f = cfg.momentum * vel_f + g.features;
            f -= cfg.feature_lr * vel_f;
            for (int l = 0; l < net.num_layers; ++l) {
                const auto ul = static_cast<std::size_t>(l);
                vel_net.w_self[ul] = cfg.momentum * vel_net.w_self[ul] + g.net.w_self[ul];
                vel_net.w_neigh[ul] = cfg.momentum * vel_net.w_neigh[ul] + g.net.w_neigh[ul];
                net.w_self[ul] -= cfg.net_lr * vel_net.w_self[ul];
                net.w_neigh[ul] -= cfg.net_lr * vel_net.w_neigh[ul];
            }
            // Gaussians unseen by this view can overflow without touching its loss.
            bool finite = all_finite(f);
            for (int l = 0; l < net.num_layers && finite; ++l)
                finite = net.w_self[static_cast<std::size_t>(l)].allFinite() && net.w_neigh[static_cast<std::size_t>(l)].allFinite();
            if (!finite) throw TrainingDiverged(it, good_f, good_net);
        }
        res.loss.push_back(loss);
        res.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (on_iteration) on_iteration(it, loss);
    }
    res.final_features = fused_features(f, scene.colors, graph, net);
    scene.features = res.final_features;
    return res;
}

}  // namespace cags
