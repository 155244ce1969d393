#pragma once

// Desk-scale splatting rasterizer. Gaussians are projected with the pinhole
// Jacobian, sorted globally front to back (ties by index) and alpha
// composited per pixel. Geometry is frozen, so the compositing weights
// T_i * alpha_i of one view are computed once and reused for any payload
// (colors, features, silhouettes); the feature render is linear in them.

#include "cags/scene.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace cags {

inline constexpr double kCovarianceDilation = 0.3;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr double kFootprintSigmas = 3.0;

/// Pinhole camera; `rotation`/`translation` map world to camera
/// coordinates (x right, y down, z forward).
struct Camera {
    int width = 64;
    int height = 64;
    double fx = 64.0, fy = 64.0, cx = 32.0, cy = 32.0;
    double near_plane = 0.01;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Matrix4d pose() const {
        Eigen::Matrix4d p = Eigen::Matrix4d::Identity();
        p.topLeftCorner<3, 3>() = rotation;
        p.topRightCorner<3, 1>() = translation;
        return p;
    }

    Eigen::Vector3d center() const { return -rotation.transpose() * translation; }

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0)) throw InvalidArgument("Camera: focal lengths must be positive");
        if (width < 1 || height < 1) throw InvalidArgument("Camera: image size must be positive");
        if ((rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
            throw InvalidArgument("Camera: pose rotation is not orthonormal");
    }

    static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                          int width, int height, double focal) {
        Camera c;
        c.width = width;
        c.height = height;
        c.fx = c.fy = focal;
        c.cx = 0.5 * width;
        c.cy = 0.5 * height;
        const Eigen::Vector3d f = (target - eye).normalized();
        Eigen::Vector3d r = f.cross(up);
        if (r.norm() < 1e-9) r = f.cross(Eigen::Vector3d::UnitX());
        r.normalize();
        const Eigen::Vector3d d = f.cross(r);
        c.rotation.row(0) = r.transpose();
        c.rotation.row(1) = d.transpose();
        c.rotation.row(2) = f.transpose();
        c.translation = -c.rotation * eye;
        return c;
    }

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
};

struct Projection {
    Eigen::Vector2d mean;
    Eigen::Matrix2d cov;  // includes the +0.3 px^2 dilation
    double depth = 0.0;
};

/// Projects one Gaussian. Returns nullopt when it lies in front of the near plane.
inline std::optional<Projection> project(const Eigen::Vector3d& mu, const Covariance3D& cov3d, const Camera& cam) {
    const Eigen::Vector3d p = cam.rotation * mu + cam.translation;
    if (p.z() < cam.near_plane) return std::nullopt;
    const double iz = 1.0 / p.z();
    Projection out;
    out.depth = p.z();
    out.mean = {cam.fx * p.x() * iz + cam.cx, cam.fy * p.y() * iz + cam.cy};
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
    const Eigen::Matrix<double, 2, 3> t = j * cam.rotation;
    out.cov = t * cov3d * t.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    out.cov += kCovarianceDilation * Eigen::Matrix2d::Identity();
    return out;
}

/// Per-pixel compositing weights of one view in CSR layout (pixel-major,
/// front to back within a pixel), plus a Gaussian-major transpose for the
/// backward pass.
struct CompositingWeights {
    int width = 0;
    int height = 0;
    Index num_gaussians = 0;
    std::vector<std::int64_t> pixel_offsets;  // HW + 1
    std::vector<Index> gaussian;
    std::vector<double> weight;
    Eigen::VectorXd alpha;       // accumulated sum of weights per pixel
    std::vector<Index> count;    // contributors per pixel

    std::vector<std::int64_t> gaussian_offsets;  // N + 1
    std::vector<Index> gaussian_pixel;
    std::vector<double> gaussian_weight;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    std::size_t entries() const { return weight.size(); }
};

namespace detail {

struct Splat {
    Index id;
    double depth;
    double mx, my;
    double ia, ib, ic;  // inverse 2D covariance [[ia, ib], [ib, ic]]
    double opacity;
    int x0, x1, y0, y1;  // inclusive pixel rectangle
};

inline void build_transpose(CompositingWeights& w) {
    const auto n = static_cast<std::size_t>(w.num_gaussians);
    w.gaussian_offsets.assign(n + 1, 0);
    for (Index g : w.gaussian) ++w.gaussian_offsets[static_cast<std::size_t>(g) + 1];
    for (std::size_t i = 0; i < n; ++i) w.gaussian_offsets[i + 1] += w.gaussian_offsets[i];
    w.gaussian_pixel.resize(w.gaussian.size());
    w.gaussian_weight.resize(w.gaussian.size());
    std::vector<std::int64_t> cursor(w.gaussian_offsets.begin(), w.gaussian_offsets.end() - 1);
    const std::size_t hw = w.pixels();
    for (std::size_t p = 0; p < hw; ++p) {
        for (auto e = w.pixel_offsets[p]; e < w.pixel_offsets[p + 1]; ++e) {
            const auto g = static_cast<std::size_t>(w.gaussian[static_cast<std::size_t>(e)]);
            const auto slot = static_cast<std::size_t>(cursor[g]++);
            w.gaussian_pixel[slot] = static_cast<Index>(p);
            w.gaussian_weight[slot] = w.weight[static_cast<std::size_t>(e)];
        }
    }
}

}  // namespace detail

/// Rasterizes the view once and records every (pixel, Gaussian, T*alpha) term.
inline CompositingWeights compute_weights(const GaussianScene& scene, const Camera& cam) {
    cam.validate();
    const Index n = scene.size();
    CompositingWeights w;
    w.width = cam.width;
    w.height = cam.height;
    w.num_gaussians = n;
    const std::size_t hw = cam.pixel_count();

    std::vector<std::optional<detail::Splat>> proj(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i) {
        const auto pr = project(scene.positions.row(i).transpose(), gaussian_covariance(scene, i), cam);
        if (!pr) continue;
        const double det = pr->cov.determinant();
        if (!(det > 0.0)) continue;
        const double rx = kFootprintSigmas * std::sqrt(pr->cov(0, 0));
        const double ry = kFootprintSigmas * std::sqrt(pr->cov(1, 1));
        auto clamp_px = [](double v, int hi) { return static_cast<int>(std::clamp(v, -1.0, static_cast<double>(hi))); };
        const int x0 = std::max(0, clamp_px(std::ceil(pr->mean.x() - rx), cam.width));
        const int x1 = std::min(cam.width - 1, clamp_px(std::floor(pr->mean.x() + rx), cam.width));
        const int y0 = std::max(0, clamp_px(std::ceil(pr->mean.y() - ry), cam.height));
        const int y1 = std::min(cam.height - 1, clamp_px(std::floor(pr->mean.y() + ry), cam.height));
        if (x0 > x1 || y0 > y1) continue;
        detail::Splat s;
        s.id = i;
        s.depth = pr->depth;
        s.mx = pr->mean.x();
        s.my = pr->mean.y();
        s.ia = pr->cov(1, 1) / det;
        s.ib = -pr->cov(0, 1) / det;
        s.ic = pr->cov(0, 0) / det;
        s.opacity = scene.opacities[i];
        s.x0 = x0;
        s.x1 = x1;
        s.y0 = y0;
        s.y1 = y1;
        proj[static_cast<std::size_t>(i)] = s;
    }
    std::vector<detail::Splat> splats;
    for (auto& s : proj)
        if (s) splats.push_back(*s);
    std::sort(splats.begin(), splats.end(), [](const detail::Splat& a, const detail::Splat& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.id < b.id);
    });

    constexpr int kBand = 8;
    const int bands = (cam.height + kBand - 1) / kBand;
    struct Entry {
        Index pixel;
        Index gaussian;
        double weight;
    };
    std::vector<std::vector<Entry>> band_entries(static_cast<std::size_t>(bands));
    w.alpha = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hw));
    w.count.assign(hw, 0);

#pragma omp parallel for schedule(dynamic, 1)
    for (int b = 0; b < bands; ++b) {
        const int r0 = b * kBand;
        const int r1 = std::min(cam.height, r0 + kBand) - 1;
        std::vector<double> trans(static_cast<std::size_t>(r1 - r0 + 1) * static_cast<std::size_t>(cam.width), 1.0);
        auto& out = band_entries[static_cast<std::size_t>(b)];
        for (const auto& s : splats) {
            if (s.y1 < r0 || s.y0 > r1) continue;
            for (int y = std::max(s.y0, r0); y <= std::min(s.y1, r1); ++y) {
                for (int x = s.x0; x <= s.x1; ++x) {
                    const std::size_t local = static_cast<std::size_t>(y - r0) * static_cast<std::size_t>(cam.width) +
                                              static_cast<std::size_t>(x);
                    double& t = trans[local];
                    if (t < kTransmittanceCutoff) continue;
                    const double dx = x - s.mx;
                    const double dy = y - s.my;
                    const double power = -0.5 * (s.ia * dx * dx + 2.0 * s.ib * dx * dy + s.ic * dy * dy);
                    const double a = s.opacity * std::exp(power);
                    const Index pix = static_cast<Index>(y * cam.width + x);
                    out.push_back({pix, s.id, t * a});
                    t *= (1.0 - a);
                }
            }
        }
        std::stable_sort(out.begin(), out.end(), [](const Entry& l, const Entry& r) { return l.pixel < r.pixel; });
    }

    std::size_t total = 0;
    for (const auto& be : band_entries) total += be.size();
    w.pixel_offsets.assign(hw + 1, 0);
    w.gaussian.reserve(total);
    w.weight.reserve(total);
    for (const auto& be : band_entries) {
        for (const auto& e : be) {
            ++w.pixel_offsets[static_cast<std::size_t>(e.pixel) + 1];
            w.gaussian.push_back(e.gaussian);
            w.weight.push_back(e.weight);
            w.alpha[e.pixel] += e.weight;
            ++w.count[static_cast<std::size_t>(e.pixel)];
        }
    }
    for (std::size_t p = 0; p < hw; ++p) w.pixel_offsets[p + 1] += w.pixel_offsets[p];
    detail::build_transpose(w);
    return w;
}

/// H x W x C render result, rows indexed by pixel y * W + x.
struct FeatureMap {
    int width = 0;
    int height = 0;
    RowMatrix values;       // HW x C
    Eigen::VectorXd alpha;  // HW
    std::vector<Index> count;

    int channels() const { return static_cast<int>(values.cols()); }
    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
};

/// sum_i T_i alpha_i payload_i for each pixel; `payload` is N x C.
inline FeatureMap composite(const CompositingWeights& w, const RowMatrix& payload) {
    if (payload.rows() != w.num_gaussians) throw InvalidArgument("composite: payload rows differ from Gaussian count");
    FeatureMap fm;
    fm.width = w.width;
    fm.height = w.height;
    const auto hw = static_cast<Eigen::Index>(w.pixels());
    fm.values = RowMatrix::Zero(hw, payload.cols());
    fm.alpha = w.alpha;
    fm.count = w.count;
#pragma omp parallel for schedule(static)
    for (Eigen::Index p = 0; p < hw; ++p) {
        for (auto e = w.pixel_offsets[static_cast<std::size_t>(p)]; e < w.pixel_offsets[static_cast<std::size_t>(p) + 1]; ++e)
            fm.values.row(p) += w.weight[static_cast<std::size_t>(e)] * payload.row(w.gaussian[static_cast<std::size_t>(e)]);
    }
    return fm;
}

/// Gradient of sum(upstream .* composite(w, payload)) with respect to the payload.
inline RowMatrix composite_backward(const CompositingWeights& w, const RowMatrix& upstream) {
    if (upstream.rows() != static_cast<Eigen::Index>(w.pixels()))
        throw InvalidArgument("composite_backward: upstream pixel count mismatch");
    RowMatrix g = RowMatrix::Zero(w.num_gaussians, upstream.cols());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < w.num_gaussians; ++i) {
        for (auto e = w.gaussian_offsets[static_cast<std::size_t>(i)]; e < w.gaussian_offsets[static_cast<std::size_t>(i) + 1]; ++e)
            g.row(i) += w.gaussian_weight[static_cast<std::size_t>(e)] * upstream.row(w.gaussian_pixel[static_cast<std::size_t>(e)]);
    }
    return g;
}

/// Feature gradient of a rendered map; geometry is frozen and receives none.
inline RowMatrix render_backward(const CompositingWeights& w, const RowMatrix& upstream) {
    return composite_backward(w, upstream);
}

/// Per-pixel coverage of each label: out(p, c) = sum of weights of Gaussians with label c.
/// Gaussians with labels outside [0, num_labels) still occlude but add no coverage.
inline RowMatrix label_coverage(const CompositingWeights& w, std::span<const Index> labels, int num_labels) {
    if (static_cast<Index>(labels.size()) != w.num_gaussians) throw InvalidArgument("label_coverage: label count mismatch");
    const auto hw = static_cast<Eigen::Index>(w.pixels());
    RowMatrix out = RowMatrix::Zero(hw, num_labels);
#pragma omp parallel for schedule(static)
    for (Eigen::Index p = 0; p < hw; ++p) {
        for (auto e = w.pixel_offsets[static_cast<std::size_t>(p)]; e < w.pixel_offsets[static_cast<std::size_t>(p) + 1]; ++e) {
            const Index l = labels[static_cast<std::size_t>(w.gaussian[static_cast<std::size_t>(e)])];
            if (l >= 0 && l < num_labels) out(p, l) += w.weight[static_cast<std::size_t>(e)];
        }
    }
    return out;
}

enum class RenderChannels { color, feature, silhouette };

/// Renders colors, scene features, or the coverage of `subset` (silhouette
/// mode, one channel, un-thresholded) for one camera.
inline FeatureMap render(const GaussianScene& scene, const Camera& cam, RenderChannels channels,
                         std::span<const Index> subset = {}) {
    const CompositingWeights w = compute_weights(scene, cam);
    switch (channels) {
        case RenderChannels::color: return composite(w, RowMatrix(scene.colors));
        case RenderChannels::feature: return composite(w, scene.features);
        case RenderChannels::silhouette: {
            if (subset.empty()) throw InvalidArgument("render: silhouette mode needs a non-empty Gaussian subset");
            RowMatrix ind = RowMatrix::Zero(scene.size(), 1);
            for (Index i : subset) {
                if (i < 0 || i >= scene.size()) throw InvalidArgument("render: subset index out of range");
                ind(i, 0) = 1.0;
            }
            return composite(w, ind);
        }
    }
    return {};
}

/// Binary mask of a silhouette render (coverage > 0.5).
inline std::vector<std::uint8_t> threshold_silhouette(const FeatureMap& sil, double threshold = 0.5) {
    std::vector<std::uint8_t> m(sil.pixels());
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = sil.values(static_cast<Eigen::Index>(p), 0) > threshold ? 1 : 0;
    return m;
}

}  // namespace cags
