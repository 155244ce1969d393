#pragma once

// Mask-aware contrastive objectives over a rendered feature map: centroid
// InfoNCE, the per-pixel InfoNCE baseline and the cohesion regulariser.
// Every loss returns its value and the gradient w.r.t. its input.

#include "cags/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace cags {

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr int kDefaultPixelSamples = 256;

struct CentroidSet {
    std::vector<int> mask_ids;      // raster id of each row
    RowMatrix centroids;            // K x d
    std::vector<Index> counts;      // pixels per mask

    int size() const { return static_cast<int>(mask_ids.size()); }
};

/// Mean rendered feature of every non-empty mask; rows ordered by mask id.
inline CentroidSet mask_centroids(const RowMatrix& values, std::span<const std::uint16_t> raster) {
    if (static_cast<Eigen::Index>(raster.size()) != values.rows())
        throw InvalidArgument("mask_centroids: raster size differs from feature map");
    const int max_id = raster.empty() ? 0 : *std::max_element(raster.begin(), raster.end());
    RowMatrix sum = RowMatrix::Zero(max_id + 1, values.cols());
    std::vector<Index> cnt(static_cast<std::size_t>(max_id) + 1, 0);
    for (std::size_t p = 0; p < raster.size(); ++p) {
        if (raster[p] == 0) continue;
        sum.row(raster[p]) += values.row(static_cast<Eigen::Index>(p));
        ++cnt[raster[p]];
    }
    CentroidSet cs;
    for (int id = 1; id <= max_id; ++id)
        if (cnt[static_cast<std::size_t>(id)] > 0) cs.mask_ids.push_back(id);
    cs.centroids.resize(cs.size(), values.cols());
    for (int k = 0; k < cs.size(); ++k) {
        const int id = cs.mask_ids[static_cast<std::size_t>(k)];
        cs.counts.push_back(cnt[static_cast<std::size_t>(id)]);
        cs.centroids.row(k) = sum.row(id) / static_cast<double>(cnt[static_cast<std::size_t>(id)]);
    }
    return cs;
}

struct LossResult {
    double value = 0.0;
    RowMatrix grad;      // same shape as the differentiated input
    bool valid = false;  // false when fewer than two masks are present
};

namespace detail {

inline constexpr double kNormFloor = 1e-12;

/// Row-normalises x; zero rows stay zero.
inline RowMatrix unit_rows(const RowMatrix& x, Eigen::VectorXd& norms) {
    norms = x.rowwise().norm();
    RowMatrix u = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) u.row(i) = norms[i] > kNormFloor ? RowMatrix(x.row(i) / norms[i]) : RowMatrix::Zero(1, x.cols());
    return u;
}

/// Pulls dL/dS (S = U U^T) back to the unnormalised rows.
inline RowMatrix similarity_backward(const RowMatrix& u, const Eigen::VectorXd& norms, const RowMatrix& g_sim) {
    RowMatrix du = (g_sim + g_sim.transpose()) * u;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        if (norms[i] <= kNormFloor) {
            du.row(i).setZero();
            continue;
        }
        const double along = du.row(i).dot(u.row(i));
        du.row(i) = (du.row(i) - along * u.row(i)) / norms[i];
    }
    return du;
}

}  // namespace detail

/// Centroid InfoNCE with the self-similarity as positive. The denominator
/// runs over j != k unless `include_self` is set. Mean over masks.
inline LossResult loss_infonce_mask(const RowMatrix& centroids, double tau, bool include_self = false) {
    if (!(tau > 0.0)) throw InvalidArgument("loss_infonce_mask: temperature must be > 0");
    LossResult r;
    const Eigen::Index k = centroids.rows();
    r.grad = RowMatrix::Zero(k, centroids.cols());
    if (k < 2) return r;
    Eigen::VectorXd norms;
    const RowMatrix u = detail::unit_rows(centroids, norms);
    const RowMatrix s = u * u.transpose();
    RowMatrix g = RowMatrix::Zero(k, k);
    double total = 0.0;
    for (Eigen::Index a = 0; a < k; ++a) {
        double mx = -1e300;
        for (Eigen::Index j = 0; j < k; ++j)
            if (j != a || include_self) mx = std::max(mx, s(a, j) / tau);
        double den = 0.0;
        for (Eigen::Index j = 0; j < k; ++j)
            if (j != a || include_self) den += std::exp(s(a, j) / tau - mx);
        total += -s(a, a) / tau + mx + std::log(den);
        g(a, a) -= 1.0 / (tau * static_cast<double>(k));
        for (Eigen::Index j = 0; j < k; ++j)
            if (j != a || include_self) g(a, j) += std::exp(s(a, j) / tau - mx) / den / (tau * static_cast<double>(k));
    }
    r.value = total / static_cast<double>(k);
    r.grad = detail::similarity_backward(u, norms, g);
    r.valid = true;
    return r;
}

/// Per-mask InfoNCE evaluated on a feature map; the gradient is HW x d.
inline LossResult mask_infonce_on_map(const RowMatrix& values, std::span<const std::uint16_t> raster, double tau,
                                      bool include_self = false) {
    const CentroidSet cs = mask_centroids(values, raster);
    LossResult c = loss_infonce_mask(cs.centroids, tau, include_self);
    LossResult r;
    r.valid = c.valid;
    r.value = c.value;
    r.grad = RowMatrix::Zero(values.rows(), values.cols());
    if (!c.valid) return r;
    std::vector<int> row_of(static_cast<std::size_t>(cs.mask_ids.back()) + 1, -1);
    for (int j = 0; j < cs.size(); ++j) row_of[static_cast<std::size_t>(cs.mask_ids[static_cast<std::size_t>(j)])] = j;
    for (std::size_t p = 0; p < raster.size(); ++p) {
        if (raster[p] == 0) continue;
        const int j = row_of[raster[p]];
        r.grad.row(static_cast<Eigen::Index>(p)) = c.grad.row(j) / static_cast<double>(cs.counts[static_cast<std::size_t>(j)]);
    }
    return r;
}

/// Seeded subsample of each mask's pixels, at most `cap` per mask, in
/// ascending pixel order within a mask. Returns (pixel, mask row) pairs.
struct PixelSample {
    std::vector<std::size_t> pixel;
    std::vector<int> mask;
    int num_masks = 0;
};

inline PixelSample sample_mask_pixels(std::span<const std::uint16_t> raster, int cap, std::uint64_t seed) {
    if (cap < 1) throw InvalidArgument("sample_mask_pixels: sample cap must be >= 1");
    const int max_id = raster.empty() ? 0 : *std::max_element(raster.begin(), raster.end());
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(max_id) + 1);
    for (std::size_t p = 0; p < raster.size(); ++p)
        if (raster[p] != 0) members[raster[p]].push_back(p);
    std::mt19937_64 rng(seed);
    PixelSample s;
    for (int id = 1; id <= max_id; ++id) {
        auto& m = members[static_cast<std::size_t>(id)];
        if (m.empty()) continue;
        if (static_cast<int>(m.size()) > cap) {
            std::shuffle(m.begin(), m.end(), rng);
            m.resize(static_cast<std::size_t>(cap));
            std::sort(m.begin(), m.end());
        }
        for (std::size_t p : m) {
            s.pixel.push_back(p);
            s.mask.push_back(s.num_masks);
        }
        ++s.num_masks;
    }
    return s;
}

/// Per-pixel InfoNCE on sampled pixels. Positives are the other samples of
/// the same mask (the anchor itself for a single-sample mask); negatives are
/// the other masks' samples, each mask's negatives weighted by 1/n_mask so
/// every mask carries equal mass regardless of area. Averaged per mask, then
/// over masks. Gradient is HW x d.
inline LossResult loss_infonce_pixel(const RowMatrix& values, std::span<const std::uint16_t> raster, double tau,
                                     int sample_count, std::uint64_t seed, bool include_self = false) {
    if (!(tau > 0.0)) throw InvalidArgument("loss_infonce_pixel: temperature must be > 0");
    if (static_cast<Eigen::Index>(raster.size()) != values.rows())
        throw InvalidArgument("loss_infonce_pixel: raster size differs from feature map");
    LossResult r;
    r.grad = RowMatrix::Zero(values.rows(), values.cols());
    const PixelSample smp = sample_mask_pixels(raster, sample_count, seed);
    const int km = smp.num_masks;
    if (km < 2) return r;
    const auto n = static_cast<Eigen::Index>(smp.pixel.size());
    RowMatrix x(n, values.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = values.row(static_cast<Eigen::Index>(smp.pixel[static_cast<std::size_t>(i)]));
    std::vector<double> mask_n(static_cast<std::size_t>(km), 0.0);
    for (int m : smp.mask) mask_n[static_cast<std::size_t>(m)] += 1.0;

    Eigen::VectorXd norms;
    const RowMatrix u = detail::unit_rows(x, norms);
    const RowMatrix s = u * u.transpose();
    RowMatrix g = RowMatrix::Zero(n, n);
    std::vector<double> per_anchor(static_cast<std::size_t>(n), 0.0);

#pragma omp parallel for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) {
        const int a = smp.mask[static_cast<std::size_t>(i)];
        const double na = mask_n[static_cast<std::size_t>(a)];
        const double coef = 1.0 / (static_cast<double>(km) * na);
        const bool lone = na < 1.5;
        const double np = lone ? 1.0 : na - 1.0;
        auto is_pos = [&](Eigen::Index j) { return smp.mask[static_cast<std::size_t>(j)] == a && (lone || j != i); };
        double mx = -1e300;
        for (Eigen::Index j = 0; j < n; ++j)
            if (smp.mask[static_cast<std::size_t>(j)] != a || (include_self && is_pos(j))) mx = std::max(mx, s(i, j) / tau);
        double den = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const int b = smp.mask[static_cast<std::size_t>(j)];
            if (b != a) den += std::exp(s(i, j) / tau - mx) / mask_n[static_cast<std::size_t>(b)];
            else if (include_self && is_pos(j)) den += std::exp(s(i, j) / tau - mx) / np;
        }
        double pos = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
            if (is_pos(j)) {
                pos += s(i, j) / tau;
                g(i, j) -= coef / (np * tau);
            }
        per_anchor[static_cast<std::size_t>(i)] = coef * (-pos / np + mx + std::log(den));
        for (Eigen::Index j = 0; j < n; ++j) {
            const int b = smp.mask[static_cast<std::size_t>(j)];
            double w = 0.0;
            if (b != a) w = 1.0 / mask_n[static_cast<std::size_t>(b)];
            else if (include_self && is_pos(j)) w = 1.0 / np;
            if (w > 0.0) g(i, j) += coef * w * std::exp(s(i, j) / tau - mx) / (den * tau);
        }
    }
    r.value = std::accumulate(per_anchor.begin(), per_anchor.end(), 0.0);
    const RowMatrix gx = detail::similarity_backward(u, norms, g);
    for (Eigen::Index i = 0; i < n; ++i) r.grad.row(static_cast<Eigen::Index>(smp.pixel[static_cast<std::size_t>(i)])) = gx.row(i);
    r.valid = true;
    return r;
}

/// Mean over masks of the mean squared distance of member pixels to the
/// mask centroid. Gradient is HW x d.
inline LossResult loss_cohesion(const RowMatrix& values, std::span<const std::uint16_t> raster) {
    const CentroidSet cs = mask_centroids(values, raster);
    LossResult r;
    r.grad = RowMatrix::Zero(values.rows(), values.cols());
    if (cs.size() == 0) return r;
    std::vector<int> row_of(static_cast<std::size_t>(cs.mask_ids.back()) + 1, -1);
    for (int j = 0; j < cs.size(); ++j) row_of[static_cast<std::size_t>(cs.mask_ids[static_cast<std::size_t>(j)])] = j;
    const double kinv = 1.0 / cs.size();
    std::vector<double> per_mask(static_cast<std::size_t>(cs.size()), 0.0);
    for (std::size_t p = 0; p < raster.size(); ++p) {
        if (raster[p] == 0) continue;
        const int j = row_of[raster[p]];
        const double nk = static_cast<double>(cs.counts[static_cast<std::size_t>(j)]);
        const auto diff = values.row(static_cast<Eigen::Index>(p)) - cs.centroids.row(j);
        per_mask[static_cast<std::size_t>(j)] += diff.squaredNorm() / nk;
        r.grad.row(static_cast<Eigen::Index>(p)) = 2.0 * kinv / nk * diff;
    }
    r.value = kinv * std::accumulate(per_mask.begin(), per_mask.end(), 0.0);
    r.valid = true;
    return r;
}

}  // namespace cags
