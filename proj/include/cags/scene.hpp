#pragma once

#include "cags/common.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace cags {

inline constexpr double kQuaternionTolerance = 1e-6;
inline constexpr int kDefaultFeatureDim = 16;

using Covariance3D = Eigen::Matrix3d;

/// A set of N anisotropic 3D Gaussians with a learnable d-dimensional
/// instance feature each. Rotations are (w, x, y, z) quaternions.
struct GaussianScene {
    Points3 positions;
    Points3 scales;
    Quats rotations;
    Eigen::VectorXd opacities;
    Points3 colors;
    RowMatrix features;
    std::optional<std::vector<Index>> instance_labels;
    bool geometry_frozen = false;

    Index size() const { return static_cast<Index>(positions.rows()); }
    int feature_dim() const { return static_cast<int>(features.cols()); }

    /// Allocates an N-Gaussian scene with identity rotations, unit scales,
    /// opaque white Gaussians at the origin and zero features.
    static GaussianScene zeros(Index n, int d) {
        GaussianScene s;
        s.positions = Points3::Zero(n, 3);
        s.scales = Points3::Ones(n, 3);
        s.rotations = Quats::Zero(n, 4);
        s.rotations.col(0).setOnes();
        s.opacities = Eigen::VectorXd::Ones(n);
        s.colors = Points3::Ones(n, 3);
        s.features = RowMatrix::Zero(n, d);
        return s;
    }

    bool operator==(const GaussianScene& o) const {
        auto eq = [](const auto& a, const auto& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
        };
        return eq(positions, o.positions) && eq(scales, o.scales) && eq(rotations, o.rotations) &&
               eq(opacities, o.opacities) && eq(colors, o.colors) && eq(features, o.features) &&
               instance_labels == o.instance_labels && geometry_frozen == o.geometry_frozen;
    }
};

/// Checks the per-Gaussian invariants; throws InvalidArgument naming the first violation.
inline void validate_scene(const GaussianScene& s) {
    const Index n = s.size();
    if (s.scales.rows() != n || s.rotations.rows() != n || s.opacities.size() != n ||
        s.colors.rows() != n || s.features.rows() != n)
        throw InvalidArgument("scene arrays disagree on Gaussian count");
    if (s.instance_labels && static_cast<Index>(s.instance_labels->size()) != n)
        throw InvalidArgument("instance_labels length differs from Gaussian count");
    for (Index i = 0; i < n; ++i) {
        if (!(s.scales.row(i).array() > 0.0).all())
            throw InvalidArgument("Gaussian " + std::to_string(i) + ": non-positive scale");
        if (std::abs(s.rotations.row(i).norm() - 1.0) > kQuaternionTolerance)
            throw InvalidArgument("Gaussian " + std::to_string(i) + ": quaternion is not unit norm");
        if (!(s.opacities[i] >= 0.0 && s.opacities[i] <= 1.0))
            throw InvalidArgument("Gaussian " + std::to_string(i) + ": opacity outside [0,1]");
        if (s.instance_labels && (*s.instance_labels)[static_cast<std::size_t>(i)] < -1)
            throw InvalidArgument("Gaussian " + std::to_string(i) + ": instance label below -1");
    }
    if (!s.features.allFinite()) throw InvalidArgument("scene features contain NaN/Inf");
}

inline Eigen::Matrix3d rotation_from_quaternion(const Eigen::Vector4d& wxyz) {
    const Eigen::Quaterniond q(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    return q.normalized().toRotationMatrix();
}

/// R diag(s)^2 R^T.
inline Covariance3D covariance_from_factors(const Eigen::Vector3d& scale, const Eigen::Vector4d& wxyz) {
    if (!(scale.array() > 0.0).all()) throw InvalidArgument("covariance_from_factors: scale must be positive");
    if (std::abs(wxyz.norm() - 1.0) > kQuaternionTolerance)
        throw InvalidArgument("covariance_from_factors: quaternion norm differs from 1 by more than 1e-6");
    const Eigen::Matrix3d r = rotation_from_quaternion(wxyz);
    const Eigen::Matrix3d m = r * scale.asDiagonal();
    Covariance3D cov = m * m.transpose();
    // Exact symmetry; the product is symmetric only up to rounding.
    return 0.5 * (cov + cov.transpose());
}

inline Covariance3D gaussian_covariance(const GaussianScene& s, Index i) {
    return covariance_from_factors(s.scales.row(i).transpose(), s.rotations.row(i).transpose());
}

}  // namespace cags
