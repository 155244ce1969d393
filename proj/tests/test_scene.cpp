#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace cags;

namespace {

std::string temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "cags_test_scene";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

Eigen::Vector4d quat_about_z(double angle) { return {std::cos(angle / 2), 0.0, 0.0, std::sin(angle / 2)}; }

}  // namespace

TEST(Covariance, IdentityFactors) {
    const auto c = covariance_from_factors({1, 1, 1}, {1, 0, 0, 0});
    EXPECT_TRUE(c.isApprox(Eigen::Matrix3d::Identity()));
}

TEST(Covariance, DiagonalScale) {
    const auto c = covariance_from_factors({2, 1, 1}, {1, 0, 0, 0});
    EXPECT_TRUE(c.isApprox(Eigen::Vector3d(4, 1, 1).asDiagonal().toDenseMatrix()));
}

TEST(Covariance, QuarterTurnAboutZSwapsXY) {
    const auto c = covariance_from_factors({1, 2, 3}, quat_about_z(M_PI / 2));
    const Eigen::Matrix3d want = Eigen::Vector3d(4, 1, 9).asDiagonal();
    EXPECT_LT((c - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, RejectsBadFactors) {
    EXPECT_THROW(covariance_from_factors({0, 1, 1}, {1, 0, 0, 0}), InvalidArgument);
    EXPECT_THROW(covariance_from_factors({1, -1, 1}, {1, 0, 0, 0}), InvalidArgument);
    EXPECT_THROW(covariance_from_factors({1, 1, 1}, {1.1, 0, 0, 0}), InvalidArgument);
    EXPECT_NO_THROW(covariance_from_factors({1, 1, 1}, {1.0 + 5e-7, 0, 0, 0}));
}

TEST(Covariance, EigenvaluesAreSquaredScales) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0, 1);
    std::uniform_real_distribution<double> u(0.01, 3.0);
    for (int t = 0; t < 1000; ++t) {
        const Eigen::Vector3d s(u(rng), u(rng), u(rng));
        const Eigen::Vector4d q = Eigen::Vector4d(g(rng), g(rng), g(rng), g(rng)).normalized();
        const auto c = covariance_from_factors(s, q);
        EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-9);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(c);
        std::array<double, 3> want{s[0] * s[0], s[1] * s[1], s[2] * s[2]};
        std::sort(want.begin(), want.end());
        for (int i = 0; i < 3; ++i) EXPECT_NEAR(es.eigenvalues()[i], want[static_cast<std::size_t>(i)], 1e-9 * std::max(1.0, want[2]));
    }
}

TEST(Scene, ValidateCatchesInvariantViolations) {
    GaussianScene s = GaussianScene::zeros(3, 4);
    EXPECT_NO_THROW(validate_scene(s));
    s.opacities[1] = 1.5;
    EXPECT_THROW(validate_scene(s), InvalidArgument);
    s.opacities[1] = 0.5;
    s.features(0, 0) = std::nan("");
    EXPECT_THROW(validate_scene(s), InvalidArgument);
    s.features(0, 0) = 0.0;
    s.scales(2, 1) = 0.0;
    EXPECT_THROW(validate_scene(s), InvalidArgument);
}

TEST(Ply, RoundTripIsBitExact) {
    GaussianScene s = fixtures::random_scene(10, 16, 3);
    s.instance_labels = std::vector<Index>{0, 0, 1, 1, 2, 2, -1, -1, 3, 3};
    s.geometry_frozen = true;
    const auto path = temp_path("roundtrip.ply");
    save_scene(s, path);
    const GaussianScene back = load_scene(path);
    EXPECT_TRUE(back == s);
    EXPECT_EQ(std::memcmp(back.positions.data(), s.positions.data(), sizeof(double) * 30), 0);
    EXPECT_EQ(std::memcmp(back.features.data(), s.features.data(), sizeof(double) * 160), 0);
    EXPECT_TRUE(back.geometry_frozen);
}

TEST(Ply, RoundTripWithoutLabels) {
    const GaussianScene s = fixtures::random_scene(25, 5, 4);
    const auto path = temp_path("nolabels.ply");
    save_scene(s, path);
    const GaussianScene back = load_scene(path);
    EXPECT_FALSE(back.instance_labels.has_value());
    EXPECT_TRUE(back == s);
}

TEST(Ply, TruncatedBodyIsParseError) {
    const GaussianScene s = fixtures::random_scene(10, 16, 5);
    const auto path = temp_path("trunc.ply");
    save_scene(s, path);
    auto bytes = io::read_file(path);
    bytes.resize(bytes.size() - 13);
    try {
        parse_scene(bytes, nullptr, 16);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), bytes.size());
    }
}

TEST(Ply, MalformedHeaderReportsOffset) {
    const std::string bad = "ply\nformat ascii 1.0\nelement vertex 1\nend_header\n";
    try {
        parse_scene(std::span<const char>(bad.data(), bad.size()), nullptr, 16);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
    const std::string no_magic = "plx\n";
    EXPECT_THROW(parse_scene(std::span<const char>(no_magic.data(), no_magic.size()), nullptr, 16), ParseError);
    const std::string unterminated = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n";
    EXPECT_THROW(parse_scene(std::span<const char>(unterminated.data(), unterminated.size()), nullptr, 16), ParseError);
}

namespace {

/// Minimal float32 PLY with the geometry properties only, uchar colors.
std::vector<char> float_ply_without_features(int n) {
    std::string hdr = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(n) + "\n";
    for (const char* p : {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"})
        hdr += std::string("property float ") + p + "\n";
    hdr += "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    io::ByteWriter w;
    w.put_bytes(hdr);
    for (int i = 0; i < n; ++i) {
        for (float v : {float(i), 0.f, 0.f, 0.1f, 0.2f, 0.3f, 2.f, 0.f, 0.f, 0.f, 0.5f}) w.put(v);
        for (std::uint8_t c : {std::uint8_t(255), std::uint8_t(0), std::uint8_t(51)}) w.put(c);
    }
    return std::vector<char>(w.bytes().begin(), w.bytes().end());
}

}  // namespace

TEST(Ply, MissingFeaturesAreZeroWithDefaultDim) {
    const auto bytes = float_ply_without_features(4);
    const GaussianScene s = parse_scene(bytes, nullptr, 7);
    EXPECT_EQ(s.size(), 4);
    EXPECT_EQ(s.feature_dim(), 7);
    EXPECT_EQ(s.features.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_DOUBLE_EQ(s.colors(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(s.colors(0, 2), 0.2);
    // rot (2,0,0,0) is normalised on load.
    EXPECT_DOUBLE_EQ(s.rotations(3, 0), 1.0);
    EXPECT_FALSE(s.geometry_frozen);
}

TEST(Ply, MissingFeaturesTakeDimFromSidecar) {
    const auto bytes = float_ply_without_features(2);
    const nlohmann::json meta = {{"d", 3}, {"N", 2}};
    const GaussianScene s = parse_scene(bytes, &meta, 16);
    EXPECT_EQ(s.feature_dim(), 3);
}

TEST(Ply, MissingPropertiesAreListed) {
    const std::string hdr =
        "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty double x\nproperty double y\nend_header\n";
    try {
        parse_scene(std::span<const char>(hdr.data(), hdr.size()), nullptr, 16);
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_EQ(e.issues().size(), 12u);
        EXPECT_EQ(e.issues().front(), "z");
    }
}

TEST(Ply, SidecarMismatchIsSchemaError) {
    const GaussianScene s = fixtures::random_scene(5, 4, 8);
    const auto path = temp_path("mismatch.ply");
    save_scene(s, path);
    const auto bytes = io::read_file(path);
    const nlohmann::json bad_d = {{"d", 5}, {"N", 5}};
    EXPECT_THROW(parse_scene(bytes, &bad_d, 16), SchemaError);
    const nlohmann::json bad_n = {{"d", 4}, {"N", 6}};
    EXPECT_THROW(parse_scene(bytes, &bad_n, 16), SchemaError);
}
