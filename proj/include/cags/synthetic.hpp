#pragma once

// Synthetic stand-ins for a reconstructed scene, its training views, the
// per-view 2D segmentation masks and their language embeddings. Masks can be
// perturbed per (object, view) by splitting an object into 2-3 parts or by
// merging it with its screen-space neighbour, which reproduces cross-view
// granularity inconsistency with known ground truth.

#include "cags/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <span>
#include <vector>

namespace cags {

struct SyntheticSceneSpec {
    int num_objects = 5;
    int gaussians_per_object = 200;
    double placement_radius = 1.5;
    double blob_sigma = 0.25;
    double gaussian_scale = 0.05;
    std::vector<int> categories;  // per object; empty = object index
    int feature_dim = kDefaultFeatureDim;
    double feature_noise = 0.1;
    double color_noise = 0.05;
    int ground_gaussians = 0;  // 0 disables the ground plane
    std::uint64_t seed = 0;

    int category_of(int object) const {
        return categories.empty() ? object : categories[static_cast<std::size_t>(object)];
    }
    int num_categories() const {
        if (categories.empty()) return num_objects;
        return *std::max_element(categories.begin(), categories.end()) + 1;
    }
    void validate() const {
        if (num_objects < 1) throw InvalidArgument("SyntheticSceneSpec: num_objects must be >= 1");
        if (gaussians_per_object < 1) throw InvalidArgument("SyntheticSceneSpec: gaussians_per_object must be >= 1");
        if (!categories.empty() && static_cast<int>(categories.size()) != num_objects)
            throw InvalidArgument("SyntheticSceneSpec: categories must list one id per object");
        for (int c : categories)
            if (c < 0) throw InvalidArgument("SyntheticSceneSpec: category ids must be >= 0");
        if (!(blob_sigma > 0.0) || !(gaussian_scale > 0.0)) throw InvalidArgument("SyntheticSceneSpec: sizes must be positive");
        if (feature_dim < 1) throw InvalidArgument("SyntheticSceneSpec: feature_dim must be >= 1");
        if (ground_gaussians < 0) throw InvalidArgument("SyntheticSceneSpec: ground_gaussians must be >= 0");
    }
};

inline Eigen::Vector3d object_center(const SyntheticSceneSpec& spec, int object) {
    if (spec.num_objects == 1) return Eigen::Vector3d::Zero();
    const double a = 2.0 * std::numbers::pi * object / spec.num_objects;
    return {spec.placement_radius * std::cos(a), spec.placement_radius * std::sin(a), 0.0};
}

namespace detail {

inline Eigen::Vector3d hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h * 6.0, 6.0);
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Eigen::Vector3d rgb;
    if (hp < 1) rgb = {c, x, 0};
    else if (hp < 2) rgb = {x, c, 0};
    else if (hp < 3) rgb = {0, c, x};
    else if (hp < 4) rgb = {0, x, c};
    else if (hp < 5) rgb = {x, 0, c};
    else rgb = {c, 0, x};
    return rgb.array() + (v - c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Gaussian blobs on a circle (plus an optional ground plane, label -1),
/// with seeded small random features and frozen geometry.
inline GaussianScene generate_scene(const SyntheticSceneSpec& spec) {
    spec.validate();
    const Index per = spec.gaussians_per_object;
    const Index n = per * spec.num_objects + spec.ground_gaussians;
    GaussianScene s = GaussianScene::zeros(n, spec.feature_dim);
    std::vector<Index> labels(static_cast<std::size_t>(n), -1);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    auto random_rotation = [&] {
        Eigen::Vector4d q;
        for (int a = 0; a < 4; ++a) q[a] = normal(rng);
        return Eigen::Vector4d(q.normalized());
    };
    Index i = 0;
    for (int o = 0; o < spec.num_objects; ++o) {
        const Eigen::Vector3d c = object_center(spec, o);
        const Eigen::Vector3d base = detail::hsv_to_rgb(static_cast<double>(o) / spec.num_objects, 0.75, 0.9);
        for (Index j = 0; j < per; ++j, ++i) {
            for (int a = 0; a < 3; ++a) s.positions(i, a) = c[a] + spec.blob_sigma * normal(rng);
            for (int a = 0; a < 3; ++a) s.scales(i, a) = spec.gaussian_scale * (0.6 + 0.8 * uni(rng));
            s.rotations.row(i) = random_rotation().transpose();
            s.opacities[i] = 0.5 + 0.45 * uni(rng);
            for (int a = 0; a < 3; ++a) s.colors(i, a) = std::clamp(base[a] + spec.color_noise * normal(rng), 0.0, 1.0);
            labels[static_cast<std::size_t>(i)] = o;
        }
    }
    if (spec.ground_gaussians > 0) {
        const double extent = spec.placement_radius + 3.0 * spec.blob_sigma;
        const double z = -2.5 * spec.blob_sigma;
        const double cell = 2.0 * extent / std::sqrt(static_cast<double>(spec.ground_gaussians));
        for (Index j = 0; j < spec.ground_gaussians; ++j, ++i) {
            s.positions(i, 0) = (2.0 * uni(rng) - 1.0) * extent;
            s.positions(i, 1) = (2.0 * uni(rng) - 1.0) * extent;
            s.positions(i, 2) = z;
            s.scales(i, 0) = s.scales(i, 1) = 0.6 * cell;
            s.scales(i, 2) = 0.2 * spec.gaussian_scale;
            s.opacities[i] = 0.9;
            const double g = 0.35 + 0.1 * uni(rng);
            s.colors.row(i) = Eigen::RowVector3d(g, g, g);
        }
    }
    for (Index r = 0; r < n; ++r)
        for (int j = 0; j < spec.feature_dim; ++j) s.features(r, j) = spec.feature_noise * normal(rng);
    s.instance_labels = std::move(labels);
    s.geometry_frozen = true;
    return s;
}

struct ViewSphereSpec {
    int count = 8;
    double distance = 5.5;
    int width = 64;
    int height = 64;
    double focal = 64.0;
    double elevation_low_deg = 30.0;
    double elevation_high_deg = 50.0;
};

/// Cameras on a view sphere around the scene centroid, alternating between
/// two elevations, all looking at the centroid with +z up.
inline std::vector<Camera> make_view_cameras(const GaussianScene& scene, const ViewSphereSpec& spec) {
    if (spec.count < 1) throw InvalidArgument("make_view_cameras: need at least one camera");
    const Eigen::Vector3d target = scene.positions.colwise().mean().transpose();
    std::vector<Camera> cams;
    for (int v = 0; v < spec.count; ++v) {
        const double az = 2.0 * std::numbers::pi * v / spec.count + 0.3;
        const double el = (v % 2 == 0 ? spec.elevation_low_deg : spec.elevation_high_deg) * std::numbers::pi / 180.0;
        const Eigen::Vector3d eye =
            target + spec.distance * Eigen::Vector3d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
        cams.push_back(Camera::look_at(eye, target, Eigen::Vector3d::UnitZ(), spec.width, spec.height, spec.focal));
    }
    return cams;
}

/// Seeded random unit vectors; for up to 32 categories every pair has |cos| < 0.5.
inline RowMatrix generate_language_embeddings(int categories, int d_lang, std::uint64_t seed) {
    if (d_lang < 8) throw InvalidArgument("generate_language_embeddings: d_lang must be >= 8");
    if (categories < 1) throw InvalidArgument("generate_language_embeddings: need at least one category");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    RowMatrix e(categories, d_lang);
    constexpr int kAttempts = 10000;
    for (int c = 0; c < categories; ++c) {
        bool ok = false;
        for (int attempt = 0; attempt < kAttempts && !ok; ++attempt) {
            Eigen::VectorXd v(d_lang);
            for (int j = 0; j < d_lang; ++j) v[j] = normal(rng);
            v.normalize();
            ok = true;
            if (categories <= 32)
                for (int p = 0; p < c && ok; ++p) ok = std::abs(e.row(p).dot(v)) < 0.5;
            if (ok) e.row(c) = v.transpose();
        }
        if (!ok)
            throw InvalidArgument("generate_language_embeddings: could not find " + std::to_string(categories) +
                                  " separated embeddings; use a larger d_lang");
    }
    return e;
}

enum class PerturbMode { mixed, split_only, merge_only };

/// One training view's segmentation: mask-id raster (0 = background,
/// 1..K), per-mask language embedding and ground-truth provenance.
struct MaskView {
    int camera_id = 0;
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> raster;
    RowMatrix embeddings;                      // K x d_lang, row k-1 is mask k
    std::vector<Index> mask_object;            // majority true object per mask
    std::vector<std::vector<Index>> members;   // true objects covered by each mask
    std::vector<Index> perturbed_objects;      // objects whose mask was split or merged
    std::vector<Index> visible_objects;

    int num_masks() const { return static_cast<int>(mask_object.size()); }
};

namespace detail {

/// Splits a pixel set into `parts` groups by k-means on pixel coordinates.
/// Returns a part index per pixel; empty parts are compacted away.
inline std::vector<int> kmeans_pixels(const std::vector<Eigen::Vector2d>& pts, int parts, std::mt19937_64& rng) {
    const int n = static_cast<int>(pts.size());
    parts = std::min(parts, n);
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    if (parts <= 1) return assign;
    std::vector<Eigen::Vector2d> centers;
    std::uniform_int_distribution<int> pick(0, n - 1);
    centers.push_back(pts[static_cast<std::size_t>(pick(rng))]);
    while (static_cast<int>(centers.size()) < parts) {
        int far = 0;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
            double d = 1e300;
            for (const auto& c : centers) d = std::min(d, (pts[static_cast<std::size_t>(i)] - c).squaredNorm());
            if (d > best) {
                best = d;
                far = i;
            }
        }
        centers.push_back(pts[static_cast<std::size_t>(far)]);
    }
    for (int it = 0; it < 25; ++it) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double best = 1e300;
            for (int c = 0; c < parts; ++c) {
                const double d = (pts[static_cast<std::size_t>(i)] - centers[static_cast<std::size_t>(c)]).squaredNorm();
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != arg) changed = true;
            assign[static_cast<std::size_t>(i)] = arg;
        }
        std::vector<Eigen::Vector2d> sum(static_cast<std::size_t>(parts), Eigen::Vector2d::Zero());
        std::vector<int> cnt(static_cast<std::size_t>(parts), 0);
        for (int i = 0; i < n; ++i) {
            sum[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] += pts[static_cast<std::size_t>(i)];
            ++cnt[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < parts; ++c)
            if (cnt[static_cast<std::size_t>(c)] > 0) centers[static_cast<std::size_t>(c)] = sum[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)];
        if (!changed && it > 0) break;
    }
    std::vector<int> remap(static_cast<std::size_t>(parts), -1);
    int next = 0;
    for (int& a : assign) {
        if (remap[static_cast<std::size_t>(a)] < 0) remap[static_cast<std::size_t>(a)] = next++;
        a = remap[static_cast<std::size_t>(a)];
    }
    return assign;
}

}  // namespace detail

/// Ground-truth object id map of one view: pixel -> object (1-based), 0 where
/// no object covers more than half of the pixel.
inline std::vector<std::uint16_t> object_id_map(const CompositingWeights& w, std::span<const Index> labels,
                                                int num_objects) {
    const RowMatrix cov = label_coverage(w, labels, num_objects);
    std::vector<std::uint16_t> ids(w.pixels(), 0);
    for (Eigen::Index p = 0; p < cov.rows(); ++p)
        for (int o = 0; o < num_objects; ++o)
            if (cov(p, o) > 0.5) ids[static_cast<std::size_t>(p)] = static_cast<std::uint16_t>(o + 1);
    return ids;
}

/// Builds the per-view masks. `object_embeddings` has one row per object
/// (the embedding of its category).
inline std::vector<MaskView> generate_masks(const GaussianScene& scene, const std::vector<Camera>& cameras,
                                            const RowMatrix& object_embeddings, double granularity_p,
                                            std::uint64_t seed, PerturbMode mode = PerturbMode::mixed) {
    if (!scene.instance_labels) throw PreconditionError("generate_masks: scene has no instance labels");
    if (!(granularity_p >= 0.0 && granularity_p <= 1.0)) throw InvalidArgument("generate_masks: granularity_p must be in [0,1]");
    const int num_obj = static_cast<int>(object_embeddings.rows());
    for (Index l : *scene.instance_labels)
        if (l >= num_obj) throw InvalidArgument("generate_masks: instance label without an embedding row");
    for (const auto& cam : cameras) cam.validate();  // nothing may throw inside the parallel loop
    std::vector<MaskView> views(cameras.size());

#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        const Camera& cam = cameras[v];
        const auto w = compute_weights(scene, cam);
        const auto ids = object_id_map(w, *scene.instance_labels, num_obj);
        std::mt19937_64 rng(detail::mix_seed(seed, v));
        std::uniform_real_distribution<double> uni(0.0, 1.0);

        std::vector<std::vector<Eigen::Vector2d>> pix(static_cast<std::size_t>(num_obj));
        std::vector<std::vector<std::size_t>> pix_index(static_cast<std::size_t>(num_obj));
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (ids[p] == 0) continue;
            const auto o = static_cast<std::size_t>(ids[p] - 1);
            pix[o].emplace_back(static_cast<double>(p % static_cast<std::size_t>(cam.width)),
                                static_cast<double>(p / static_cast<std::size_t>(cam.width)));
            pix_index[o].push_back(p);
        }
        MaskView mv;
        mv.camera_id = static_cast<int>(v);
        mv.width = cam.width;
        mv.height = cam.height;
        mv.raster.assign(ids.size(), 0);
        for (int o = 0; o < num_obj; ++o)
            if (!pix[static_cast<std::size_t>(o)].empty()) mv.visible_objects.push_back(o);

        enum class Kind { none, split, merge };
        std::vector<Kind> kind(static_cast<std::size_t>(num_obj), Kind::none);
        std::vector<int> parts(static_cast<std::size_t>(num_obj), 1);
        for (Index o : mv.visible_objects) {
            const bool perturb = uni(rng) < granularity_p;
            const bool merge = uni(rng) < 0.5;
            const int np = uni(rng) < 0.5 ? 2 : 3;
            if (!perturb) continue;
            mv.perturbed_objects.push_back(o);
            Kind k = mode == PerturbMode::split_only ? Kind::split
                     : mode == PerturbMode::merge_only ? Kind::merge
                                                       : (merge ? Kind::merge : Kind::split);
            kind[static_cast<std::size_t>(o)] = k;
            parts[static_cast<std::size_t>(o)] = np;
        }

        // Merge groups via union-find over (object, nearest visible object).
        std::vector<int> parent(static_cast<std::size_t>(num_obj));
        for (int o = 0; o < num_obj; ++o) parent[static_cast<std::size_t>(o)] = o;
        auto find = [&](int x) {
            while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
            return x;
        };
        auto centroid = [&](int o) {
            Eigen::Vector2d c = Eigen::Vector2d::Zero();
            for (const auto& q : pix[static_cast<std::size_t>(o)]) c += q;
            return Eigen::Vector2d(c / static_cast<double>(pix[static_cast<std::size_t>(o)].size()));
        };
        for (Index o : mv.visible_objects) {
            if (kind[static_cast<std::size_t>(o)] != Kind::merge) continue;
            int partner = -1;
            double best = 1e300;
            const Eigen::Vector2d co = centroid(o);
            for (Index q : mv.visible_objects) {
                if (q == o) continue;
                const double d = (centroid(q) - co).squaredNorm();
                if (d < best) {
                    best = d;
                    partner = q;
                }
            }
            if (partner < 0) {
                kind[static_cast<std::size_t>(o)] = Kind::split;
                continue;
            }
            const int a = find(o), b = find(partner);
            parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
        }
        std::vector<int> group_size(static_cast<std::size_t>(num_obj), 0);
        for (Index o : mv.visible_objects) ++group_size[static_cast<std::size_t>(find(o))];

        // Emit masks ordered by group root, then part.
        int next_id = 1;
        std::vector<Eigen::RowVectorXd> emb_rows;
        for (Index root : mv.visible_objects) {
            if (find(root) != root) continue;
            std::vector<Index> group;
            for (Index o : mv.visible_objects)
                if (find(o) == root) group.push_back(o);
            if (group.size() > 1) {
                Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(object_embeddings.cols());
                Index major = group.front();
                std::size_t major_n = 0;
                for (Index o : group) {
                    const auto cnt = pix[static_cast<std::size_t>(o)].size();
                    e += static_cast<double>(cnt) * object_embeddings.row(o);
                    for (std::size_t p : pix_index[static_cast<std::size_t>(o)]) mv.raster[p] = static_cast<std::uint16_t>(next_id);
                    if (cnt > major_n) {
                        major_n = cnt;
                        major = o;
                    }
                }
                emb_rows.push_back(e.normalized());
                mv.mask_object.push_back(major);
                mv.members.push_back(group);
                ++next_id;
                continue;
            }
            const Index o = root;
            const bool split = kind[static_cast<std::size_t>(o)] == Kind::split && pix[static_cast<std::size_t>(o)].size() >= 2;
            const auto part = split ? detail::kmeans_pixels(pix[static_cast<std::size_t>(o)], parts[static_cast<std::size_t>(o)], rng)
                                    : std::vector<int>(pix[static_cast<std::size_t>(o)].size(), 0);
            const int np = part.empty() ? 0 : *std::max_element(part.begin(), part.end()) + 1;
            for (int k = 0; k < np; ++k) {
                for (std::size_t j = 0; j < part.size(); ++j)
                    if (part[j] == k) mv.raster[pix_index[static_cast<std::size_t>(o)][j]] = static_cast<std::uint16_t>(next_id);
                emb_rows.push_back(object_embeddings.row(o));
                mv.mask_object.push_back(o);
                mv.members.push_back({o});
                ++next_id;
            }
        }
        mv.embeddings = RowMatrix(static_cast<Eigen::Index>(emb_rows.size()), object_embeddings.cols());
        for (std::size_t k = 0; k < emb_rows.size(); ++k) mv.embeddings.row(static_cast<Eigen::Index>(k)) = emb_rows[k];
        views[v] = std::move(mv);
    }
    return views;
}

/// Everything a training run consumes, generated from one seed.
struct SyntheticDataset {
    SyntheticSceneSpec scene_spec;
    GaussianScene scene;
    std::vector<Camera> cameras;
    std::vector<MaskView> views;
    RowMatrix category_embeddings;  // C x d_lang, also used as text queries
    std::vector<int> object_categories;
};

struct DatasetSpec {
    SyntheticSceneSpec scene;
    ViewSphereSpec views;
    double granularity_p = 0.0;
    PerturbMode perturb_mode = PerturbMode::mixed;
    int language_dim = 32;
};

inline RowMatrix object_embedding_rows(const RowMatrix& category_embeddings, const std::vector<int>& object_categories) {
    RowMatrix e(static_cast<Eigen::Index>(object_categories.size()), category_embeddings.cols());
    for (std::size_t o = 0; o < object_categories.size(); ++o)
        e.row(static_cast<Eigen::Index>(o)) = category_embeddings.row(object_categories[o]);
    return e;
}

inline SyntheticDataset generate_dataset(const DatasetSpec& spec) {
    SyntheticDataset ds;
    ds.scene_spec = spec.scene;
    ds.scene = generate_scene(spec.scene);
    ds.cameras = make_view_cameras(ds.scene, spec.views);
    ds.category_embeddings = generate_language_embeddings(spec.scene.num_categories(), spec.language_dim,
                                                          detail::mix_seed(spec.scene.seed, 101));
    for (int o = 0; o < spec.scene.num_objects; ++o) ds.object_categories.push_back(spec.scene.category_of(o));
    ds.views = generate_masks(ds.scene, ds.cameras, object_embedding_rows(ds.category_embeddings, ds.object_categories),
                              spec.granularity_p, detail::mix_seed(spec.scene.seed, 202), spec.perturb_mode);
    return ds;
}

}  // namespace cags
