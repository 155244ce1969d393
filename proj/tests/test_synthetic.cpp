#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace cags;

namespace {

DatasetSpec small_spec(double p, std::uint64_t seed, PerturbMode mode = PerturbMode::mixed) {
    DatasetSpec d;
    d.scene.seed = seed;
    d.scene.gaussians_per_object = 120;
    d.granularity_p = p;
    d.perturb_mode = mode;
    return d;
}

}  // namespace

TEST(Scene, SingleBlob) {
    SyntheticSceneSpec spec;
    spec.num_objects = 1;
    spec.gaussians_per_object = 10;
    const auto s = generate_scene(spec);
    EXPECT_EQ(s.size(), 10);
    ASSERT_TRUE(s.instance_labels.has_value());
    for (Index l : *s.instance_labels) EXPECT_EQ(l, 0);
    EXPECT_TRUE(s.geometry_frozen);
    EXPECT_NO_THROW(validate_scene(s));
}

TEST(Scene, DeterministicInSeed) {
    SyntheticSceneSpec spec;
    spec.seed = 17;
    EXPECT_TRUE(generate_scene(spec) == generate_scene(spec));
    SyntheticSceneSpec other = spec;
    other.seed = 18;
    EXPECT_FALSE(generate_scene(spec) == generate_scene(other));
}

TEST(Scene, ObjectsAreWellSeparated) {
    SyntheticSceneSpec spec;
    spec.seed = 3;
    const auto s = generate_scene(spec);
    std::vector<Eigen::Vector3d> c(5, Eigen::Vector3d::Zero());
    for (Index i = 0; i < s.size(); ++i) c[static_cast<std::size_t>((*s.instance_labels)[static_cast<std::size_t>(i)])] += s.positions.row(i).transpose();
    for (auto& v : c) v /= spec.gaussians_per_object;
    double dmin = 1e9;
    for (int a = 0; a < 5; ++a)
        for (int b = a + 1; b < 5; ++b) dmin = std::min(dmin, (c[static_cast<std::size_t>(a)] - c[static_cast<std::size_t>(b)]).norm());
    EXPECT_GT(dmin, 4.0 * spec.blob_sigma);
}

TEST(Scene, GroundPlaneIsUnlabelled) {
    SyntheticSceneSpec spec;
    spec.ground_gaussians = 50;
    const auto s = generate_scene(spec);
    EXPECT_EQ(s.size(), 5 * 200 + 50);
    for (Index i = 1000; i < s.size(); ++i) EXPECT_EQ((*s.instance_labels)[static_cast<std::size_t>(i)], -1);
}

TEST(Scene, RejectsBadSpec) {
    SyntheticSceneSpec spec;
    spec.num_objects = 0;
    EXPECT_THROW(generate_scene(spec), InvalidArgument);
    spec = {};
    spec.categories = {0, 1};
    EXPECT_THROW(generate_scene(spec), InvalidArgument);
}

TEST(Embeddings, SeparationAndDeterminism) {
    const RowMatrix two = generate_language_embeddings(2, 16, 1);
    EXPECT_NEAR(two.row(0).norm(), 1.0, 1e-12);
    EXPECT_LT(std::abs(two.row(0).dot(two.row(1))), 0.5);
    EXPECT_EQ(two, generate_language_embeddings(2, 16, 1));
    const RowMatrix one = generate_language_embeddings(1, 8, 5);
    EXPECT_NEAR(one.row(0).norm(), 1.0, 1e-6);
    const RowMatrix many = generate_language_embeddings(32, 32, 2);
    for (int a = 0; a < 32; ++a)
        for (int b = a + 1; b < 32; ++b) EXPECT_LT(std::abs(many.row(a).dot(many.row(b))), 0.5);
    EXPECT_THROW(generate_language_embeddings(2, 4, 1), InvalidArgument);
    EXPECT_THROW(generate_language_embeddings(32, 8, 1), InvalidArgument);
}

TEST(Cameras, LookAtCentroidAndSeeObjects) {
    const auto ds = generate_dataset(small_spec(0.0, 1));
    ASSERT_EQ(ds.cameras.size(), 8u);
    const Eigen::Vector3d centroid = ds.scene.positions.colwise().mean().transpose();
    for (const auto& cam : ds.cameras) {
        const Eigen::Vector3d p = cam.rotation * centroid + cam.translation;
        EXPECT_NEAR(p.x(), 0.0, 1e-9);
        EXPECT_NEAR(p.y(), 0.0, 1e-9);
        EXPECT_NEAR(p.z(), 5.5, 1e-9);
    }
    for (const auto& v : ds.views) EXPECT_GE(v.visible_objects.size(), 4u);
}

TEST(Masks, CleanMasksMatchSilhouettes) {
    const auto ds = generate_dataset(small_spec(0.0, 2));
    for (const auto& v : ds.views) {
        const auto w = compute_weights(ds.scene, ds.cameras[static_cast<std::size_t>(v.camera_id)]);
        const auto ids = object_id_map(w, *ds.scene.instance_labels, 5);
        EXPECT_EQ(v.num_masks(), static_cast<int>(v.visible_objects.size()));
        EXPECT_TRUE(v.perturbed_objects.empty());
        for (std::size_t p = 0; p < ids.size(); ++p) {
            EXPECT_EQ(ids[p] != 0, v.raster[p] != 0);
            if (v.raster[p]) EXPECT_EQ(v.mask_object[static_cast<std::size_t>(v.raster[p] - 1)] + 1, ids[p]);
        }
    }
}

TEST(Masks, InvariantsUnderPerturbation) {
    const auto ds = generate_dataset(small_spec(0.5, 3));
    for (const auto& v : ds.views) {
        // Ids are contiguous 1..K and each is used.
        std::set<int> used;
        for (auto m : v.raster)
            if (m) used.insert(m);
        EXPECT_EQ(static_cast<int>(used.size()), v.num_masks());
        if (!used.empty()) {
            EXPECT_EQ(*used.begin(), 1);
            EXPECT_EQ(*used.rbegin(), v.num_masks());
        }
        for (Eigen::Index k = 0; k < v.embeddings.rows(); ++k) EXPECT_NEAR(v.embeddings.row(k).norm(), 1.0, 1e-6);
        EXPECT_EQ(v.members.size(), static_cast<std::size_t>(v.num_masks()));
    }
}

TEST(Masks, SplitOnlyProducesMultipleMasks) {
    const auto ds = generate_dataset(small_spec(1.0, 4, PerturbMode::split_only));
    for (const auto& v : ds.views) {
        std::vector<int> per_object(5, 0);
        for (Index o : v.mask_object) ++per_object[static_cast<std::size_t>(o)];
        for (Index o : v.visible_objects) EXPECT_GE(per_object[static_cast<std::size_t>(o)], 2) << "view " << v.camera_id << " object " << o;
    }
}

TEST(Masks, MergeOnlyAreaWeightsEmbeddings) {
    const auto ds = generate_dataset(small_spec(1.0, 5, PerturbMode::merge_only));
    bool saw_merge = false;
    for (const auto& v : ds.views) {
        for (int k = 0; k < v.num_masks(); ++k) {
            const auto& mem = v.members[static_cast<std::size_t>(k)];
            if (mem.size() < 2) continue;
            saw_merge = true;
            Eigen::RowVectorXd want = Eigen::RowVectorXd::Zero(v.embeddings.cols());
            const auto w = compute_weights(ds.scene, ds.cameras[static_cast<std::size_t>(v.camera_id)]);
            const auto ids = object_id_map(w, *ds.scene.instance_labels, 5);
            for (Index o : mem) {
                const auto area = static_cast<double>(std::count(ids.begin(), ids.end(), static_cast<std::uint16_t>(o + 1)));
                want += area * ds.category_embeddings.row(ds.object_categories[static_cast<std::size_t>(o)]);
            }
            EXPECT_LT((v.embeddings.row(k) - want.normalized()).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
    EXPECT_TRUE(saw_merge);
}

TEST(Masks, PerturbedFractionTracksProbability) {
    double perturbed = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto ds = generate_dataset(small_spec(0.3, 100 + seed));
        for (const auto& v : ds.views) {
            perturbed += static_cast<double>(v.perturbed_objects.size());
            total += static_cast<double>(v.visible_objects.size());
        }
    }
    EXPECT_NEAR(perturbed / total, 0.3, 0.05);
}

TEST(Masks, EmptyViewGivesNoMasks) {
    auto ds = generate_dataset(small_spec(0.0, 6));
    std::vector<Camera> away{Camera::look_at({0, 0, 10}, {0, 0, 20}, {0, 1, 0}, 32, 32, 32)};
    const auto views = generate_masks(ds.scene, away, object_embedding_rows(ds.category_embeddings, ds.object_categories), 0.5, 1);
    ASSERT_EQ(views.size(), 1u);
    EXPECT_EQ(views[0].num_masks(), 0);
    EXPECT_TRUE(std::all_of(views[0].raster.begin(), views[0].raster.end(), [](auto m) { return m == 0; }));
}

TEST(Masks, DeterministicAndValidatesInputs) {
    const auto a = generate_dataset(small_spec(0.4, 7));
    const auto b = generate_dataset(small_spec(0.4, 7));
    ASSERT_EQ(a.views.size(), b.views.size());
    for (std::size_t v = 0; v < a.views.size(); ++v) {
        EXPECT_EQ(a.views[v].raster, b.views[v].raster);
        EXPECT_EQ(a.views[v].embeddings, b.views[v].embeddings);
    }
    GaussianScene unlabeled = a.scene;
    unlabeled.instance_labels.reset();
    EXPECT_THROW(generate_masks(unlabeled, a.cameras, a.category_embeddings, 0.1, 1), PreconditionError);
    EXPECT_THROW(generate_masks(a.scene, a.cameras, a.category_embeddings, 1.5, 1), InvalidArgument);
    std::vector<Camera> bad = a.cameras;
    bad[3].fx = -1;
    EXPECT_THROW(generate_masks(a.scene, bad, a.category_embeddings, 0.1, 1), InvalidArgument);
}

TEST(DatasetIo, RoundTrip) {
    const auto ds = generate_dataset(small_spec(0.3, 8));
    const auto dir = std::filesystem::temp_directory_path() / "cags_test_dataset";
    std::filesystem::remove_all(dir);
    const std::string manifest = save_dataset(ds, dir.string());
    const auto back = load_dataset(manifest);
    EXPECT_TRUE(back.scene == ds.scene);
    ASSERT_EQ(back.cameras.size(), ds.cameras.size());
    for (std::size_t c = 0; c < ds.cameras.size(); ++c) {
        EXPECT_EQ(back.cameras[c].pose(), ds.cameras[c].pose());
        EXPECT_EQ(back.cameras[c].fx, ds.cameras[c].fx);
    }
    ASSERT_EQ(back.views.size(), ds.views.size());
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        EXPECT_EQ(back.views[v].raster, ds.views[v].raster);
        EXPECT_EQ(back.views[v].embeddings, ds.views[v].embeddings);
        EXPECT_EQ(back.views[v].mask_object, ds.views[v].mask_object);
    }
    EXPECT_EQ(back.category_embeddings, ds.category_embeddings);
    EXPECT_EQ(back.object_categories, ds.object_categories);
    EXPECT_EQ(dataset_files(manifest).size(), 5u + 2u * ds.views.size());
}

TEST(DatasetIo, ClearErrors) {
    const auto ds = generate_dataset(small_spec(0.0, 9));
    const auto dir = std::filesystem::temp_directory_path() / "cags_test_dataset_err";
    std::filesystem::remove_all(dir);
    const std::string manifest = save_dataset(ds, dir.string());
    EXPECT_THROW(load_dataset((dir / "nope.json").string()), MissingInputError);
    std::filesystem::remove(dir / "masks" / "view_002.pgm");
    try {
        load_dataset(manifest);
        FAIL() << "expected MissingInputError";
    } catch (const MissingInputError& e) {
        EXPECT_NE(std::string(e.what()).find("view_002.pgm"), std::string::npos);
    }
    io::write_text((dir / "manifest.json").string(), "{\"format_version\": \"cags-dataset-1\"}");
    try {
        load_dataset(manifest);
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_EQ(e.issues().size(), 4u);
    }
    io::write_text((dir / "manifest.json").string(), "{\"format_version\": ");
    EXPECT_THROW(load_dataset(manifest), ParseError);
}
