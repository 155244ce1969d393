#include "test_util.hpp"

#include <gtest/gtest.h>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace cags;

namespace {

struct Setup {
    SyntheticDataset ds;
    std::vector<SemanticView> views;
};

Setup setup(int objects, double p, std::uint64_t seed, int num_views = 8) {
    DatasetSpec spec;
    spec.scene.num_objects = objects;
    spec.scene.seed = seed;
    spec.granularity_p = p;
    spec.views.count = num_views;
    Setup s{generate_dataset(spec), {}};
    for (const auto& v : s.ds.views) s.views.push_back({v.camera_id, v.raster, &v.embeddings});
    return s;
}

std::vector<Index> true_labels(const Setup& s) { return *s.ds.scene.instance_labels; }

}  // namespace

TEST(Association, Examples) {
    const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1}, half{1, 0, 0, 0};
    Eigen::VectorXd e0(2), e1(2);
    e0 << 1, 0;
    e1 << 0, 1;
    EXPECT_EQ(association_score(a, b, e0, e0), 0.0);
    EXPECT_DOUBLE_EQ(association_score(a, a, e0, e0), 1.0);
    EXPECT_DOUBLE_EQ(mask_iou(a, half), 0.5);
    EXPECT_EQ(association_score(a, half, e0, e1), 0.0);
    // Opposite features clamp to 0 rather than going negative.
    EXPECT_EQ(association_score(a, a, e0, -e0), 0.0);
    EXPECT_EQ(association_score(a, a, Eigen::VectorXd::Zero(2), e0), 0.0);
    EXPECT_THROW(association_score(a, std::vector<std::uint8_t>{1}, e0, e0), InvalidArgument);
    EXPECT_THROW(semantic_factor(e0, Eigen::VectorXd::Ones(3)), InvalidArgument);
    EXPECT_EQ(mask_iou(std::vector<std::uint8_t>(4, 0), std::vector<std::uint8_t>(4, 0)), 0.0);
}

TEST(Association, ScoreInUnitInterval) {
    std::mt19937_64 rng(3);
    std::bernoulli_distribution coin(0.4);
    std::normal_distribution<double> g(0, 1);
    for (int t = 0; t < 200; ++t) {
        std::vector<std::uint8_t> a(50), b(50);
        for (int p = 0; p < 50; ++p) {
            a[static_cast<std::size_t>(p)] = coin(rng);
            b[static_cast<std::size_t>(p)] = coin(rng);
        }
        Eigen::VectorXd u(4), v(4);
        for (int c = 0; c < 4; ++c) {
            u[c] = g(rng);
            v[c] = g(rng);
        }
        const double s = association_score(a, b, u, v);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(Matching, SingleInstancePerfectOverlap) {
    auto s = setup(1, 0.0, 1, 1);
    ASSERT_EQ(s.ds.views[0].num_masks(), 1);
    std::vector<Association> log;
    const auto labels = true_labels(s);
    const auto t = match_and_accumulate(s.ds.scene, labels, 1, s.views, s.ds.cameras, {}, &log);
    ASSERT_EQ(log.size(), 1u);
    EXPECT_NEAR(log[0].score, 1.0, 1e-12);
    EXPECT_EQ(t.match_count[0], 1);
    EXPECT_LT((t.embeddings.row(0) - s.ds.views[0].embeddings.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Matching, InvisibleInstanceGetsNothing) {
    auto s = setup(1, 0.0, 2, 1);
    s.ds.cameras.push_back(Camera::look_at({0, 0, 50}, {0, 0, 80}, {0, 1, 0}, 64, 64, 64));
    const RowMatrix none(0, s.ds.category_embeddings.cols());
    std::vector<std::uint16_t> blank(64 * 64, 0);
    std::vector<SemanticView> away{{1, blank, &none}};
    const auto labels = true_labels(s);
    const auto t = match_and_accumulate(s.ds.scene, labels, 1, away, s.ds.cameras);
    EXPECT_EQ(t.match_count[0], 0);
    EXPECT_EQ(t.embeddings.rows(), 1);
    EXPECT_EQ(t.embeddings.row(0).norm(), 0.0);
}

TEST(Matching, CleanMasksRecoverCategories) {
    auto s = setup(2, 0.0, 3, 4);
    const auto labels = true_labels(s);
    const auto t = match_and_accumulate(s.ds.scene, labels, 2, s.views, s.ds.cameras);
    for (int k = 0; k < 2; ++k) {
        EXPECT_GT(t.match_count[static_cast<std::size_t>(k)], 0);
        const double cos = t.embeddings.row(k).dot(s.ds.category_embeddings.row(s.ds.object_categories[static_cast<std::size_t>(k)]));
        EXPECT_GT(cos, 0.99) << "instance " << k;
        EXPECT_NEAR(t.embeddings.row(k).norm(), 1.0, 1e-12);
    }
}

TEST(Matching, SwappingMaskIdsChangesNothing) {
    auto s = setup(3, 0.0, 4, 2);
    const auto labels = true_labels(s);
    const auto base = match_and_accumulate(s.ds.scene, labels, 3, s.views, s.ds.cameras);
    // Swap ids 1 and 2 in view 0, with their embedding rows.
    std::vector<std::uint16_t> raster = s.ds.views[0].raster;
    for (auto& m : raster) m = m == 1 ? 2 : m == 2 ? 1 : m;
    RowMatrix emb = s.ds.views[0].embeddings;
    emb.row(0).swap(emb.row(1));
    auto views = s.views;
    views[0] = {views[0].camera, raster, &emb};
    EXPECT_TRUE(match_and_accumulate(s.ds.scene, labels, 3, views, s.ds.cameras) == base);
}

TEST(Matching, EmbeddingScaleDoesNotChangeDecisions) {
    auto s = setup(5, 0.3, 5);
    const auto labels = true_labels(s);
    std::vector<Association> a, b;
    const auto ta = match_and_accumulate(s.ds.scene, labels, 5, s.views, s.ds.cameras, {}, &a);
    std::vector<RowMatrix> scaled;
    for (const auto& v : s.ds.views) scaled.push_back(3.5 * v.embeddings);
    auto views = s.views;
    for (std::size_t v = 0; v < views.size(); ++v) views[v].embeddings = &scaled[v];
    const auto tb = match_and_accumulate(s.ds.scene, labels, 5, views, s.ds.cameras, {}, &b);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].instance, b[i].instance);
        EXPECT_EQ(a[i].mask_id, b[i].mask_id);
    }
    EXPECT_LT((ta.embeddings - tb.embeddings).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Matching, ConsensusOfRepeatsIsTheEmbedding) {
    auto s = setup(1, 0.0, 6, 1);
    const auto labels = true_labels(s);
    std::vector<SemanticView> repeated(6, s.views[0]);
    const auto t = match_and_accumulate(s.ds.scene, labels, 1, repeated, s.ds.cameras);
    EXPECT_EQ(t.match_count[0], 6);
    for (Eigen::Index c = 0; c < t.embeddings.cols(); ++c)
        EXPECT_DOUBLE_EQ(t.embeddings(0, c), s.ds.views[0].embeddings(0, c));
}

TEST(Matching, NoiseGaussiansAndValidation) {
    auto s = setup(2, 0.0, 7, 2);
    std::vector<Index> labels = true_labels(s);
    std::fill(labels.begin(), labels.end(), -1);
    const auto t = match_and_accumulate(s.ds.scene, labels, 2, s.views, s.ds.cameras);
    EXPECT_EQ(t.match_count, (std::vector<int>{0, 0}));
    EXPECT_THROW(match_and_accumulate(s.ds.scene, std::vector<Index>(3, 0), 2, s.views, s.ds.cameras), InvalidArgument);
    auto bad = s.views;
    bad[0].camera = 9;
    EXPECT_THROW(match_and_accumulate(s.ds.scene, true_labels(s), 2, bad, s.ds.cameras), InvalidArgument);
    const RowMatrix short_emb(0, 32);
    bad = s.views;
    bad[0].embeddings = &short_emb;
    EXPECT_THROW(match_and_accumulate(s.ds.scene, true_labels(s), 2, bad, s.ds.cameras), InvalidArgument);
}

TEST(Matching, DeterministicAcrossThreads) {
    auto s = setup(5, 0.3, 8);
    const auto labels = true_labels(s);
    const auto a = match_and_accumulate(s.ds.scene, labels, 5, s.views, s.ds.cameras);
#ifdef _OPENMP
    const int before = omp_get_max_threads();
    omp_set_num_threads(3);
    const auto b = match_and_accumulate(s.ds.scene, labels, 5, s.views, s.ds.cameras);
    omp_set_num_threads(before);
    EXPECT_TRUE(a == b);
#endif
}

TEST(Query, ArgmaxAndThreshold) {
    SemanticTable t;
    t.embeddings = RowMatrix::Zero(3, 3);
    t.embeddings(0, 0) = 1;
    t.embeddings(1, 1) = 1;
    t.match_count = {1, 2, 0};
    const std::vector<Index> labels{0, 1, -1, 0, 2, 1};
    Eigen::VectorXd q(3);
    q << 2, 0, 0;
    const auto r = text_query(t, labels, q, QueryMode::parse("argmax"));
    EXPECT_EQ(r.instances, (std::vector<Index>{0}));
    EXPECT_EQ(r.gaussians, (std::vector<Index>{0, 3}));
    EXPECT_NEAR(r.similarity[0], 1.0, 1e-12);
    EXPECT_TRUE(std::isnan(r.similarity[2]));

    Eigen::VectorXd ortho(3);
    ortho << 0, 0, 1;
    EXPECT_TRUE(text_query(t, labels, ortho, QueryMode::parse("threshold:0.5")).gaussians.empty());

    Eigen::VectorXd both(3);
    both << 1, 1, 0;
    const auto r2 = text_query(t, labels, both, QueryMode::parse("threshold:0.5"));
    EXPECT_EQ(r2.instances, (std::vector<Index>{0, 1}));
    EXPECT_EQ(r2.gaussians, (std::vector<Index>{0, 1, 3, 5}));

    SemanticTable empty;
    const auto r3 = text_query(empty, labels, q, {});
    EXPECT_TRUE(r3.empty_table);
    EXPECT_TRUE(r3.gaussians.empty());
    EXPECT_THROW(text_query(t, labels, Eigen::VectorXd::Ones(2), {}), InvalidArgument);
}

TEST(Query, ModeParsing) {
    EXPECT_EQ(QueryMode::parse("argmax").kind, QueryMode::argmax);
    const auto m = QueryMode::parse("threshold:0.25");
    EXPECT_EQ(m.kind, QueryMode::threshold);
    EXPECT_EQ(m.threshold_value, 0.25);
    EXPECT_THROW(QueryMode::parse("threshold:"), InvalidArgument);
    EXPECT_THROW(QueryMode::parse("threshold:0.3x"), InvalidArgument);
    EXPECT_THROW(QueryMode::parse("top3"), InvalidArgument);
}

TEST(Query, SyntheticCategoryQueriesSelectTheirObject) {
    auto s = setup(5, 0.0, 9);
    const auto labels = true_labels(s);
    const auto t = match_and_accumulate(s.ds.scene, labels, 5, s.views, s.ds.cameras);
    for (int o = 0; o < 5; ++o) {
        const Eigen::VectorXd q = s.ds.category_embeddings.row(s.ds.object_categories[static_cast<std::size_t>(o)]).transpose();
        const auto r = text_query(t, labels, q, {});
        EXPECT_EQ(r.instances, (std::vector<Index>{o}));
    }
}

TEST(SemanticTableJson, RoundTripAndErrors) {
    auto s = setup(3, 0.2, 10, 3);
    const auto labels = true_labels(s);
    const auto t = match_and_accumulate(s.ds.scene, labels, 3, s.views, s.ds.cameras);
    const auto j = semantic_table_to_json(t);
    EXPECT_TRUE(semantic_table_from_json(nlohmann::json::parse(j.dump())) == t);
    auto broken = nlohmann::json::parse(j.dump());
    broken["num_instances"] = 4;
    EXPECT_THROW(semantic_table_from_json(broken), SchemaError);
    broken = nlohmann::json::parse(j.dump());
    broken["instances"][0]["id"] = 7;
    EXPECT_THROW(semantic_table_from_json(broken), SchemaError);
}
