#include "cpcl/oplm.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace cpcl;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
    Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    m.rowwise().normalize();
    return m;
}

PseudoLabeling lab(std::vector<int> l, Modality m) {
    const int n = l.empty() ? 0 : std::max(0, *std::max_element(l.begin(), l.end()) + 1);
    return {std::move(l), n, m};
}

}  // namespace

TEST(Mining, HandTraceImageOutlier) {
    // Identity A: images a1 (cluster 0), a2 (outlier), captions t1, t2 share text cluster 0.
    // Identity B: image b1 (cluster 1), caption t3. a2 sits closest to b1 in feature space.
    const Matrix fv = rows({{1, 0, 0}, {0, 0.2, 1}, {0, 0, 1}});
    const Matrix ft = rows({{1, 0, 0}, {1, 0.1, 0}, {0, 0, 1}});
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}, {2}}, 3);
    auto lv = lab({0, kOutlier, 1}, Modality::Image);
    const auto lt = lab({0, 0, 1}, Modality::Text);
    const auto r = mine_outliers_v2t({fv, ft, pairs}, lv, lt);
    EXPECT_EQ(lv.labels, (std::vector<int>{0, 0, 1}));
    ASSERT_EQ(r.assigned.size(), 1u);
    EXPECT_EQ(r.assigned[0].instance, 1u);
    EXPECT_EQ(r.assigned[0].cluster, 0);
    EXPECT_EQ(r.assigned[0].modality, Modality::Image);
    EXPECT_EQ(r.initial_outliers_v, 1u);
    EXPECT_EQ(r.remaining_outliers_v, 0u);
}

TEST(Mining, HandTraceTextMirror) {
    const Matrix fv = rows({{1, 0, 0}, {1, 0.1, 0}, {0, 0, 1}});
    const Matrix ft = rows({{1, 0, 0}, {0, 0.2, 1}, {0, 0, 1}});
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}, {2}}, 3);
    const auto lv = lab({0, 0, 1}, Modality::Image);
    auto lt = lab({0, kOutlier, 1}, Modality::Text);
    auto lv_copy = lv;
    const auto r = run_refined_stage({fv, ft, pairs}, lv_copy, lt);
    EXPECT_EQ(lt.labels, (std::vector<int>{0, 0, 1}));
    EXPECT_EQ(lv_copy, lv);
    ASSERT_EQ(r.assigned.size(), 1u);
    EXPECT_EQ(r.assigned[0].modality, Modality::Text);
    EXPECT_EQ(r.assigned_count(Modality::Text), 1u);
}

TEST(Mining, PicksNearestCandidate) {
    // x0 (outlier) pairs t0; t0's cluster-mates t1, t2 pair x1 (cluster 0) and x2 (cluster 1).
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}, {2}}, 3);
    const Matrix ft = rows({{1, 0}, {1, 0}, {1, 0}});
    const auto lt = lab({0, 0, 0}, Modality::Text);
    for (int nearer : {1, 2}) {
        const Matrix fv = nearer == 2 ? rows({{0, 1}, {1, 0}, {0.1, 1}}) : rows({{0, 1}, {0.1, 1}, {1, 0}});
        auto lv = lab({kOutlier, 0, 1}, Modality::Image);
        mine_outliers_v2t({fv, ft, pairs}, lv, lt);
        EXPECT_EQ(lv[0], nearer - 1);
    }
}

TEST(Mining, PartnersAllOutliersLeavesOutlier) {
    const Matrix f = rows({{1, 0}, {0, 1}});
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}}, 2);
    auto lv = lab({kOutlier, 0}, Modality::Image);
    const auto lt = lab({kOutlier, 0}, Modality::Text);
    const auto r = mine_outliers_v2t({f, f, pairs}, lv, lt);
    EXPECT_TRUE(lv.is_outlier(0));
    EXPECT_TRUE(r.assigned.empty());
}

TEST(Mining, CandidatesAllOutliersLeavesOutlier) {
    // x0's caption shares a cluster with t1, whose image x1 is itself an outlier.
    const Matrix f = rows({{1, 0}, {0, 1}});
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}}, 2);
    MiningConfig deferred;
    deferred.deferred = true;
    auto lv = PseudoLabeling{{kOutlier, kOutlier}, 0, Modality::Image};
    const auto lt = lab({0, 0}, Modality::Text);
    const auto r = mine_outliers_v2t({f, f, pairs}, lv, lt, deferred);
    EXPECT_EQ(lv.outlier_count(), 2u);
    EXPECT_TRUE(r.assigned.empty());
}

TEST(Mining, NoOutliersIsNoOp) {
    const Matrix f = rows({{1, 0}, {0, 1}});
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}}, 2);
    auto lv = lab({0, 1}, Modality::Image);
    auto lt = lab({0, 1}, Modality::Text);
    const auto r = run_refined_stage({f, f, pairs}, lv, lt);
    EXPECT_TRUE(r.assigned.empty());
    EXPECT_TRUE(r.excluded_trace.empty());
    EXPECT_EQ(lv.labels, (std::vector<int>{0, 1}));
}

TEST(Mining, ImmediateVersusDeferred) {
    // x0 is reachable from x2 directly; x1 only through x0.
    // Texts: t0 (x0), t1 (x1), t2 (x2), t3 (x0); clusters {t0, t2}, {t1, t3}.
    const auto pairs = PairGraph::from_image_to_texts({{0, 3}, {1}, {2}}, 4);
    const Matrix fv = rows({{1, 0}, {1, 0.1}, {1, 0.2}});
    const Matrix ft = rows({{1, 0}, {1, 0}, {1, 0}, {1, 0}});
    const auto lt = lab({0, 1, 0, 1}, Modality::Text);

    auto immediate = lab({kOutlier, kOutlier, 0}, Modality::Image);
    mine_outliers_v2t({fv, ft, pairs}, immediate, lt);
    EXPECT_EQ(immediate.labels, (std::vector<int>{0, 0, 0}));

    MiningConfig cfg;
    cfg.deferred = true;
    auto deferred = lab({kOutlier, kOutlier, 0}, Modality::Image);
    mine_outliers_v2t({fv, ft, pairs}, deferred, lt, cfg);
    EXPECT_EQ(deferred.labels, (std::vector<int>{0, kOutlier, 0}));
}

TEST(Mining, FeatureKnnReachesBeyondOwnCluster) {
    // t1 is alone in its cluster, so cluster-mates finds nothing; its nearest clustered
    // caption t0 belongs to x0.
    const auto pairs = PairGraph::from_image_to_texts({{0}, {1}, {2}}, 3);
    const Matrix fv = rows({{1, 0}, {1, 0.1}, {0, 1}});
    const Matrix ft = rows({{1, 0}, {1, 0.05}, {0, 1}});
    const auto lt = lab({0, 1, 2}, Modality::Text);

    auto mates = lab({0, kOutlier, 1}, Modality::Image);
    mine_outliers_v2t({fv, ft, pairs}, mates, lt);
    EXPECT_TRUE(mates.is_outlier(1));

    MiningConfig cfg;
    cfg.neighbor_mode = NeighborMode::FeatureKnn;
    cfg.knn = 1;
    auto knn = lab({0, kOutlier, 1}, Modality::Image);
    mine_outliers_v2t({fv, ft, pairs}, knn, lt, cfg);
    EXPECT_EQ(knn[1], 0);
}

TEST(Mining, RandomInvariants) {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 100; ++trial) {
        auto c = oracle::random_mining_case(rng);
        const auto before_v = c.labels_v, before_t = c.labels_t;
        MiningConfig cfg;
        cfg.image_first = trial % 2 == 0;
        cfg.deferred = trial % 3 == 0;
        const auto r = run_refined_stage({c.image_features, c.text_features, c.pairs}, c.labels_v, c.labels_t, cfg);

        EXPECT_LE(c.labels_v.outlier_count(), before_v.outlier_count());
        EXPECT_LE(c.labels_t.outlier_count(), before_t.outlier_count());
        EXPECT_EQ(r.assigned_count(Modality::Image) + r.remaining_outliers_v, r.initial_outliers_v);
        EXPECT_EQ(r.assigned_count(Modality::Text) + r.remaining_outliers_t, r.initial_outliers_t);
        EXPECT_EQ(r.remaining_outliers_v, c.labels_v.outlier_count());
        EXPECT_EQ(r.remaining_outliers_t, c.labels_t.outlier_count());
        EXPECT_EQ(c.labels_v.n_clusters, before_v.n_clusters);
        EXPECT_EQ(c.labels_t.n_clusters, before_t.n_clusters);

        for (std::size_t i = 0; i < before_v.size(); ++i)
            if (!before_v.is_outlier(i)) {
                EXPECT_EQ(c.labels_v[i], before_v[i]);
            }
        for (std::size_t i = 0; i < before_t.size(); ++i)
            if (!before_t.is_outlier(i)) {
                EXPECT_EQ(c.labels_t[i], before_t[i]);
            }
        for (const auto& a : r.assigned) {
            const auto& before = a.modality == Modality::Image ? before_v : before_t;
            const auto& after = a.modality == Modality::Image ? c.labels_v : c.labels_t;
            EXPECT_TRUE(before.is_outlier(a.instance));
            EXPECT_EQ(after[a.instance], a.cluster);
            EXPECT_GE(a.cluster, 0);
            EXPECT_LT(a.cluster, before.n_clusters);
        }
    }
}

TEST(Mining, PlantedOutliersRecovered) {
    const auto p = oracle::planted_outlier_case(60, 0.03, 4);
    auto lv = p.labels_v;
    mine_outliers_v2t({p.corpus.images.vectors, p.corpus.texts.vectors, p.corpus.pairs}, lv, p.labels_t);
    EXPECT_GE(oracle::planted_recovery(p, lv), 0.95);
}

TEST(Partition, Examples) {
    const auto pairs = PairGraph::from_image_to_texts({{0, 1}, {2}}, 3);
    const auto clustered_v = lab({0, 0}, Modality::Image);
    const auto clustered_t = lab({0, 0, 0}, Modality::Text);
    EXPECT_TRUE(partition_two_stage(pairs, clustered_v, clustered_t).supplementary.empty());

    const PseudoLabeling none_v{{kOutlier, kOutlier}, 0, Modality::Image};
    EXPECT_TRUE(partition_two_stage(pairs, none_v, clustered_t).mined.empty());

    const auto one = lab({kOutlier, 0}, Modality::Image);
    const auto part = partition_two_stage(pairs, one, clustered_t);
    EXPECT_EQ(part.supplementary, (PairList{{0, 0}, {0, 1}}));
    EXPECT_EQ(part.mined, (PairList{{1, 2}}));
}

TEST(Partition, DisjointCover) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = oracle::random_mining_case(rng);
        const auto part = partition_two_stage(c.pairs, c.labels_v, c.labels_t);
        EXPECT_EQ(part.mined.size() + part.supplementary.size(), c.pairs.pair_count());
        std::set<std::pair<std::size_t, std::size_t>> all(part.mined.begin(), part.mined.end());
        all.insert(part.supplementary.begin(), part.supplementary.end());
        EXPECT_EQ(all.size(), c.pairs.pair_count());
        for (const auto& [v, t] : part.mined) EXPECT_FALSE(c.labels_v.is_outlier(v) || c.labels_t.is_outlier(t));
        for (const auto& [v, t] : part.supplementary) EXPECT_TRUE(c.labels_v.is_outlier(v) || c.labels_t.is_outlier(t));
    }
}
