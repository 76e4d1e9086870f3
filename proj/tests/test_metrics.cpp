#include "cpcl/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace cpcl;

namespace {

RankingResult one_query(std::vector<double> sims, std::vector<std::int64_t> gallery_truth) {
    Matrix s(1, static_cast<Eigen::Index>(sims.size()));
    for (std::size_t i = 0; i < sims.size(); ++i) s(0, static_cast<Eigen::Index>(i)) = sims[i];
    return rank_by_similarity(s, {1}, gallery_truth);
}

}  // namespace

TEST(Ranking, HandSortedTable) {
    Matrix s(3, 3);
    s << 0.2, 0.9, 0.5,  //
        0.7, 0.1, 0.7,   //
        -1.0, 0.0, 0.3;
    const auto r = rank_by_similarity(s, {0, 1, 2}, {0, 1, 2});
    EXPECT_EQ(r.order[0], (std::vector<std::size_t>{1, 2, 0}));
    EXPECT_EQ(r.order[1], (std::vector<std::size_t>{0, 2, 1}));
    EXPECT_EQ(r.order[2], (std::vector<std::size_t>{2, 1, 0}));
    EXPECT_EQ(r.relevant[0], (std::vector<char>{0, 0, 1}));
}

TEST(Ranking, ExactMatchFirst) {
    EmbeddingSet q{Modality::Text, Matrix::Identity(1, 3)};
    EmbeddingSet g{Modality::Image, Matrix::Identity(3, 3)};
    EXPECT_EQ(rank_gallery(q, g, {5}, {4, 5, 6}).order[0].front(), 0u);
}

TEST(Ranking, TiesGoToLowerId) {
    const auto r = one_query({0.5, 0.5, 0.9}, {0, 1, 0});
    EXPECT_EQ(r.order[0], (std::vector<std::size_t>{2, 0, 1}));
}

TEST(Scores, HandCase) {
    // Relevant at ranks 1 and 3.
    const auto r = one_query({0.9, 0.5, 0.1}, {1, 0, 1});
    EXPECT_NEAR(mean_average_precision(r), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
    EXPECT_NEAR(mean_average_precision(r), 0.83333, 1e-5);
    EXPECT_NEAR(mean_inverse_negative_penalty(r), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(mean_inverse_negative_penalty(r), 0.6667, 1e-4);
}

TEST(Scores, SingleRelevantAtLastRank) {
    const auto r = one_query({0.9, 0.8, 0.7, 0.1}, {0, 0, 0, 1});
    EXPECT_DOUBLE_EQ(mean_average_precision(r), 0.25);
    EXPECT_DOUBLE_EQ(mean_inverse_negative_penalty(r), 0.25);
    EXPECT_EQ(recall_at_k(r, 3), 0.0);
    EXPECT_EQ(recall_at_k(r, 4), 1.0);
}

TEST(Scores, ApBelowInpWhenHitsAreLate) {
    const auto r = one_query({1, .9, .8, .7, .6, .5, .4, .3, .2, .1}, {0, 0, 0, 0, 0, 0, 0, 0, 1, 1});
    EXPECT_NEAR(mean_average_precision(r), (1.0 / 9.0 + 0.2) / 2.0, 1e-15);
    EXPECT_NEAR(mean_inverse_negative_penalty(r), 0.2, 1e-15);
}

TEST(Scores, AllRelevantOnTop) {
    const auto r = one_query({0.9, 0.8, 0.1}, {1, 1, 0});
    EXPECT_EQ(mean_average_precision(r), 1.0);
    EXPECT_EQ(mean_inverse_negative_penalty(r), 1.0);
}

TEST(Recall, RankThreeCountsFromFive) {
    const auto r = one_query({0.9, 0.8, 0.7, 0.1}, {0, 0, 1, 0});
    EXPECT_EQ(recall_at_k(r, 1), 0.0);
    EXPECT_EQ(recall_at_k(r, 5), 1.0);
    EXPECT_EQ(recall_at_k(r, 10), 1.0);
    EXPECT_THROW(recall_at_k(r, 0), ParameterError);
}

TEST(Scores, QueryWithoutRelevantIsSkippedOrStrict) {
    Matrix s(2, 2);
    s << 0.9, 0.1, 0.2, 0.8;
    const auto r = rank_by_similarity(s, {0, 7}, {0, 1});
    EXPECT_EQ(recall_at_k(r, 10), 0.5);
    EXPECT_EQ(mean_average_precision(r), 1.0);
    EXPECT_THROW(mean_average_precision(r, true), ParameterError);
}

TEST(Scores, MatchBruteForceOracle) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto c = oracle::random_ranking_case(rng);
        const auto r = rank_by_similarity(c.similarity, c.query_truth, c.gallery_truth);
        const auto [map, minp] = oracle::reference_map_minp(c);
        ASSERT_NEAR(mean_average_precision(r), map, 1e-12) << trial;
        ASSERT_NEAR(mean_inverse_negative_penalty(r), minp, 1e-12) << trial;
    }
}

TEST(Scores, OrderingProperties) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const auto c = oracle::random_ranking_case(rng, 10, 30);
        const auto m = summarize(rank_by_similarity(c.similarity, c.query_truth, c.gallery_truth));
        EXPECT_LE(m.r1, m.r5);
        EXPECT_LE(m.r5, m.r10);
        double prev = 0.0;
        const auto r = rank_by_similarity(c.similarity, c.query_truth, c.gallery_truth);
        // AP can fall below INP (relevant at ranks 9 and 10), but precision at the k-th hit is
        // at least k / R_hard, which bounds AP from below.
        const auto scores = per_query_scores(r);
        for (std::size_t q = 0; q < r.queries(); ++q) {
            const auto g = static_cast<double>(std::count(r.relevant[q].begin(), r.relevant[q].end(), 1));
            EXPECT_GE(scores.ap[q], scores.inp[q] * (g + 1.0) / (2.0 * g) - 1e-15);
        }
        for (std::size_t k = 1; k <= 30; ++k) {
            EXPECT_GE(recall_at_k(r, k), prev);
            prev = recall_at_k(r, k);
        }
    }
}

TEST(Scores, GalleryPermutationInvariant) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        auto c = oracle::random_ranking_case(rng);
        for (Eigen::Index i = 0; i < c.similarity.size(); ++i) c.similarity.data()[i] = g(rng);
        std::vector<std::size_t> perm(12);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix ps(c.similarity.rows(), 12);
        std::vector<std::int64_t> pt(12);
        for (std::size_t j = 0; j < 12; ++j) {
            ps.col(static_cast<Eigen::Index>(j)) = c.similarity.col(static_cast<Eigen::Index>(perm[j]));
            pt[j] = c.gallery_truth[perm[j]];
        }
        const auto a = summarize(rank_by_similarity(c.similarity, c.query_truth, c.gallery_truth));
        const auto b = summarize(rank_by_similarity(ps, c.query_truth, pt));
        EXPECT_EQ(a.r1, b.r1);
        EXPECT_EQ(a.r5, b.r5);
        EXPECT_NEAR(a.map, b.map, 1e-15);
        EXPECT_NEAR(a.minp, b.minp, 1e-15);
    }
}

TEST(Evaluate, NoiselessCorpusIsPerfect) {
    SynthSpec s;
    s.n_identities = 8;
    s.images_per_id = 3;
    s.intra_id_noise = 0.0;
    const auto c = synth_corpus(s);
    for (auto dir : {QueryDirection::TextToImage, QueryDirection::ImageToText}) {
        const auto m = summarize(rank_corpus(c, c.images.vectors, c.texts.vectors, dir));
        EXPECT_EQ(m.r1, 1.0);
        EXPECT_NEAR(m.map, 1.0, 1e-15);
        EXPECT_NEAR(m.minp, 1.0, 1e-15);
    }
}

TEST(Evaluate, MissingTruthIsError) {
    auto c = synth_corpus(SynthSpec{});
    c.ground_truth.reset();
    EXPECT_THROW(rank_corpus(c, c.images.vectors, c.texts.vectors), EvalWithoutTruthError);
}

TEST(Evaluate, PerQueryTsv) {
    const auto r = one_query({0.9, 0.5, 0.1}, {1, 0, 1});
    std::ostringstream os;
    write_per_query_tsv(os, r);
    EXPECT_EQ(os.str().substr(0, 13), "query\tap\tinp\n");
    EXPECT_NE(os.str().find("0\t0.833333333333"), std::string::npos);
}
