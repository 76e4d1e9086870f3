#include "cpcl/pmm.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace cpcl;

namespace {

PseudoLabeling labeling(std::vector<int> labels, Modality m = Modality::Image) {
    return relabel_dense(labels, m);
}

}  // namespace

TEST(InitMemory, AverageOfTwoAxes) {
    EmbeddingSet s{Modality::Image, Matrix(2, 2)};
    s.vectors << 1, 0, 0, 1;
    const auto mem = init_memory(s, labeling({0, 0}));
    ASSERT_EQ(mem.size(), 1u);
    EXPECT_NEAR(mem.prototypes(0, 0), std::sqrt(0.5), 1e-15);
    EXPECT_NEAR(mem.prototypes(0, 1), std::sqrt(0.5), 1e-15);
}

TEST(InitMemory, SingletonEqualsMember) {
    std::mt19937_64 rng(1);
    EmbeddingSet s{Modality::Text, oracle::random_unit_rows(3, 5, rng)};
    const auto mem = init_memory(s, labeling({0, kOutlier, 1}, Modality::Text));
    EXPECT_LT((mem.prototypes.row(0) - s.vectors.row(0)).norm(), 1e-15);
    EXPECT_LT((mem.prototypes.row(1) - s.vectors.row(2)).norm(), 1e-15);
}

TEST(InitMemory, AverageParallelToBruteForceMean) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> pick(-1, 4);
    for (int trial = 0; trial < 20; ++trial) {
        EmbeddingSet s{Modality::Image, oracle::random_unit_rows(30, 6, rng)};
        std::vector<int> raw(30);
        for (auto& l : raw) l = pick(rng);
        raw[0] = 0;
        const auto lab = labeling(raw);
        const auto mem = init_memory(s, lab);
        ASSERT_EQ(mem.size(), static_cast<std::size_t>(lab.n_clusters));
        for (int c = 0; c < lab.n_clusters; ++c) {
            RowVector mean = RowVector::Zero(6);
            int count = 0;
            for (std::size_t i = 0; i < 30; ++i)
                if (lab[i] == c) {
                    mean += s.vectors.row(i);
                    ++count;
                }
            mean /= count;
            const double cosine = mean.dot(mem.prototypes.row(c)) / (mean.norm() * mem.prototypes.row(c).norm());
            EXPECT_GE(cosine, 1.0 - 1e-9);
            EXPECT_NEAR(mem.prototypes.row(c).norm(), 1.0, 1e-12);
        }
    }
}

TEST(InitMemory, RandomPolicyIsSeededMember) {
    std::mt19937_64 rng(3);
    EmbeddingSet s{Modality::Image, oracle::random_unit_rows(12, 4, rng)};
    const auto lab = labeling({0, 0, 0, 1, 1, 1, 2, 2, 2, kOutlier, 0, 1});
    MemoryConfig cfg;
    cfg.init = MemoryInit::Random;
    const auto a = init_memory(s, lab, cfg, 42), b = init_memory(s, lab, cfg, 42);
    EXPECT_EQ(a.prototypes, b.prototypes);
    for (int c = 0; c < lab.n_clusters; ++c) {
        bool is_member = false;
        for (std::size_t i = 0; i < 12; ++i)
            if (lab[i] == c && (s.vectors.row(i) - a.prototypes.row(c)).norm() < 1e-15) is_member = true;
        EXPECT_TRUE(is_member);
    }
}

TEST(InitMemory, NoClustersIsEmptyMemory) {
    EmbeddingSet s{Modality::Image, Matrix::Identity(2, 2)};
    EXPECT_THROW(init_memory(s, labeling({kOutlier, kOutlier})), EmptyMemoryError);
}

TEST(MomentumUpdate, WorkedExample) {
    PrototypeMemory mem;
    mem.prototypes = Matrix(1, 2);
    mem.prototypes << 1, 0;
    RowVector f(2);
    f << 0, 1;
    momentum_update(mem, f, 0);
    EXPECT_NEAR(mem.prototypes(0, 0), 0.9 / std::sqrt(0.82), 1e-15);
    EXPECT_NEAR(mem.prototypes(0, 1), 0.1 / std::sqrt(0.82), 1e-15);
    EXPECT_NEAR(mem.prototypes(0, 0), 0.9939, 1e-4);
    EXPECT_NEAR(mem.prototypes(0, 1), 0.1104, 1e-4);
}

TEST(MomentumUpdate, RawRuleWithoutRenormalization) {
    std::mt19937_64 rng(4);
    for (double m : {0.0, 0.3, 0.9, 1.0}) {
        PrototypeMemory mem;
        mem.prototypes = oracle::random_unit_rows(3, 5, rng);
        mem.momentum = m;
        mem.renormalize = false;
        const Matrix before = mem.prototypes;
        const Matrix f = oracle::random_unit_rows(1, 5, rng);
        momentum_update(mem, f.row(0), 1);
        const RowVector want = m * before.row(1) + (1.0 - m) * f.row(0);
        EXPECT_LT((mem.prototypes.row(1) - want).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_EQ(mem.prototypes.row(0), before.row(0));
        if (m == 1.0) {
            EXPECT_EQ(mem.prototypes.row(1), before.row(1));
        }
        if (m == 0.0) {
            EXPECT_EQ(mem.prototypes.row(1), f.row(0));
        }
    }
}

TEST(MomentumUpdate, ContractsTowardFeature) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        PrototypeMemory mem;
        mem.prototypes = oracle::random_unit_rows(1, 4, rng);
        const Matrix f = oracle::random_unit_rows(1, 4, rng);
        const double before = mem.prototypes.row(0).dot(f.row(0));
        momentum_update(mem, f.row(0), 0);
        EXPECT_GE(mem.prototypes.row(0).dot(f.row(0)), before - 1e-15);
        EXPECT_NEAR(mem.prototypes.row(0).norm(), 1.0, 1e-12);
    }
}

TEST(MomentumUpdate, UnknownClusterIsIndexError) {
    PrototypeMemory mem;
    mem.prototypes = Matrix::Identity(2, 2);
    EXPECT_THROW(momentum_update(mem, RowVector::Zero(2), 2), IndexError);
}

TEST(LookupPositive, Examples) {
    // image 0 -> text 5; text 5 in text cluster 3.
    const auto pairs = PairGraph::from_image_to_texts({{5}, {0, 1, 2, 3, 4}}, 6);
    PseudoLabeling texts{{0, 0, 1, 1, 2, 3}, 4, Modality::Text};
    EXPECT_EQ(lookup_positive(Modality::Image, 0, texts, pairs), std::optional<std::size_t>(3));
    texts.labels[5] = kOutlier;
    EXPECT_EQ(lookup_positive(Modality::Image, 0, texts, pairs), std::nullopt);
    PseudoLabeling images{{1, 0}, 2, Modality::Image};
    EXPECT_EQ(lookup_positive(Modality::Text, 5, images, pairs), std::optional<std::size_t>(1));
    EXPECT_EQ(lookup_positive(Modality::Image, 1, texts, pairs, 2), std::optional<std::size_t>(1));
    EXPECT_THROW(lookup_positive(Modality::Image, 1, texts, pairs, 5), ReferentialIntegrityError);
}
