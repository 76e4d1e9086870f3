#pragma once

/// \file metrics.hpp
/// Retrieval evaluation: full gallery ranking, Rank-k recall, mAP and mINP.

#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace cpcl {

/// Per query: gallery ids sorted by descending similarity (ties by ascending id) and the
/// relevance of each ranked position.
struct RankingResult {
    std::vector<std::vector<std::size_t>> order;
    std::vector<std::vector<char>> relevant;  // relevant[q][r] for ranked position r

    std::size_t queries() const noexcept { return order.size(); }
};

/// Ranks from a precomputed query x gallery similarity matrix.
inline RankingResult rank_by_similarity(const Matrix& similarity, const std::vector<std::int64_t>& query_truth,
                                        const std::vector<std::int64_t>& gallery_truth) {
    const auto nq = static_cast<std::size_t>(similarity.rows());
    const auto ng = static_cast<std::size_t>(similarity.cols());
    if (query_truth.size() != nq || gallery_truth.size() != ng)
        throw ParameterError("ground-truth sizes do not match the similarity matrix");
    RankingResult r;
    r.order.resize(nq);
    r.relevant.resize(nq);
    for (std::size_t q = 0; q < nq; ++q) {
        auto& ord = r.order[q];
        ord.resize(ng);
        std::iota(ord.begin(), ord.end(), std::size_t{0});
        const auto row = similarity.row(static_cast<Eigen::Index>(q));
        std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
            const double sa = row[static_cast<Eigen::Index>(a)], sb = row[static_cast<Eigen::Index>(b)];
            return sa > sb || (sa == sb && a < b);
        });
        r.relevant[q].resize(ng);
        for (std::size_t k = 0; k < ng; ++k) r.relevant[q][k] = gallery_truth[ord[k]] == query_truth[q];
    }
    return r;
}

/// Inner-product ranking of every query against the whole gallery.
inline RankingResult rank_gallery(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                  const std::vector<std::int64_t>& query_truth,
                                  const std::vector<std::int64_t>& gallery_truth) {
    if (queries.dim() != gallery.dim()) throw ParameterError("query and gallery dimensions differ");
    return rank_by_similarity(queries.vectors * gallery.vectors.transpose(), query_truth, gallery_truth);
}

/// Fraction of queries with at least one relevant item in the top k.
inline double recall_at_k(const RankingResult& r, std::size_t k) {
    if (k < 1) throw ParameterError("recall_at_k: k must be >= 1");
    if (r.queries() == 0) return 0.0;
    std::size_t hits = 0;
    for (const auto& rel : r.relevant) {
        const std::size_t top = std::min(k, rel.size());
        if (std::any_of(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(top), [](char c) { return c != 0; })) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(r.queries());
}

struct PerQueryScores {
    std::vector<double> ap;   // NaN for queries without relevant items
    std::vector<double> inp;
    std::size_t skipped = 0;
};

/// AP = mean over relevant ranks r of precision@r; INP = |relevant| / rank of the last relevant.
inline PerQueryScores per_query_scores(const RankingResult& r) {
    PerQueryScores s;
    s.ap.assign(r.queries(), std::numeric_limits<double>::quiet_NaN());
    s.inp.assign(r.queries(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t q = 0; q < r.queries(); ++q) {
        const auto& rel = r.relevant[q];
        std::size_t found = 0, last = 0;
        double precision_sum = 0.0;
        for (std::size_t k = 0; k < rel.size(); ++k) {
            if (!rel[k]) continue;
            ++found;
            last = k + 1;
            precision_sum += static_cast<double>(found) / static_cast<double>(k + 1);
        }
        if (found == 0) {
            ++s.skipped;
            continue;
        }
        s.ap[q] = precision_sum / static_cast<double>(found);
        s.inp[q] = static_cast<double>(found) / static_cast<double>(last);
    }
    return s;
}

namespace detail {

inline double mean_skipping_nan(const std::vector<double>& v, std::size_t skipped, bool strict, const char* what) {
    if (skipped > 0) {
        if (strict) throw ParameterError(std::string(what) + ": " + std::to_string(skipped) + " queries have no relevant item");
        std::cerr << "warning: " << what << ": excluding " << skipped << " queries without relevant items\n";
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (x == x) {
            sum += x;
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace detail

inline double mean_average_precision(const RankingResult& r, bool strict = false) {
    const auto s = per_query_scores(r);
    return detail::mean_skipping_nan(s.ap, s.skipped, strict, "mAP");
}

inline double mean_inverse_negative_penalty(const RankingResult& r, bool strict = false) {
    const auto s = per_query_scores(r);
    return detail::mean_skipping_nan(s.inp, s.skipped, strict, "mINP");
}

struct MetricsReport {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
    double map = 0.0, minp = 0.0;
    std::size_t queries = 0;
    std::size_t gallery = 0;
};

inline MetricsReport summarize(const RankingResult& r) {
    MetricsReport m;
    m.r1 = recall_at_k(r, 1);
    m.r5 = recall_at_k(r, 5);
    m.r10 = recall_at_k(r, 10);
    const auto s = per_query_scores(r);
    m.map = detail::mean_skipping_nan(s.ap, s.skipped, false, "mAP");
    m.minp = detail::mean_skipping_nan(s.inp, 0, false, "mINP");
    m.queries = r.queries();
    m.gallery = r.order.empty() ? 0 : r.order.front().size();
    return m;
}

enum class QueryDirection { TextToImage, ImageToText };

/// Ranks already-encoded features of a corpus (text queries vs image gallery by default).
inline RankingResult rank_corpus(const Corpus& corpus, const Matrix& image_features, const Matrix& text_features,
                                 QueryDirection direction = QueryDirection::TextToImage) {
    if (!corpus.ground_truth) throw EvalWithoutTruthError("evaluation requires a ground-truth file");
    const auto& gt = *corpus.ground_truth;
    if (direction == QueryDirection::TextToImage)
        return rank_by_similarity(text_features * image_features.transpose(), gt.texts, gt.images);
    return rank_by_similarity(image_features * text_features.transpose(), gt.images, gt.texts);
}

inline void write_per_query_tsv(std::ostream& os, const RankingResult& r) {
    const auto s = per_query_scores(r);
    os << "query\tap\tinp\n";
    os.precision(12);
    for (std::size_t q = 0; q < r.queries(); ++q) os << q << '\t' << s.ap[q] << '\t' << s.inp[q] << '\n';
}

}  // namespace cpcl
