#pragma once

/// \file affinity.hpp
/// Pairwise distances, exact k-nearest-neighbour tables and the k-reciprocal Jaccard
/// re-ranking distance used as the clustering metric.

#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

namespace cpcl {

enum class DistanceKind { Cosine, Jaccard, Custom };

struct DistanceMatrix {
    Matrix values;
    DistanceKind kind = DistanceKind::Custom;

    std::size_t size() const noexcept { return static_cast<std::size_t>(values.rows()); }
    double operator()(std::size_t i, std::size_t j) const {
        return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
};

/// 1 - <x_i, x_j> on unit vectors, clamped to [0, 2], exact zero diagonal.
inline DistanceMatrix cosine_distance_matrix(const EmbeddingSet& set) {
    DistanceMatrix d{Matrix::Ones(set.vectors.rows(), set.vectors.rows()), DistanceKind::Cosine};
    d.values.noalias() -= set.vectors * set.vectors.transpose();
    d.values = d.values.cwiseMax(0.0).cwiseMin(2.0);
    // Make the matrix exactly symmetric regardless of GEMM blocking.
    d.values = (0.5 * (d.values + d.values.transpose())).eval();
    d.values.diagonal().setZero();
    return d;
}

/// Sorted neighbour lists (self excluded, ties broken by ascending index), truncated to `depth`.
class NeighborTable {
public:
    NeighborTable(const DistanceMatrix& dist, std::size_t depth) : depth_(depth) {
        const std::size_t n = dist.size();
        if (depth >= n) throw ParameterError("neighbour depth " + std::to_string(depth) + " must be < n = " + std::to_string(n));
        lists_.resize(n);
        std::vector<std::size_t> idx(n - 1);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t w = 0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) idx[w++] = j;
            auto less = [&](std::size_t a, std::size_t b) {
                const double da = dist(i, a), db = dist(i, b);
                return da < db || (da == db && a < b);
            };
            std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(depth), idx.end(), less);
            lists_[i].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(depth));
        }
    }

    std::size_t depth() const noexcept { return depth_; }

    /// First k neighbours of i (k <= depth).
    std::span<const std::size_t> knn(std::size_t i, std::size_t k) const {
        return std::span<const std::size_t>(lists_[i]).first(k);
    }

    bool in_knn(std::size_t owner, std::size_t candidate, std::size_t k) const {
        const auto l = knn(owner, k);
        return std::find(l.begin(), l.end(), candidate) != l.end();
    }

    /// R(i, k): j in kNN(i, k) and i in kNN(j, k); ascending order.
    std::vector<std::size_t> reciprocal(std::size_t i, std::size_t k) const {
        std::vector<std::size_t> out;
        for (std::size_t j : knn(i, k))
            if (in_knn(j, i, k)) out.push_back(j);
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    std::size_t depth_;
    std::vector<std::vector<std::size_t>> lists_;
};

inline std::vector<std::size_t> k_nearest(const DistanceMatrix& dist, std::size_t i, std::size_t k) {
    const NeighborTable t(dist, k);
    const auto l = t.knn(i, k);
    return {l.begin(), l.end()};
}

inline std::vector<std::size_t> k_reciprocal_neighbors(const DistanceMatrix& dist, std::size_t i, std::size_t k) {
    if (k >= dist.size()) throw ParameterError("k = " + std::to_string(k) + " must be < n = " + std::to_string(dist.size()));
    if (i >= dist.size()) throw IndexError("index " + std::to_string(i) + " out of range");
    return NeighborTable(dist, k).reciprocal(i, k);
}

struct JaccardParams {
    std::size_t k1 = 20;
    std::size_t k2 = 6;
    bool expansion = true;        // the 2/3-overlap expansion of R(i, k1)
    bool query_expansion = true;  // average memberships over the k2 nearest (self included)
};

namespace detail {

struct SparseRow {
    std::vector<std::size_t> index;  // ascending
    std::vector<double> value;
};

}  // namespace detail

/// Fuzzy membership vectors V_i over the expanded k-reciprocal sets (self included),
/// V_i[j] = exp(-dist(i, j)), optionally averaged over the k2 nearest neighbours.
/// k1 and k2 are clamped to n - 1.
inline std::vector<detail::SparseRow> reciprocal_memberships(const DistanceMatrix& dist, const JaccardParams& p) {
    const std::size_t n = dist.size();
    if (p.k2 > p.k1) throw ParameterError("k2 = " + std::to_string(p.k2) + " exceeds k1 = " + std::to_string(p.k1));
    if (p.k1 == 0) throw ParameterError("k1 must be >= 1");
    std::vector<detail::SparseRow> rows(n);
    if (n < 2) {
        for (std::size_t i = 0; i < n; ++i) rows[i] = {{i}, {1.0}};
        return rows;
    }
    const std::size_t k1 = std::min(p.k1, n - 1);
    const std::size_t half = std::min<std::size_t>((k1 + 1) / 2, n - 1);
    const NeighborTable table(dist, k1);

    std::vector<std::vector<std::size_t>> r_full(n), r_half(n);
    for (std::size_t i = 0; i < n; ++i) {
        r_full[i] = table.reciprocal(i, k1);
        if (p.expansion) r_half[i] = table.reciprocal(i, half);
    }

    std::vector<char> mark(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> members = r_full[i];
        if (p.expansion) {
            for (std::size_t j : r_full[i]) {
                const auto& cand = r_half[j];
                std::size_t overlap = 0;
                for (std::size_t c : cand)
                    if (std::binary_search(r_full[i].begin(), r_full[i].end(), c)) ++overlap;
                if (3 * overlap >= 2 * cand.size()) members.insert(members.end(), cand.begin(), cand.end());
            }
        }
        members.push_back(i);
        std::sort(members.begin(), members.end());
        members.erase(std::unique(members.begin(), members.end()), members.end());
        auto& row = rows[i];
        row.index = members;
        row.value.resize(members.size());
        for (std::size_t k = 0; k < members.size(); ++k) row.value[k] = std::exp(-dist(i, members[k]));
    }

    if (p.query_expansion && p.k2 > 1) {
        const std::size_t others = std::min(p.k2 - 1, k1);
        std::vector<double> acc(n, 0.0);
        std::vector<std::size_t> touched;
        std::vector<detail::SparseRow> expanded(n);
        for (std::size_t i = 0; i < n; ++i) {
            touched.clear();
            auto add = [&](const detail::SparseRow& r) {
                for (std::size_t k = 0; k < r.index.size(); ++k) {
                    const std::size_t m = r.index[k];
                    if (!mark[m]) {
                        mark[m] = 1;
                        touched.push_back(m);
                    }
                    acc[m] += r.value[k];
                }
            };
            add(rows[i]);
            for (std::size_t j : table.knn(i, others)) add(rows[j]);
            std::sort(touched.begin(), touched.end());
            const double scale = 1.0 / static_cast<double>(others + 1);
            auto& out = expanded[i];
            out.index = touched;
            out.value.resize(touched.size());
            for (std::size_t k = 0; k < touched.size(); ++k) {
                out.value[k] = acc[touched[k]] * scale;
                acc[touched[k]] = 0.0;
                mark[touched[k]] = 0;
            }
        }
        rows = std::move(expanded);
    }
    return rows;
}

/// d_J(i, j) = 1 - sum_m min(V_i[m], V_j[m]) / sum_m max(V_i[m], V_j[m]), symmetrized.
inline DistanceMatrix jaccard_distance_matrix(const DistanceMatrix& dist, const JaccardParams& p = {}) {
    const std::size_t n = dist.size();
    const auto rows = reciprocal_memberships(dist, p);

    // Inverted index: column m -> (row, value).
    std::vector<std::vector<std::pair<std::size_t, double>>> inverted(n);
    std::vector<double> mass(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < rows[i].index.size(); ++k) {
            inverted[rows[i].index[k]].emplace_back(i, rows[i].value[k]);
            mass[i] += rows[i].value[k];
        }

    DistanceMatrix out{Matrix::Ones(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)), DistanceKind::Jaccard};
    std::vector<double> min_sum(n, 0.0);
    std::vector<std::size_t> touched;
    std::vector<char> mark(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        touched.clear();
        for (std::size_t k = 0; k < rows[i].index.size(); ++k) {
            const double vi = rows[i].value[k];
            for (const auto& [j, vj] : inverted[rows[i].index[k]]) {
                if (!mark[j]) {
                    mark[j] = 1;
                    touched.push_back(j);
                }
                min_sum[j] += std::min(vi, vj);
            }
        }
        for (std::size_t j : touched) {
            const double union_mass = mass[i] + mass[j] - min_sum[j];
            const double d = union_mass > 0.0 ? 1.0 - min_sum[j] / union_mass : 0.0;
            out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::clamp(d, 0.0, 1.0);
            min_sum[j] = 0.0;
            mark[j] = 0;
        }
    }
    out.values = (0.5 * (out.values + out.values.transpose())).eval();
    out.values.diagonal().setZero();
    return out;
}

/// Debug dump: one tab-separated row per line.
inline void write_tsv(std::ostream& os, const DistanceMatrix& d) {
    os.precision(9);
    for (Eigen::Index i = 0; i < d.values.rows(); ++i) {
        for (Eigen::Index j = 0; j < d.values.cols(); ++j) {
            if (j) os << '\t';
            os << d.values(i, j);
        }
        os << '\n';
    }
}

}  // namespace cpcl
