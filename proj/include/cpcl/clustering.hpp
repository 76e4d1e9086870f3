#pragma once

/// \file clustering.hpp
/// Pseudo labels per modality: DBSCAN on a precomputed distance matrix (default backend)
/// and seeded k-means (ablation backend).

#include "cpcl/affinity.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <deque>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <vector>

namespace cpcl {

inline constexpr int kOutlier = -1;

/// Dense cluster ids 0..n_clusters-1 per instance, kOutlier for noise.
struct PseudoLabeling {
    std::vector<int> labels;
    int n_clusters = 0;
    Modality modality = Modality::Image;

    std::size_t size() const noexcept { return labels.size(); }
    bool is_outlier(std::size_t i) const { return labels.at(i) == kOutlier; }
    int operator[](std::size_t i) const { return labels.at(i); }

    std::size_t outlier_count() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kOutlier));
    }

    std::vector<std::size_t> cluster_sizes() const {
        std::vector<std::size_t> sizes(static_cast<std::size_t>(n_clusters), 0);
        for (int l : labels)
            if (l != kOutlier) ++sizes.at(static_cast<std::size_t>(l));
        return sizes;
    }

    /// Members of every cluster, ascending instance id.
    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(n_clusters));
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] != kOutlier) out.at(static_cast<std::size_t>(labels[i])).push_back(i);
        return out;
    }

    bool operator==(const PseudoLabeling&) const = default;
};

/// Compacts cluster ids to 0..m-1 in order of first appearance; outliers kept.
inline PseudoLabeling relabel_dense(std::span<const int> labels, Modality modality = Modality::Image) {
    PseudoLabeling out{std::vector<int>(labels.size(), kOutlier), 0, modality};
    std::map<int, int> remap;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kOutlier) continue;
        auto [it, inserted] = remap.try_emplace(labels[i], out.n_clusters);
        if (inserted) ++out.n_clusters;
        out.labels[i] = it->second;
    }
    return out;
}

/// DBSCAN over a precomputed symmetric distance matrix.
///
/// A point is core iff at least min_pts points (itself included) lie within eps (inclusive).
/// Clusters are connected components of core points, numbered in ascending order of their
/// lowest core id. A border point joins the cluster of its lowest-id core neighbour.
inline PseudoLabeling dbscan(const DistanceMatrix& dist, double eps, std::size_t min_pts,
                             Modality modality = Modality::Image) {
    if (!(eps > 0.0)) throw ParameterError("dbscan: eps must be > 0");
    if (min_pts < 1) throw ParameterError("dbscan: min_pts must be >= 1");
    const std::size_t n = dist.size();

    std::vector<std::vector<std::size_t>> neighbors(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (dist(i, j) <= eps) neighbors[i].push_back(j);

    std::vector<char> core(n, 0);
    for (std::size_t i = 0; i < n; ++i) core[i] = neighbors[i].size() >= min_pts;

    PseudoLabeling out{std::vector<int>(n, kOutlier), 0, modality};
    std::deque<std::size_t> frontier;
    for (std::size_t seed = 0; seed < n; ++seed) {
        if (!core[seed] || out.labels[seed] != kOutlier) continue;
        const int id = out.n_clusters++;
        out.labels[seed] = id;
        frontier.push_back(seed);
        while (!frontier.empty()) {
            const std::size_t p = frontier.front();
            frontier.pop_front();
            for (std::size_t q : neighbors[p]) {
                if (core[q] && out.labels[q] == kOutlier) {
                    out.labels[q] = id;
                    frontier.push_back(q);
                }
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) continue;
        for (std::size_t j : neighbors[i]) {  // ascending, so the first core hit is the lowest id
            if (core[j]) {
                out.labels[i] = out.labels[j];
                break;
            }
        }
    }
    return out;
}

struct KMeansResult {
    PseudoLabeling labeling;
    Matrix centroids;
    /// Objective (sum of squared distances to the assigned centroid) after each iteration.
    std::vector<double> objective_trace;
    std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
    return (a.row(i) - b.row(j)).squaredNorm();
}

inline double kmeans_objective(const Matrix& x, const Matrix& c, const std::vector<int>& assign) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        total += squared_distance(x, i, c, assign[static_cast<std::size_t>(i)]);
    return total;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded with the point
/// farthest from its centroid. Stops at max_iters or when assignments stop changing.
inline KMeansResult kmeans(const EmbeddingSet& set, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
    const Matrix& x = set.vectors;
    const std::size_t n = set.count();
    if (k < 1) throw ParameterError("kmeans: k must be >= 1");
    if (k > n) throw ParameterError("kmeans: k = " + std::to_string(k) + " exceeds n = " + std::to_string(n));

    std::mt19937_64 rng(seed);
    Matrix centroids(static_cast<Eigen::Index>(k), x.cols());
    {
        std::vector<char> chosen(n, 0);
        std::vector<double> d2(n, std::numeric_limits<double>::infinity());
        std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        for (std::size_t c = 0; c < k; ++c) {
            std::size_t pick = first;
            if (c > 0) {
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
                if (total > 0.0) {
                    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
                    pick = n;
                    for (std::size_t i = 0; i < n; ++i) {
                        if (chosen[i] || d2[i] <= 0.0) continue;
                        pick = i;
                        if (r < d2[i]) break;
                        r -= d2[i];
                    }
                } else {
                    // Every remaining point coincides with a centroid: pick uniformly among unchosen.
                    std::vector<std::size_t> rest;
                    for (std::size_t i = 0; i < n; ++i)
                        if (!chosen[i]) rest.push_back(i);
                    pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
                }
            }
            chosen[pick] = 1;
            centroids.row(static_cast<Eigen::Index>(c)) = x.row(static_cast<Eigen::Index>(pick));
            for (std::size_t i = 0; i < n; ++i)
                d2[i] = std::min(d2[i], detail::squared_distance(x, static_cast<Eigen::Index>(i), centroids,
                                                                 static_cast<Eigen::Index>(c)));
        }
    }

    KMeansResult result;
    std::vector<int> assign(n, -1);
    for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = detail::squared_distance(x, static_cast<Eigen::Index>(i), centroids,
                                                          static_cast<Eigen::Index>(c));
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(c);
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<std::size_t> sizes(k, 0);
        for (int a : assign) ++sizes[static_cast<std::size_t>(a)];
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] != 0) continue;
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[static_cast<std::size_t>(assign[i])] < 2) continue;
                const double d = detail::squared_distance(x, static_cast<Eigen::Index>(i), centroids, assign[i]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            --sizes[static_cast<std::size_t>(assign[far])];
            assign[far] = static_cast<int>(c);
            sizes[c] = 1;
            changed = true;
        }
        centroids.setZero();
        for (std::size_t i = 0; i < n; ++i) centroids.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
        for (std::size_t c = 0; c < k; ++c) centroids.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(sizes[c]);
        result.objective_trace.push_back(detail::kmeans_objective(x, centroids, assign));
        result.iterations = iter + 1;
        if (!changed) break;
    }
    result.labeling = relabel_dense(assign, set.modality);
    // relabel_dense reorders ids by first appearance; permute centroids to match.
    Matrix ordered(centroids.rows(), centroids.cols());
    for (std::size_t i = 0; i < n; ++i) ordered.row(result.labeling.labels[i]) = centroids.row(assign[i]);
    result.centroids = std::move(ordered);
    return result;
}

}  // namespace cpcl
