#pragma once

/// \file oplm.hpp
/// Outlier pseudo-label mining.
///
/// Refined stage, for an outlier instance x of modality M (partner modality M'):
///   1. B = clustered partners of x in M'. Empty -> x stays an outlier.
///   2. C = clustered M' instances sharing a cluster with some member of B, B excluded
///      (or, in FeatureKnn mode, the k nearest clustered M' neighbours of each member of B).
///   3. D = clustered partners of C back in M, x excluded.
///   4. Repeatedly take the d in D \ U with the largest inner product <x, d>; if d is
///      clustered x joins its cluster, otherwise d goes into the exclusion set U.
/// The supplementary stage trains on every pair that still touches an outlier.

#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <limits>
#include <utility>
#include <vector>

namespace cpcl {

enum class NeighborMode { ClusterMates, FeatureKnn };

struct MiningConfig {
    NeighborMode neighbor_mode = NeighborMode::ClusterMates;
    std::size_t knn = 4;            // FeatureKnn only
    bool deferred = false;          // apply assignments after the pass instead of immediately
    bool image_first = true;        // order of the two directions in run_refined_stage
};

struct Assignment {
    std::size_t instance = 0;
    int cluster = kOutlier;
    Modality modality = Modality::Image;
    bool operator==(const Assignment&) const = default;
};

struct ExclusionTrace {
    std::size_t instance = 0;
    Modality modality = Modality::Image;
    std::vector<std::size_t> rejected;  // the U set at the end of the search
};

struct MiningReport {
    std::vector<Assignment> assigned;
    std::size_t initial_outliers_v = 0;
    std::size_t initial_outliers_t = 0;
    std::size_t remaining_outliers_v = 0;
    std::size_t remaining_outliers_t = 0;
    std::vector<ExclusionTrace> excluded_trace;

    std::size_t assigned_count(Modality m) const {
        return static_cast<std::size_t>(
            std::count_if(assigned.begin(), assigned.end(), [m](const Assignment& a) { return a.modality == m; }));
    }
};

/// Read-only view of the features mining works on (normally the current encoder outputs).
struct MiningView {
    const Matrix& image_features;
    const Matrix& text_features;
    const PairGraph& pairs;

    const Matrix& features(Modality m) const { return m == Modality::Image ? image_features : text_features; }
};

namespace detail {

/// Mines outliers of `modality`; `own` is mutated, `partner` is read only.
inline void mine_direction(const MiningView& view, Modality modality, PseudoLabeling& own, const PseudoLabeling& partner,
                           const MiningConfig& config, MiningReport& report) {
    const Modality other = opposite(modality);
    const Matrix& own_f = view.features(modality);
    const Matrix& other_f = view.features(other);
    const PseudoLabeling snapshot = own;
    const PseudoLabeling& lookup = config.deferred ? snapshot : own;
    const auto partner_members = partner.members();
    std::vector<std::pair<std::size_t, int>> pending;

    std::vector<std::size_t> clustered_partner;
    if (config.neighbor_mode == NeighborMode::FeatureKnn)
        for (std::size_t j = 0; j < partner.size(); ++j)
            if (!partner.is_outlier(j)) clustered_partner.push_back(j);

    std::vector<char> in_b(partner.size(), 0), in_c(partner.size(), 0), in_d(own.size(), 0);
    for (std::size_t x = 0; x < snapshot.size(); ++x) {
        if (!snapshot.is_outlier(x)) continue;

        // Step 1: clustered partners.
        std::vector<std::size_t> b;
        for (std::size_t p : view.pairs.partners(modality, x))
            if (!partner.is_outlier(p)) b.push_back(p);
        if (b.empty()) continue;
        for (std::size_t p : b) in_b[p] = 1;

        // Step 2: same-modality neighbourhood of B.
        std::vector<std::size_t> c;
        auto add_c = [&](std::size_t t) {
            if (!in_b[t] && !in_c[t]) {
                in_c[t] = 1;
                c.push_back(t);
            }
        };
        if (config.neighbor_mode == NeighborMode::ClusterMates) {
            for (std::size_t p : b)
                for (std::size_t t : partner_members[static_cast<std::size_t>(partner[p])]) add_c(t);
        } else {
            for (std::size_t p : b) {
                std::vector<std::pair<double, std::size_t>> scored;
                for (std::size_t t : clustered_partner)
                    if (t != p) scored.emplace_back(-other_f.row(static_cast<Eigen::Index>(p)).dot(other_f.row(static_cast<Eigen::Index>(t))), t);
                const std::size_t k = std::min(config.knn, scored.size());
                std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end());
                for (std::size_t i = 0; i < k; ++i) add_c(scored[i].second);
            }
        }

        // Step 3: clustered partners of C, x excluded.
        std::vector<std::size_t> d;
        for (std::size_t t : c)
            for (std::size_t y : view.pairs.partners(other, t))
                if (y != x && !in_d[y] && !lookup.is_outlier(y)) {
                    in_d[y] = 1;
                    d.push_back(y);
                }
        for (std::size_t p : b) in_b[p] = 0;
        for (std::size_t t : c) in_c[t] = 0;
        for (std::size_t y : d) in_d[y] = 0;
        std::sort(d.begin(), d.end());

        // Step 4: nearest candidate with exclusion set.
        std::vector<std::size_t> excluded;
        std::vector<char> rejected(d.size(), 0);
        int chosen = kOutlier;
        while (excluded.size() < d.size()) {
            std::size_t best = d.size();
            double best_s = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < d.size(); ++k) {
                if (rejected[k]) continue;
                const double s = own_f.row(static_cast<Eigen::Index>(x)).dot(own_f.row(static_cast<Eigen::Index>(d[k])));
                if (s > best_s) {
                    best_s = s;
                    best = k;
                }
            }
            const int label = lookup[d[best]];
            if (label != kOutlier) {
                chosen = label;
                break;
            }
            rejected[best] = 1;
            excluded.push_back(d[best]);
        }
        if (!excluded.empty()) report.excluded_trace.push_back({x, modality, excluded});
        if (chosen == kOutlier) continue;
        report.assigned.push_back({x, chosen, modality});
        if (config.deferred)
            pending.emplace_back(x, chosen);
        else
            own.labels[x] = chosen;
    }
    for (const auto& [x, label] : pending) own.labels[x] = label;
}

}  // namespace detail

/// Mines image outliers through their captions; labels_v is updated in place.
inline MiningReport mine_outliers_v2t(const MiningView& view, PseudoLabeling& labels_v, const PseudoLabeling& labels_t,
                                      const MiningConfig& config = {}) {
    MiningReport r;
    r.initial_outliers_v = labels_v.outlier_count();
    r.initial_outliers_t = labels_t.outlier_count();
    detail::mine_direction(view, Modality::Image, labels_v, labels_t, config, r);
    r.remaining_outliers_v = labels_v.outlier_count();
    r.remaining_outliers_t = labels_t.outlier_count();
    return r;
}

/// Mines text outliers through their paired images; labels_t is updated in place.
inline MiningReport mine_outliers_t2v(const MiningView& view, const PseudoLabeling& labels_v, PseudoLabeling& labels_t,
                                      const MiningConfig& config = {}) {
    MiningReport r;
    r.initial_outliers_v = labels_v.outlier_count();
    r.initial_outliers_t = labels_t.outlier_count();
    detail::mine_direction(view, Modality::Text, labels_t, labels_v, config, r);
    r.remaining_outliers_v = labels_v.outlier_count();
    r.remaining_outliers_t = labels_t.outlier_count();
    return r;
}

/// Both directions, image direction first unless configured otherwise.
inline MiningReport run_refined_stage(const MiningView& view, PseudoLabeling& labels_v, PseudoLabeling& labels_t,
                                      const MiningConfig& config = {}) {
    MiningReport r;
    r.initial_outliers_v = labels_v.outlier_count();
    r.initial_outliers_t = labels_t.outlier_count();
    auto run = [&](Modality m) {
        if (m == Modality::Image)
            detail::mine_direction(view, Modality::Image, labels_v, labels_t, config, r);
        else
            detail::mine_direction(view, Modality::Text, labels_t, labels_v, config, r);
    };
    run(config.image_first ? Modality::Image : Modality::Text);
    run(config.image_first ? Modality::Text : Modality::Image);
    r.remaining_outliers_v = labels_v.outlier_count();
    r.remaining_outliers_t = labels_t.outlier_count();
    return r;
}

using PairList = std::vector<std::pair<std::size_t, std::size_t>>;

struct PairPartition {
    PairList mined;          // both endpoints clustered
    PairList supplementary;  // at least one endpoint still an outlier
};

inline PairPartition partition_two_stage(const PairGraph& pairs, const PseudoLabeling& labels_v,
                                         const PseudoLabeling& labels_t) {
    PairPartition out;
    for (const auto& p : pairs.all_pairs())
        (labels_v.is_outlier(p.first) || labels_t.is_outlier(p.second) ? out.supplementary : out.mined).push_back(p);
    return out;
}

}  // namespace cpcl
