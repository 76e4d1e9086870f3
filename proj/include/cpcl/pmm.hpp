#pragma once

/// \file pmm.hpp
/// Per-modality prototype memory: one row per pseudo-label cluster, initialized from
/// cluster members and moved by momentum updates during training.

#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/types.hpp"

#include <optional>
#include <random>

namespace cpcl {

enum class MemoryInit { Average, Random };

struct MemoryConfig {
    double momentum = 0.9;
    double temperature = 0.07;
    bool renormalize = true;
    MemoryInit init = MemoryInit::Average;
};

struct PrototypeMemory {
    Matrix prototypes;  // n_clusters x D
    double momentum = 0.9;
    double temperature = 0.07;
    bool renormalize = true;
    Modality modality = Modality::Image;

    std::size_t size() const noexcept { return static_cast<std::size_t>(prototypes.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(prototypes.cols()); }
};

/// Average: mean of cluster members. Random: one uniformly drawn member per cluster.
/// Outliers never contribute.
inline PrototypeMemory init_memory(const EmbeddingSet& set, const PseudoLabeling& labeling,
                                   const MemoryConfig& config = {}, std::uint64_t seed = 0) {
    if (labeling.n_clusters < 1) throw EmptyMemoryError(std::string(to_string(set.modality)) + " labeling has no clusters");
    if (labeling.size() != set.count()) throw ParameterError("labeling size does not match embedding count");
    PrototypeMemory mem;
    mem.momentum = config.momentum;
    mem.temperature = config.temperature;
    mem.renormalize = config.renormalize;
    mem.modality = set.modality;
    mem.prototypes = Matrix::Zero(labeling.n_clusters, set.vectors.cols());

    const auto members = labeling.members();
    std::mt19937_64 rng(seed);
    for (std::size_t c = 0; c < members.size(); ++c) {
        const auto& m = members[c];
        if (m.empty()) throw EmptyMemoryError("cluster " + std::to_string(c) + " has no members");
        auto row = mem.prototypes.row(static_cast<Eigen::Index>(c));
        if (config.init == MemoryInit::Average) {
            for (std::size_t i : m) row += set.vectors.row(static_cast<Eigen::Index>(i));
            row /= static_cast<double>(m.size());
        } else {
            const std::size_t pick = m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)];
            row = set.vectors.row(static_cast<Eigen::Index>(pick));
        }
        if (mem.renormalize) {
            const double n = row.norm();
            if (n > 0.0) row /= n;
        }
    }
    return mem;
}

/// c <- m * c + (1 - m) * f, then renormalized when enabled.
inline void momentum_update(PrototypeMemory& mem, const Eigen::Ref<const RowVector>& feature, std::size_t cluster) {
    if (cluster >= mem.size())
        throw IndexError("cluster " + std::to_string(cluster) + " out of range for memory of size " +
                         std::to_string(mem.size()));
    auto row = mem.prototypes.row(static_cast<Eigen::Index>(cluster));
    row = mem.momentum * row + (1.0 - mem.momentum) * feature;
    if (mem.renormalize) {
        const double n = row.norm();
        if (n > 0.0) row /= n;
    }
}

/// Positive prototype id for an instance in the opposite modality's memory: the cluster of
/// its paired partner. `partner` selects among multiple partners (defaults to the first).
/// Returns nullopt when that partner is an outlier.
inline std::optional<std::size_t> lookup_positive(Modality modality, std::size_t instance,
                                                  const PseudoLabeling& opposite_labeling, const PairGraph& pairs,
                                                  std::optional<std::size_t> partner = std::nullopt) {
    const auto& partners = pairs.partners(modality, instance);
    if (partners.empty())
        throw ReferentialIntegrityError(std::string(to_string(modality)) + " " + std::to_string(instance) + " has no pairs");
    std::size_t chosen = partners.front();
    if (partner) {
        if (std::find(partners.begin(), partners.end(), *partner) == partners.end())
            throw ReferentialIntegrityError(std::to_string(*partner) + " is not paired with " +
                                            std::string(to_string(modality)) + " " + std::to_string(instance));
        chosen = *partner;
    }
    const int label = opposite_labeling.labels.at(chosen);
    if (label == kOutlier) return std::nullopt;
    return static_cast<std::size_t>(label);
}

}  // namespace cpcl
