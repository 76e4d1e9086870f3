#pragma once

/// \file hcm.hpp
/// Hybrid cross-modal matching losses. Every loss returns its value together with exact
/// gradients with respect to the batch feature matrices and the temperatures.
///
/// Conventions:
///  - row i of image_features and row i of text_features form a paired instance;
///  - per-item losses are averaged over the items that take part in the term;
///  - prototype memories are constants (no gradient flows into them);
///  - the image-anchored prototype term uses the image memory's temperature, the
///    text-anchored term the text memory's.

#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/pmm.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace cpcl {

struct Batch {
    Matrix image_features;  // B x D
    Matrix text_features;   // B x D
    std::vector<std::size_t> image_ids;
    std::vector<std::size_t> text_ids;
    /// Image-memory cluster of each item's image (the image-side positive), nullopt for outliers.
    std::vector<std::optional<std::size_t>> image_cluster;
    /// Text-memory cluster of each item's text (the text-side positive), nullopt for outliers.
    std::vector<std::optional<std::size_t>> text_cluster;

    std::size_t size() const noexcept { return static_cast<std::size_t>(image_features.rows()); }
};

struct LossOutput {
    double value = 0.0;
    Matrix grad_image;
    Matrix grad_text;
    double grad_tau_image = 0.0;  // image-anchored prototype temperature
    double grad_tau_text = 0.0;   // text-anchored prototype temperature
    double grad_tau = 0.0;        // instance-level temperature (ICPM / ITC)

    static LossOutput zeros(const Batch& b) {
        return {0.0, Matrix::Zero(b.image_features.rows(), b.image_features.cols()),
                Matrix::Zero(b.text_features.rows(), b.text_features.cols()), 0.0, 0.0, 0.0};
    }

    LossOutput& operator+=(const LossOutput& o) {
        value += o.value;
        grad_image += o.grad_image;
        grad_text += o.grad_text;
        grad_tau_image += o.grad_tau_image;
        grad_tau_text += o.grad_tau_text;
        grad_tau += o.grad_tau;
        return *this;
    }
};

namespace detail {

inline void check_batch(const Batch& b) {
    if (b.image_features.rows() != b.text_features.rows() || b.image_features.cols() != b.text_features.cols())
        throw ParameterError("batch image/text feature shapes differ");
}

/// Row-wise log-sum-exp with max subtraction.
inline Vector row_logsumexp(const Matrix& z) {
    Vector out(z.rows());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        out[i] = m + std::log((z.row(i).array() - m).exp().sum());
    }
    return out;
}

struct PrototypeTerm {
    double value = 0.0;
    Matrix grad;  // B x D
    double grad_tau = 0.0;
    std::size_t count = 0;
};

/// Mean over items with a positive of  -log softmax(f . c / tau)[positive].
inline PrototypeTerm prototype_cross_entropy(const Matrix& features, const std::vector<std::optional<std::size_t>>& positives,
                                             const Matrix& prototypes, double tau) {
    if (!(tau > 0.0)) throw ParameterError("temperature must be > 0");
    PrototypeTerm out{0.0, Matrix::Zero(features.rows(), features.cols()), 0.0, 0};
    if (positives.size() != static_cast<std::size_t>(features.rows()))
        throw ParameterError("positive list length does not match batch size");
    for (const auto& p : positives) {
        if (!p) continue;
        if (*p >= static_cast<std::size_t>(prototypes.rows()))
            throw IndexError("positive prototype " + std::to_string(*p) + " out of range for memory of size " +
                             std::to_string(prototypes.rows()));
        ++out.count;
    }
    if (out.count == 0 || prototypes.rows() == 0) return out;
    const Matrix z = (features * prototypes.transpose()) / tau;
    const Vector lse = row_logsumexp(z);
    const double inv_n = 1.0 / static_cast<double>(out.count);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const auto& pos = positives[static_cast<std::size_t>(i)];
        if (!pos) continue;
        const auto k = static_cast<Eigen::Index>(*pos);
        out.value += (lse[i] - z(i, k)) * inv_n;
        const RowVector p = (z.row(i).array() - lse[i]).exp().matrix();
        RowVector g = p * prototypes;
        g -= prototypes.row(k);
        out.grad.row(i) = g * (inv_n / tau);
        out.grad_tau += -(p.dot(z.row(i)) - z(i, k)) * inv_n / tau;
    }
    return out;
}

}  // namespace detail

/// Cross-modal prototype loss: images against the text memory (positive = cluster of the
/// paired text), texts against the image memory (positive = cluster of the paired image).
inline LossOutput pcm_cross(const Batch& batch, const PrototypeMemory& text_mem, const PrototypeMemory& image_mem) {
    detail::check_batch(batch);
    const auto v = detail::prototype_cross_entropy(batch.image_features, batch.text_cluster, text_mem.prototypes,
                                                   image_mem.temperature);
    const auto t = detail::prototype_cross_entropy(batch.text_features, batch.image_cluster, image_mem.prototypes,
                                                   text_mem.temperature);
    if (v.count + t.count == 0) throw EmptyBatchError("pcm_cross: no batch item has a clustered positive");
    return {v.value + t.value, v.grad, t.grad, v.grad_tau, t.grad_tau, 0.0};
}

/// Single-modal prototype loss: each modality against its own memory and own cluster.
inline LossOutput pcm_single(const Batch& batch, const PrototypeMemory& image_mem, const PrototypeMemory& text_mem) {
    detail::check_batch(batch);
    const auto v = detail::prototype_cross_entropy(batch.image_features, batch.image_cluster, image_mem.prototypes,
                                                   image_mem.temperature);
    const auto t = detail::prototype_cross_entropy(batch.text_features, batch.text_cluster, text_mem.prototypes,
                                                   text_mem.temperature);
    if (v.count + t.count == 0) throw EmptyBatchError("pcm_single: no batch item has a clustered positive");
    return {v.value + t.value, v.grad, t.grad, v.grad_tau, t.grad_tau, 0.0};
}

/// Square boolean matrix; cell (i, j) says whether image i and text j are a matched pair.
class MatchMatrix {
public:
    MatchMatrix() = default;
    explicit MatchMatrix(std::size_t n, bool fill = false) : n_(n), cells_(n * n, fill ? 1 : 0) {}

    static MatchMatrix identity(std::size_t n) {
        MatchMatrix m(n);
        for (std::size_t i = 0; i < n; ++i) m.set(i, i, true);
        return m;
    }

    std::size_t size() const noexcept { return n_; }
    bool operator()(std::size_t i, std::size_t j) const { return cells_[i * n_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { cells_[i * n_ + j] = v ? 1 : 0; }
    bool operator==(const MatchMatrix&) const = default;

private:
    std::size_t n_ = 0;
    std::vector<unsigned char> cells_;
};

namespace detail {

/// One direction of the projection-matching KL term. Returns the gradient with respect to the
/// logits (already divided by the batch size) and the value.
inline double kl_direction(const Matrix& z, const Matrix& q, double eps, Matrix& grad_logits) {
    const Eigen::Index n = z.rows();
    const Vector lse = row_logsumexp(z);
    grad_logits.resize(n, z.cols());
    double value = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVector logp = z.row(i).array() - lse[i];
        const RowVector p = logp.array().exp().matrix();
        const RowVector a = logp.array() - (q.row(i).array() + eps).log();
        const double li = p.dot(a);
        value += li;
        grad_logits.row(i) = (p.array() * (a.array() - li)).matrix() / static_cast<double>(n);
    }
    return value / static_cast<double>(n);
}

/// One direction of InfoNCE with diagonal positives.
inline double infonce_direction(const Matrix& z, Matrix& grad_logits) {
    const Eigen::Index n = z.rows();
    const Vector lse = row_logsumexp(z);
    grad_logits.resize(n, z.cols());
    double value = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        value += lse[i] - z(i, i);
        grad_logits.row(i) = (z.row(i).array() - lse[i]).exp().matrix();
        grad_logits(i, i) -= 1.0;
    }
    grad_logits /= static_cast<double>(n);
    return value / static_cast<double>(n);
}

/// Assembles feature and temperature gradients from logit gradients of both directions,
/// where z = S / tau, S = F_v F_t^T and the text-anchored logits are z^T.
inline LossOutput assemble_bidirectional(const Batch& batch, const Matrix& z, double tau, double value,
                                         const Matrix& g_v2t, const Matrix& g_t2v) {
    const Matrix d_s = (g_v2t + g_t2v.transpose()) / tau;
    LossOutput out;
    out.value = value;
    out.grad_image = d_s * batch.text_features;
    out.grad_text = d_s.transpose() * batch.image_features;
    out.grad_tau = -(g_v2t.cwiseProduct(z).sum() + g_t2v.cwiseProduct(z.transpose()).sum()) / tau;
    return out;
}

}  // namespace detail

/// Instance-level projection matching: KL(p || q) in both directions, where p is the softmax
/// over in-batch similarities and q the normalized match row.
inline LossOutput icpm(const Batch& batch, const MatchMatrix& match, double tau = 0.07, double eps = 1e-8) {
    detail::check_batch(batch);
    const std::size_t n = batch.size();
    if (n == 0) throw EmptyBatchError("icpm: empty batch");
    if (match.size() != n) throw ParameterError("icpm: match matrix size does not match batch");
    if (!(tau > 0.0)) throw ParameterError("icpm: temperature must be > 0");
    Matrix q_v(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Matrix q_t(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0, col = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row += match(i, j);
            col += match(j, i);
        }
        if (row == 0.0) throw DegenerateMatchError("icpm: image row " + std::to_string(i) + " has no match");
        if (col == 0.0) throw DegenerateMatchError("icpm: text column " + std::to_string(i) + " has no match");
        for (std::size_t j = 0; j < n; ++j) {
            q_v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = match(i, j) / row;
            q_t(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = match(j, i) / col;
        }
    }
    const Matrix z = (batch.image_features * batch.text_features.transpose()) / tau;
    Matrix g_v2t, g_t2v;
    const double v2t = detail::kl_direction(z, q_v, eps, g_v2t);
    const double t2v = detail::kl_direction(z.transpose(), q_t, eps, g_t2v);
    return detail::assemble_bidirectional(batch, z, tau, v2t + t2v, g_v2t, g_t2v);
}

/// Bidirectional InfoNCE with in-batch negatives.
inline LossOutput itc(const Batch& batch, double tau = 0.07) {
    detail::check_batch(batch);
    if (batch.size() < 2) throw EmptyBatchError("itc: needs at least two pairs for in-batch negatives");
    if (!(tau > 0.0)) throw ParameterError("itc: temperature must be > 0");
    const Matrix z = (batch.image_features * batch.text_features.transpose()) / tau;
    Matrix g_v2t, g_t2v;
    const double v2t = detail::infonce_direction(z, g_v2t);
    const double t2v = detail::infonce_direction(z.transpose(), g_t2v);
    return detail::assemble_bidirectional(batch, z, tau, v2t + t2v, g_v2t, g_t2v);
}

namespace detail {

inline bool same_cluster(std::size_t a, std::size_t b, const PseudoLabeling& l) {
    return a == b || (l.labels.at(a) != kOutlier && l.labels.at(a) == l.labels.at(b));
}

}  // namespace detail

/// y(i, j) is true iff i == j, or text j shares a text cluster with a caption paired to
/// image i, or image i shares an image cluster with an image paired to text j. An instance
/// always shares a cluster with itself, outliers with nothing else.
inline MatchMatrix build_match_matrix(const Batch& batch, const PseudoLabeling& labels_v, const PseudoLabeling& labels_t,
                                      const PairGraph& pairs) {
    const std::size_t n = batch.size();
    if (batch.image_ids.size() != n || batch.text_ids.size() != n)
        throw ParameterError("build_match_matrix: batch ids do not match batch size");
    MatchMatrix y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t img = batch.image_ids[i];
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t txt = batch.text_ids[j];
            bool m = (i == j);
            for (std::size_t cap : pairs.texts_of(img)) {
                if (m) break;
                m = detail::same_cluster(cap, txt, labels_t);
            }
            for (std::size_t other : pairs.images_of(txt)) {
                if (m) break;
                m = detail::same_cluster(other, img, labels_v);
            }
            y.set(i, j, m);
        }
    }
    return y;
}

enum class PcmVariant { Cross, Single };

struct LossConfig {
    bool use_pcm = true;
    bool use_icpm = true;
    PcmVariant pcm_variant = PcmVariant::Cross;
    double icpm_temperature = 0.07;
    double icpm_epsilon = 1e-8;
};

struct LossBreakdown {
    double pcm = 0.0;
    double icpm = 0.0;
};

/// L = L_pcm + L_icpm, either term switchable. A prototype term with no clustered positive
/// in the batch contributes zero.
inline LossOutput overall_loss(const Batch& batch, const PrototypeMemory& image_mem, const PrototypeMemory& text_mem,
                               const PseudoLabeling& labels_v, const PseudoLabeling& labels_t, const PairGraph& pairs,
                               const LossConfig& config, LossBreakdown* breakdown = nullptr) {
    detail::check_batch(batch);
    LossOutput total = LossOutput::zeros(batch);
    LossBreakdown parts;
    if (config.use_pcm) {
        const auto& pos_v = config.pcm_variant == PcmVariant::Cross ? batch.text_cluster : batch.image_cluster;
        const auto& pos_t = config.pcm_variant == PcmVariant::Cross ? batch.image_cluster : batch.text_cluster;
        const bool any = std::any_of(pos_v.begin(), pos_v.end(), [](const auto& p) { return p.has_value(); }) ||
                         std::any_of(pos_t.begin(), pos_t.end(), [](const auto& p) { return p.has_value(); });
        if (any) {
            const LossOutput pcm = config.pcm_variant == PcmVariant::Cross ? pcm_cross(batch, text_mem, image_mem)
                                                                           : pcm_single(batch, image_mem, text_mem);
            parts.pcm = pcm.value;
            total += pcm;
        }
    }
    if (config.use_icpm) {
        const LossOutput term =
            icpm(batch, build_match_matrix(batch, labels_v, labels_t, pairs), config.icpm_temperature, config.icpm_epsilon);
        parts.icpm = term.value;
        total += term;
    }
    if (breakdown) *breakdown = parts;
    return total;
}

}  // namespace cpcl
