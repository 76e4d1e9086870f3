#pragma once

/// \file trainer.hpp
/// Epoch loop: encode -> cluster -> init memory -> mine outliers -> prototype/instance
/// matching on mined pairs (with momentum memory updates) -> InfoNCE on the remaining pairs.
///
/// The encoders are small projection heads over the input embeddings. All randomness is
/// derived from (seed, epoch), so a run is a pure function of corpus, config and seed and a
/// resumed run continues bit-exactly.

#include "cpcl/affinity.hpp"
#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/hcm.hpp"
#include "cpcl/metrics.hpp"
#include "cpcl/oplm.hpp"
#include "cpcl/pmm.hpp"
#include "cpcl/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace cpcl {

/// splitmix64 finalizer over (seed, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    auto mix = [](std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ b);
}

struct NamedTensor {
    std::string name;
    Matrix value;
};

/// Affine map (optionally with one tanh hidden layer) followed by row normalization.
class ProjectionHead {
public:
    struct Cache {
        Matrix input;
        Matrix hidden;  // tanh activations, empty without a hidden layer
        Matrix raw;     // pre-normalization output
        Vector norms;
        Matrix output;
    };

    ProjectionHead() = default;

    ProjectionHead(std::string prefix, std::size_t in_dim, std::size_t out_dim, std::size_t hidden, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto init = [&](std::size_t rows, std::size_t cols) {
            Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * gauss(rng);
            return m;
        };
        if (hidden > 0) {
            tensors_.push_back({prefix + ".w1", init(in_dim, hidden)});
            tensors_.push_back({prefix + ".b1", Matrix::Zero(1, static_cast<Eigen::Index>(hidden))});
            tensors_.push_back({prefix + ".w2", init(hidden, out_dim)});
            tensors_.push_back({prefix + ".b2", Matrix::Zero(1, static_cast<Eigen::Index>(out_dim))});
        } else {
            tensors_.push_back({prefix + ".w1", init(in_dim, out_dim)});
            tensors_.push_back({prefix + ".b1", Matrix::Zero(1, static_cast<Eigen::Index>(out_dim))});
        }
    }

    bool has_hidden() const noexcept { return tensors_.size() == 4; }
    std::size_t in_dim() const { return static_cast<std::size_t>(tensors_.front().value.rows()); }
    std::size_t out_dim() const { return static_cast<std::size_t>(tensors_[tensors_.size() - 2].value.cols()); }

    std::vector<NamedTensor>& tensors() noexcept { return tensors_; }
    const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }

    Matrix forward(const Matrix& x) const {
        Cache c;
        return forward(x, c);
    }

    Matrix forward(const Matrix& x, Cache& cache) const {
        cache.input = x;
        const Matrix* a = &cache.input;
        if (has_hidden()) {
            cache.hidden = ((x * tensors_[0].value).rowwise() + tensors_[1].value.row(0)).array().tanh().matrix();
            a = &cache.hidden;
        }
        const auto& w = tensors_[tensors_.size() - 2].value;
        const auto& b = tensors_[tensors_.size() - 1].value;
        cache.raw = ((*a) * w).rowwise() + b.row(0);
        cache.norms = cache.raw.rowwise().norm();
        cache.output = cache.raw;
        for (Eigen::Index i = 0; i < cache.output.rows(); ++i) {
            if (!(cache.norms[i] > 0.0)) throw DegenerateVectorError("projection head produced a zero vector at row " + std::to_string(i));
            cache.output.row(i) /= cache.norms[i];
        }
        return cache.output;
    }

    /// Accumulates parameter gradients (same order as tensors()) from d loss / d output.
    void backward(const Cache& cache, const Matrix& grad_output, std::vector<Matrix>& grads) const {
        if (grads.size() != tensors_.size()) {
            grads.clear();
            for (const auto& t : tensors_) grads.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
        }
        Matrix d_raw(grad_output.rows(), grad_output.cols());
        for (Eigen::Index i = 0; i < grad_output.rows(); ++i) {
            const auto y = cache.output.row(i);
            const auto g = grad_output.row(i);
            d_raw.row(i) = (g - y * y.dot(g)) / cache.norms[i];
        }
        const std::size_t last = tensors_.size() - 2;
        const Matrix& a = has_hidden() ? cache.hidden : cache.input;
        grads[last] += a.transpose() * d_raw;
        grads[last + 1] += d_raw.colwise().sum();
        if (has_hidden()) {
            const Matrix d_a = d_raw * tensors_[last].value.transpose();
            const Matrix d_pre = (d_a.array() * (1.0 - cache.hidden.array().square())).matrix();
            grads[0] += cache.input.transpose() * d_pre;
            grads[1] += d_pre.colwise().sum();
        }
    }

private:
    std::vector<NamedTensor> tensors_;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<Matrix> first;
    std::vector<Matrix> second;
};

/// Bias-corrected Adam. Throws NonFiniteGradientError (naming the tensor) before touching
/// any parameter if a gradient is not finite.
inline void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                      const std::vector<std::string>& names, AdamState& state, double lr) {
    if (params.size() != grads.size()) throw ParameterError("adam_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols())
            throw ParameterError("adam_step: shape mismatch for " + (i < names.size() ? names[i] : std::to_string(i)));
        if (!grads[i].allFinite())
            throw NonFiniteGradientError("non-finite gradient in " + (i < names.size() ? names[i] : std::to_string(i)));
    }
    if (state.first.size() != params.size()) {
        state.first.clear();
        state.second.clear();
        for (const Matrix* p : params) {
            state.first.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.second.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& m = state.first[i];
        Matrix& v = state.second[i];
        m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
        v = state.beta2 * v + (1.0 - state.beta2) * grads[i].cwiseProduct(grads[i]);
        const auto m_hat = m.array() / c1;
        const auto v_hat = v.array() / c2;
        params[i]->array() -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}

enum class ClusterBackend { Dbscan, KMeans };
enum class ClusterMetric { Jaccard, Cosine };

struct ClusterConfig {
    ClusterBackend backend = ClusterBackend::Dbscan;
    ClusterMetric metric = ClusterMetric::Jaccard;
    JaccardParams jaccard;
    double eps_image = 0.5;
    std::size_t min_pts_image = 2;
    double eps_text = 0.6;
    std::size_t min_pts_text = 4;
    std::size_t kmeans_k_image = 0;
    std::size_t kmeans_k_text = 0;
    std::size_t kmeans_iters = 50;
};

struct TrainConfig {
    std::size_t batch_size = 128;
    std::size_t epochs = 60;
    double warmup_epochs = 5.0;
    double lr = 1e-5;
    double lr_floor = 1e-6;  // learning rate at the start of warm-up
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double grad_clip = 5.0;  // global-norm clip; <= 0 disables

    std::size_t head_out_dim = 0;  // 0: same as the input dimension
    std::size_t head_hidden = 0;   // 0: single affine layer

    MemoryConfig memory;
    bool learnable_temperature = true;
    double temperature_min = 0.005;
    double temperature_max = 1.0;
    bool update_memory = true;

    ClusterConfig clustering;
    LossConfig loss;
    bool use_itc = true;
    double itc_temperature = 0.07;

    bool oplm_refined = true;
    bool oplm_supplementary = true;
    MiningConfig mining;

    bool evaluate = true;
    QueryDirection eval_direction = QueryDirection::TextToImage;
    std::uint64_t seed = 0;
};

/// Learning rate at a (fractional) epoch position: linear warm-up from lr_floor to lr, then
/// cosine decay from lr to 0 at the final epoch.
inline double lr_at(double epoch_position, const TrainConfig& c) {
    const double t = std::max(0.0, epoch_position);
    if (c.warmup_epochs > 0.0 && t < c.warmup_epochs) return c.lr_floor + (c.lr - c.lr_floor) * (t / c.warmup_epochs);
    const double span = static_cast<double>(c.epochs) - c.warmup_epochs;
    if (span <= 0.0) return c.lr;
    const double progress = std::clamp((t - c.warmup_epochs) / span, 0.0, 1.0);
    return 0.5 * c.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Shuffles pairs and cuts them into batches; a trailing batch with fewer than 2 pairs is dropped.
inline std::vector<PairList> sample_batches(const PairList& pairs, std::size_t batch_size, std::uint64_t seed) {
    if (batch_size < 2) throw ParameterError("batch_size must be >= 2");
    PairList shuffled = pairs;
    std::mt19937_64 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<PairList> out;
    for (std::size_t start = 0; start < shuffled.size(); start += batch_size) {
        const std::size_t end = std::min(start + batch_size, shuffled.size());
        if (end - start < 2) break;
        out.emplace_back(shuffled.begin() + static_cast<std::ptrdiff_t>(start),
                         shuffled.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

struct TrainState {
    ProjectionHead image_head;
    ProjectionHead text_head;
    double tau_image = 0.07;
    double tau_text = 0.07;
    AdamState adam;
    std::size_t epoch = 0;  // completed epochs
    std::uint64_t seed = 0;

    bool operator==(const TrainState& o) const {
        auto same = [](const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t i = 0; i < a.size(); ++i)
                if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
            return true;
        };
        auto values = [](const ProjectionHead& h) {
            std::vector<Matrix> out;
            for (const auto& t : h.tensors()) out.push_back(t.value);
            return out;
        };
        return same(values(image_head), values(o.image_head)) && same(values(text_head), values(o.text_head)) &&
               tau_image == o.tau_image && tau_text == o.tau_text && adam.step == o.adam.step &&
               same(adam.first, o.adam.first) && same(adam.second, o.adam.second) && epoch == o.epoch && seed == o.seed;
    }
};

inline TrainState init_train_state(std::size_t input_dim, const TrainConfig& config) {
    TrainState s;
    const std::size_t out = config.head_out_dim ? config.head_out_dim : input_dim;
    s.image_head = ProjectionHead("image", input_dim, out, config.head_hidden, derive_seed(config.seed, 1, 0));
    s.text_head = ProjectionHead("text", input_dim, out, config.head_hidden, derive_seed(config.seed, 1, 1));
    s.tau_image = config.memory.temperature;
    s.tau_text = config.memory.temperature;
    s.adam.beta1 = config.adam_beta1;
    s.adam.beta2 = config.adam_beta2;
    s.adam.epsilon = config.adam_epsilon;
    s.seed = config.seed;
    return s;
}

/// Encoded (unit-norm) features of every instance under the current heads.
struct EncodedCorpus {
    EmbeddingSet images;
    EmbeddingSet texts;
};

inline EncodedCorpus encode(const Corpus& corpus, const TrainState& state) {
    return {{Modality::Image, state.image_head.forward(corpus.images.vectors)},
            {Modality::Text, state.text_head.forward(corpus.texts.vectors)}};
}

inline MetricsReport evaluate(const Corpus& corpus, const TrainState& state,
                              QueryDirection direction = QueryDirection::TextToImage) {
    const auto enc = encode(corpus, state);
    return summarize(rank_corpus(corpus, enc.images.vectors, enc.texts.vectors, direction));
}

inline PseudoLabeling cluster_modality(const EmbeddingSet& features, const ClusterConfig& c, std::uint64_t seed) {
    const bool image = features.modality == Modality::Image;
    if (c.backend == ClusterBackend::KMeans) {
        const std::size_t k = image ? c.kmeans_k_image : c.kmeans_k_text;
        if (k == 0) throw ParameterError("kmeans backend needs kmeans_k_image / kmeans_k_text");
        return kmeans(features, std::min(k, features.count()), c.kmeans_iters, seed).labeling;
    }
    const DistanceMatrix base = cosine_distance_matrix(features);
    const DistanceMatrix dist = c.metric == ClusterMetric::Jaccard ? jaccard_distance_matrix(base, c.jaccard) : base;
    return dbscan(dist, image ? c.eps_image : c.eps_text, image ? c.min_pts_image : c.min_pts_text, features.modality);
}

struct EpochReport {
    std::size_t epoch = 0;
    double lr_last = 0.0;
    double loss_overall = 0.0;  // epoch means over mined batches
    double loss_pcm = 0.0;
    double loss_icpm = 0.0;
    double loss_itc = 0.0;  // epoch mean over supplementary batches
    std::size_t mined_batches = 0;
    std::size_t supplementary_batches = 0;
    std::size_t clusters_image = 0;
    std::size_t clusters_text = 0;
    std::size_t outliers_image_before = 0;
    std::size_t outliers_text_before = 0;
    std::size_t outliers_image_after = 0;
    std::size_t outliers_text_after = 0;
    std::size_t mined_pairs = 0;
    std::size_t supplementary_pairs = 0;
    double tau_image = 0.0;
    double tau_text = 0.0;
    std::optional<MetricsReport> metrics;
};

namespace detail {

struct StepContext {
    TrainState& state;
    const TrainConfig& config;
};

/// Gathers the parameter list in a fixed order: image head, text head, temperatures.
inline void collect_params(TrainState& s, bool with_tau, Matrix& tau_v, Matrix& tau_t, std::vector<Matrix*>& params,
                           std::vector<std::string>& names) {
    params.clear();
    names.clear();
    for (auto* head : {&s.image_head, &s.text_head})
        for (auto& t : head->tensors()) {
            params.push_back(&t.value);
            names.push_back(t.name);
        }
    if (with_tau) {
        tau_v = Matrix::Constant(1, 1, s.tau_image);
        tau_t = Matrix::Constant(1, 1, s.tau_text);
        params.push_back(&tau_v);
        names.push_back("tau.image");
        params.push_back(&tau_t);
        names.push_back("tau.text");
    }
}

struct ForwardBatch {
    Batch batch;
    ProjectionHead::Cache image_cache;
    ProjectionHead::Cache text_cache;
};

inline ForwardBatch forward_batch(const Corpus& corpus, const TrainState& s, const PairList& items,
                                  const PseudoLabeling* labels_v, const PseudoLabeling* labels_t) {
    const auto b = static_cast<Eigen::Index>(items.size());
    Matrix xv(b, corpus.images.vectors.cols()), xt(b, corpus.texts.vectors.cols());
    ForwardBatch fb;
    for (Eigen::Index i = 0; i < b; ++i) {
        const auto [img, txt] = items[static_cast<std::size_t>(i)];
        xv.row(i) = corpus.images.vectors.row(static_cast<Eigen::Index>(img));
        xt.row(i) = corpus.texts.vectors.row(static_cast<Eigen::Index>(txt));
        fb.batch.image_ids.push_back(img);
        fb.batch.text_ids.push_back(txt);
        auto cluster_of = [](const PseudoLabeling* l, std::size_t id) -> std::optional<std::size_t> {
            if (!l || l->is_outlier(id)) return std::nullopt;
            return static_cast<std::size_t>((*l)[id]);
        };
        fb.batch.image_cluster.push_back(cluster_of(labels_v, img));
        fb.batch.text_cluster.push_back(cluster_of(labels_t, txt));
    }
    fb.batch.image_features = s.image_head.forward(xv, fb.image_cache);
    fb.batch.text_features = s.text_head.forward(xt, fb.text_cache);
    return fb;
}

/// Backpropagates feature/temperature gradients into the heads and takes one Adam step.
inline void apply_gradients(TrainState& s, const TrainConfig& config, const ForwardBatch& fb, const LossOutput& loss,
                            double lr, bool tau_trainable) {
    std::vector<Matrix> g_image, g_text;
    s.image_head.backward(fb.image_cache, loss.grad_image, g_image);
    s.text_head.backward(fb.text_cache, loss.grad_text, g_text);
    std::vector<Matrix> grads;
    for (auto& g : g_image) grads.push_back(std::move(g));
    for (auto& g : g_text) grads.push_back(std::move(g));
    const bool with_tau = config.learnable_temperature && tau_trainable;
    if (config.learnable_temperature) {
        // Keep the Adam slot layout fixed across stages; the ITC stage contributes zero.
        grads.push_back(Matrix::Constant(1, 1, with_tau ? loss.grad_tau_image : 0.0));
        grads.push_back(Matrix::Constant(1, 1, with_tau ? loss.grad_tau_text : 0.0));
    }
    if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += g.squaredNorm();
        const double norm = std::sqrt(sq);
        if (std::isfinite(norm) && norm > config.grad_clip)
            for (auto& g : grads) g *= config.grad_clip / norm;
    }
    Matrix tau_v, tau_t;
    std::vector<Matrix*> params;
    std::vector<std::string> names;
    collect_params(s, config.learnable_temperature, tau_v, tau_t, params, names);
    adam_step(params, grads, names, s.adam, lr);
    if (config.learnable_temperature) {
        s.tau_image = std::clamp(tau_v(0, 0), config.temperature_min, config.temperature_max);
        s.tau_text = std::clamp(tau_t(0, 0), config.temperature_min, config.temperature_max);
    }
}

}  // namespace detail

/// Runs one epoch and advances state.epoch. `eval_corpus` (when given, else the training
/// corpus if it carries ground truth) is evaluated after the epoch.
inline EpochReport train_epoch(TrainState& state, const Corpus& corpus, const TrainConfig& config,
                               const Corpus* eval_corpus = nullptr) {
    EpochReport report;
    report.epoch = state.epoch;
    const std::uint64_t epoch_seed = derive_seed(config.seed, 2, state.epoch);

    // (1) encode, (2) cluster each modality.
    const EncodedCorpus enc = encode(corpus, state);
    PseudoLabeling labels_v = cluster_modality(enc.images, config.clustering, derive_seed(epoch_seed, 10));
    PseudoLabeling labels_t = cluster_modality(enc.texts, config.clustering, derive_seed(epoch_seed, 11));
    report.clusters_image = static_cast<std::size_t>(labels_v.n_clusters);
    report.clusters_text = static_cast<std::size_t>(labels_t.n_clusters);
    report.outliers_image_before = labels_v.outlier_count();
    report.outliers_text_before = labels_t.outlier_count();

    // (3) memories from this epoch's clusters.
    std::optional<PrototypeMemory> mem_v, mem_t;
    MemoryConfig mc = config.memory;
    if (labels_v.n_clusters > 0 && labels_t.n_clusters > 0) {
        mc.temperature = state.tau_image;
        mem_v = init_memory(enc.images, labels_v, mc, derive_seed(epoch_seed, 12));
        mc.temperature = state.tau_text;
        mem_t = init_memory(enc.texts, labels_t, mc, derive_seed(epoch_seed, 13));
    }

    // (4) refined mining, (5) pair partition.
    if (config.oplm_refined)
        run_refined_stage(MiningView{enc.images.vectors, enc.texts.vectors, corpus.pairs}, labels_v, labels_t, config.mining);
    report.outliers_image_after = labels_v.outlier_count();
    report.outliers_text_after = labels_t.outlier_count();
    const PairPartition parts = partition_two_stage(corpus.pairs, labels_v, labels_t);
    report.mined_pairs = parts.mined.size();
    report.supplementary_pairs = parts.supplementary.size();

    const auto mined_batches =
        (mem_v && !parts.mined.empty()) ? sample_batches(parts.mined, config.batch_size, derive_seed(epoch_seed, 20))
                                        : std::vector<PairList>{};
    const auto supp_batches = (config.oplm_supplementary && !parts.supplementary.empty())
                                  ? sample_batches(parts.supplementary, config.batch_size, derive_seed(epoch_seed, 21))
                                  : std::vector<PairList>{};
    const std::size_t total = mined_batches.size() + supp_batches.size();
    if (total == 0)
        throw DegenerateEpochError("epoch " + std::to_string(state.epoch) + " has no usable batch in either stage");
    report.mined_batches = mined_batches.size();
    report.supplementary_batches = supp_batches.size();

    const bool any_mined_term = config.loss.use_pcm || config.loss.use_icpm;
    std::size_t step_in_epoch = 0;
    auto next_lr = [&] {
        const double pos = static_cast<double>(state.epoch) +
                           static_cast<double>(step_in_epoch++) / static_cast<double>(total);
        return report.lr_last = lr_at(pos, config);
    };

    // (6) mined stage.
    for (const auto& items : mined_batches) {
        const double lr = next_lr();
        mem_v->temperature = state.tau_image;
        mem_t->temperature = state.tau_text;
        const auto fb = detail::forward_batch(corpus, state, items, &labels_v, &labels_t);
        LossBreakdown parts_loss;
        const LossOutput loss =
            overall_loss(fb.batch, *mem_v, *mem_t, labels_v, labels_t, corpus.pairs, config.loss, &parts_loss);
        report.loss_overall += loss.value;
        report.loss_pcm += parts_loss.pcm;
        report.loss_icpm += parts_loss.icpm;
        if (any_mined_term) detail::apply_gradients(state, config, fb, loss, lr, true);
        if (config.update_memory) {
            for (std::size_t i = 0; i < fb.batch.size(); ++i) {
                const auto r = static_cast<Eigen::Index>(i);
                momentum_update(*mem_v, fb.batch.image_features.row(r), *fb.batch.image_cluster[i]);
                momentum_update(*mem_t, fb.batch.text_features.row(r), *fb.batch.text_cluster[i]);
            }
        }
    }
    if (!mined_batches.empty()) {
        const double n = static_cast<double>(mined_batches.size());
        report.loss_overall /= n;
        report.loss_pcm /= n;
        report.loss_icpm /= n;
    }

    // (7) supplementary stage.
    for (const auto& items : supp_batches) {
        const double lr = next_lr();
        const auto fb = detail::forward_batch(corpus, state, items, nullptr, nullptr);
        if (!config.use_itc) continue;
        const LossOutput loss = itc(fb.batch, config.itc_temperature);
        report.loss_itc += loss.value;
        detail::apply_gradients(state, config, fb, loss, lr, false);
    }
    if (!supp_batches.empty()) report.loss_itc /= static_cast<double>(supp_batches.size());

    ++state.epoch;
    report.tau_image = state.tau_image;
    report.tau_text = state.tau_text;
    if (config.evaluate) {
        const Corpus* target = eval_corpus ? eval_corpus : (corpus.ground_truth ? &corpus : nullptr);
        if (target) report.metrics = evaluate(*target, state, config.eval_direction);
    }
    return report;
}

}  // namespace cpcl

namespace cpcl {

struct TrainingRun {
    TrainState state;
    std::optional<MetricsReport> initial;  // before the first epoch of this run
    std::vector<EpochReport> epochs;
};

/// Trains from `resume` (or a fresh state) until config.epochs epochs are complete, or
/// `stop_after` epochs if that is smaller. Stopping early keeps the full schedule, so a later
/// resume continues the same run.
inline TrainingRun run_training(const Corpus& corpus, const TrainConfig& config, const Corpus* eval_corpus = nullptr,
                                std::optional<TrainState> resume = std::nullopt,
                                const std::function<void(const EpochReport&, const TrainState&)>& on_epoch = {},
                                std::optional<std::size_t> stop_after = std::nullopt) {
    TrainingRun run;
    run.state = resume ? std::move(*resume) : init_train_state(corpus.images.dim(), config);
    if (run.state.image_head.in_dim() != corpus.images.dim() || run.state.text_head.in_dim() != corpus.texts.dim())
        throw ParameterError("checkpoint head dimensions do not match the corpus");
    const Corpus* target = eval_corpus ? eval_corpus : (corpus.ground_truth ? &corpus : nullptr);
    if (config.evaluate && target) run.initial = evaluate(*target, run.state, config.eval_direction);
    const std::size_t last = std::min(config.epochs, stop_after.value_or(config.epochs));
    while (run.state.epoch < last) {
        run.epochs.push_back(train_epoch(run.state, corpus, config, eval_corpus));
        if (on_epoch) on_epoch(run.epochs.back(), run.state);
    }
    return run;
}

}  // namespace cpcl
