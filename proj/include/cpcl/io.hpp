#pragma once

/// \file io.hpp
/// JSON forms of configs and reports, batch files for loss probing, and training checkpoints.
///
/// Checkpoint directory layout:
///   <name>.cpcl   one file per head tensor, embedding format (float32, for inspection)
///   state.bin     exact training state ("CPST"): doubles for every tensor, Adam moments,
///                 step/epoch counters, temperatures and seed. Resume reads only this file.

#include "cpcl/clustering.hpp"
#include "cpcl/corpus.hpp"
#include "cpcl/errors.hpp"
#include "cpcl/hcm.hpp"
#include "cpcl/metrics.hpp"
#include "cpcl/oplm.hpp"
#include "cpcl/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace cpcl {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw FormatError(where + ": unknown key '" + k + "'");
}

template <class E>
E parse_enum(const nlohmann::json& j, const std::map<std::string, E>& names, const std::string& where) {
    const auto s = j.get<std::string>();
    const auto it = names.find(s);
    if (it == names.end()) throw FormatError(where + ": unknown value '" + s + "'");
    return it->second;
}

template <class E>
std::string enum_name(E e, const std::map<std::string, E>& names) {
    for (const auto& [k, v] : names)
        if (v == e) return k;
    return "?";
}

inline const std::map<std::string, ClusterBackend> kBackendNames{{"dbscan", ClusterBackend::Dbscan},
                                                                 {"kmeans", ClusterBackend::KMeans}};
inline const std::map<std::string, ClusterMetric> kMetricNames{{"jaccard", ClusterMetric::Jaccard},
                                                               {"cosine", ClusterMetric::Cosine}};
inline const std::map<std::string, PcmVariant> kPcmNames{{"cross", PcmVariant::Cross}, {"single", PcmVariant::Single}};
inline const std::map<std::string, MemoryInit> kInitNames{{"average", MemoryInit::Average}, {"random", MemoryInit::Random}};
inline const std::map<std::string, NeighborMode> kNeighborNames{{"cluster_mates", NeighborMode::ClusterMates},
                                                                {"feature_knn", NeighborMode::FeatureKnn}};
inline const std::map<std::string, QueryDirection> kDirectionNames{{"text_to_image", QueryDirection::TextToImage},
                                                                   {"image_to_text", QueryDirection::ImageToText}};

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const ClusterConfig& c) {
    return {{"backend", detail::enum_name(c.backend, detail::kBackendNames)},
            {"metric", detail::enum_name(c.metric, detail::kMetricNames)},
            {"k1", c.jaccard.k1},
            {"k2", c.jaccard.k2},
            {"expansion", c.jaccard.expansion},
            {"query_expansion", c.jaccard.query_expansion},
            {"eps_image", c.eps_image},
            {"min_pts_image", c.min_pts_image},
            {"eps_text", c.eps_text},
            {"min_pts_text", c.min_pts_text},
            {"kmeans_k_image", c.kmeans_k_image},
            {"kmeans_k_text", c.kmeans_k_text},
            {"kmeans_iters", c.kmeans_iters}};
}

inline ClusterConfig cluster_config_from_json(const nlohmann::json& j, ClusterConfig c = {}) {
    detail::reject_unknown(j,
                           {"backend", "metric", "k1", "k2", "expansion", "query_expansion", "eps_image", "min_pts_image",
                            "eps_text", "min_pts_text", "kmeans_k_image", "kmeans_k_text", "kmeans_iters"},
                           "clustering");
    if (j.contains("backend")) c.backend = detail::parse_enum(j["backend"], detail::kBackendNames, "clustering.backend");
    if (j.contains("metric")) c.metric = detail::parse_enum(j["metric"], detail::kMetricNames, "clustering.metric");
    detail::read_opt(j, "k1", c.jaccard.k1);
    detail::read_opt(j, "k2", c.jaccard.k2);
    detail::read_opt(j, "expansion", c.jaccard.expansion);
    detail::read_opt(j, "query_expansion", c.jaccard.query_expansion);
    detail::read_opt(j, "eps_image", c.eps_image);
    detail::read_opt(j, "min_pts_image", c.min_pts_image);
    detail::read_opt(j, "eps_text", c.eps_text);
    detail::read_opt(j, "min_pts_text", c.min_pts_text);
    detail::read_opt(j, "kmeans_k_image", c.kmeans_k_image);
    detail::read_opt(j, "kmeans_k_text", c.kmeans_k_text);
    detail::read_opt(j, "kmeans_iters", c.kmeans_iters);
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"warmup_epochs", c.warmup_epochs},
            {"lr", c.lr},
            {"lr_floor", c.lr_floor},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"grad_clip", c.grad_clip},
            {"head_out_dim", c.head_out_dim},
            {"head_hidden", c.head_hidden},
            {"memory",
             {{"momentum", c.memory.momentum},
              {"temperature", c.memory.temperature},
              {"renormalize", c.memory.renormalize},
              {"init", detail::enum_name(c.memory.init, detail::kInitNames)},
              {"update", c.update_memory}}},
            {"learnable_temperature", c.learnable_temperature},
            {"temperature_min", c.temperature_min},
            {"temperature_max", c.temperature_max},
            {"clustering", to_json(c.clustering)},
            {"loss",
             {{"pcm", c.loss.use_pcm},
              {"icpm", c.loss.use_icpm},
              {"itc", c.use_itc},
              {"pcm_variant", detail::enum_name(c.loss.pcm_variant, detail::kPcmNames)},
              {"icpm_temperature", c.loss.icpm_temperature},
              {"icpm_epsilon", c.loss.icpm_epsilon},
              {"itc_temperature", c.itc_temperature}}},
            {"oplm",
             {{"refined", c.oplm_refined},
              {"supplementary", c.oplm_supplementary},
              {"neighbor_mode", detail::enum_name(c.mining.neighbor_mode, detail::kNeighborNames)},
              {"knn", c.mining.knn},
              {"deferred", c.mining.deferred},
              {"image_first", c.mining.image_first}}},
            {"evaluate", c.evaluate},
            {"eval_direction", detail::enum_name(c.eval_direction, detail::kDirectionNames)},
            {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        detail::reject_unknown(j,
                               {"batch_size", "epochs", "warmup_epochs", "lr", "lr_floor", "adam_beta1", "adam_beta2",
                                "adam_epsilon", "grad_clip", "head_out_dim", "head_hidden", "memory",
                                "learnable_temperature", "temperature_min", "temperature_max", "clustering", "loss", "oplm",
                                "evaluate", "eval_direction", "seed"},
                               "config");
        detail::read_opt(j, "batch_size", c.batch_size);
        detail::read_opt(j, "epochs", c.epochs);
        detail::read_opt(j, "warmup_epochs", c.warmup_epochs);
        detail::read_opt(j, "lr", c.lr);
        detail::read_opt(j, "lr_floor", c.lr_floor);
        detail::read_opt(j, "adam_beta1", c.adam_beta1);
        detail::read_opt(j, "adam_beta2", c.adam_beta2);
        detail::read_opt(j, "adam_epsilon", c.adam_epsilon);
        detail::read_opt(j, "grad_clip", c.grad_clip);
        detail::read_opt(j, "head_out_dim", c.head_out_dim);
        detail::read_opt(j, "head_hidden", c.head_hidden);
        detail::read_opt(j, "learnable_temperature", c.learnable_temperature);
        detail::read_opt(j, "temperature_min", c.temperature_min);
        detail::read_opt(j, "temperature_max", c.temperature_max);
        detail::read_opt(j, "evaluate", c.evaluate);
        detail::read_opt(j, "seed", c.seed);
        if (j.contains("eval_direction"))
            c.eval_direction = detail::parse_enum(j["eval_direction"], detail::kDirectionNames, "eval_direction");
        if (j.contains("memory")) {
            const auto& m = j["memory"];
            detail::reject_unknown(m, {"momentum", "temperature", "renormalize", "init", "update"}, "memory");
            detail::read_opt(m, "momentum", c.memory.momentum);
            detail::read_opt(m, "temperature", c.memory.temperature);
            detail::read_opt(m, "renormalize", c.memory.renormalize);
            detail::read_opt(m, "update", c.update_memory);
            if (m.contains("init")) c.memory.init = detail::parse_enum(m["init"], detail::kInitNames, "memory.init");
        }
        if (j.contains("clustering")) c.clustering = cluster_config_from_json(j["clustering"]);
        if (j.contains("loss")) {
            const auto& l = j["loss"];
            detail::reject_unknown(
                l, {"pcm", "icpm", "itc", "pcm_variant", "icpm_temperature", "icpm_epsilon", "itc_temperature"}, "loss");
            detail::read_opt(l, "pcm", c.loss.use_pcm);
            detail::read_opt(l, "icpm", c.loss.use_icpm);
            detail::read_opt(l, "itc", c.use_itc);
            detail::read_opt(l, "icpm_temperature", c.loss.icpm_temperature);
            detail::read_opt(l, "icpm_epsilon", c.loss.icpm_epsilon);
            detail::read_opt(l, "itc_temperature", c.itc_temperature);
            if (l.contains("pcm_variant"))
                c.loss.pcm_variant = detail::parse_enum(l["pcm_variant"], detail::kPcmNames, "loss.pcm_variant");
        }
        if (j.contains("oplm")) {
            const auto& o = j["oplm"];
            detail::reject_unknown(o, {"refined", "supplementary", "neighbor_mode", "knn", "deferred", "image_first"}, "oplm");
            detail::read_opt(o, "refined", c.oplm_refined);
            detail::read_opt(o, "supplementary", c.oplm_supplementary);
            detail::read_opt(o, "knn", c.mining.knn);
            detail::read_opt(o, "deferred", c.mining.deferred);
            detail::read_opt(o, "image_first", c.mining.image_first);
            if (o.contains("neighbor_mode"))
                c.mining.neighbor_mode = detail::parse_enum(o["neighbor_mode"], detail::kNeighborNames, "oplm.neighbor_mode");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    if (c.batch_size < 2) throw ParameterError("config: batch_size must be >= 2");
    if (c.epochs < 1) throw ParameterError("config: epochs must be >= 1");
    if (!(c.lr > 0.0)) throw ParameterError("config: lr must be > 0");
    if (!(c.temperature_min > 0.0) || c.temperature_min > c.temperature_max)
        throw ParameterError("config: need 0 < temperature_min <= temperature_max");
    return c;
}

inline nlohmann::json to_json(const MetricsReport& m) {
    return {{"r1", m.r1}, {"r5", m.r5}, {"r10", m.r10}, {"map", m.map}, {"minp", m.minp},
            {"queries", m.queries}, {"gallery", m.gallery}};
}

inline nlohmann::json to_json(const EpochReport& r) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"lr", r.lr_last},
                     {"loss",
                      {{"overall", r.loss_overall}, {"pcm", r.loss_pcm}, {"icpm", r.loss_icpm}, {"itc", r.loss_itc}}},
                     {"batches", {{"mined", r.mined_batches}, {"supplementary", r.supplementary_batches}}},
                     {"pairs", {{"mined", r.mined_pairs}, {"supplementary", r.supplementary_pairs}}},
                     {"n_clusters", {{"image", r.clusters_image}, {"text", r.clusters_text}}},
                     {"outliers_before", {{"image", r.outliers_image_before}, {"text", r.outliers_text_before}}},
                     {"outliers_after", {{"image", r.outliers_image_after}, {"text", r.outliers_text_after}}},
                     {"tau", {{"image", r.tau_image}, {"text", r.tau_text}}}};
    j["metrics"] = r.metrics ? to_json(*r.metrics) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json labeling_report(const PseudoLabeling& l) {
    std::map<std::size_t, std::size_t> histogram;
    for (std::size_t s : l.cluster_sizes()) ++histogram[s];
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [size, count] : histogram) h[std::to_string(size)] = count;
    return {{"n_clusters", l.n_clusters}, {"outliers", l.outlier_count()}, {"instances", l.size()},
            {"cluster_size_histogram", h}};
}

inline nlohmann::json to_json(const MiningReport& r) {
    nlohmann::json assigned = nlohmann::json::array();
    for (const auto& a : r.assigned)
        assigned.push_back({{"modality", to_string(a.modality)}, {"instance", a.instance}, {"cluster", a.cluster}});
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : r.excluded_trace)
        trace.push_back({{"modality", to_string(t.modality)}, {"instance", t.instance}, {"excluded", t.rejected}});
    return {{"initial_outliers", {{"image", r.initial_outliers_v}, {"text", r.initial_outliers_t}}},
            {"remaining_outliers", {{"image", r.remaining_outliers_v}, {"text", r.remaining_outliers_t}}},
            {"assigned_count", {{"image", r.assigned_count(Modality::Image)}, {"text", r.assigned_count(Modality::Text)}}},
            {"assigned", assigned},
            {"excluded_trace", trace}};
}

/// Batch file for loss probing:
/// {"image_features": [[..]], "text_features": [[..]], "image_ids": [..], "text_ids": [..],
///  "image_cluster": [id|null], "text_cluster": [id|null]}. Ids and clusters are optional.
inline Batch batch_from_json(const nlohmann::json& j) {
    auto matrix = [&](const char* key) {
        const auto& rows = j.at(key);
        if (!rows.is_array() || rows.empty()) throw FormatError(std::string("batch: '") + key + "' must be a non-empty array");
        const std::size_t d = rows.at(0).size();
        Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != d) throw FormatError(std::string("batch: ragged rows in '") + key + "'");
            for (std::size_t k = 0; k < d; ++k)
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k].get<double>();
        }
        return m;
    };
    try {
        Batch b;
        b.image_features = matrix("image_features");
        b.text_features = matrix("text_features");
        if (b.image_features.rows() != b.text_features.rows() || b.image_features.cols() != b.text_features.cols())
            throw FormatError("batch: image and text feature matrices differ in shape");
        const std::size_t n = b.size();
        auto ids = [&](const char* key) {
            std::vector<std::size_t> out(n);
            if (j.contains(key)) out = j[key].get<std::vector<std::size_t>>();
            else std::iota(out.begin(), out.end(), std::size_t{0});
            if (out.size() != n) throw FormatError(std::string("batch: '") + key + "' length mismatch");
            return out;
        };
        auto clusters = [&](const char* key) {
            std::vector<std::optional<std::size_t>> out(n);
            if (!j.contains(key)) return out;
            const auto& a = j[key];
            if (a.size() != n) throw FormatError(std::string("batch: '") + key + "' length mismatch");
            for (std::size_t i = 0; i < n; ++i)
                if (!a[i].is_null()) out[i] = a[i].get<std::size_t>();
            return out;
        };
        b.image_ids = ids("image_ids");
        b.text_ids = ids("text_ids");
        b.image_cluster = clusters("image_cluster");
        b.text_cluster = clusters("text_cluster");
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("batch: ") + e.what());
    }
}

inline nlohmann::json batch_to_json(const Batch& b) {
    auto rows = [](const Matrix& m) {
        nlohmann::json a = nlohmann::json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            std::vector<double> r(m.row(i).data(), m.row(i).data() + m.cols());
            a.push_back(r);
        }
        return a;
    };
    auto clusters = [](const std::vector<std::optional<std::size_t>>& c) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& x : c) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
        return a;
    };
    return {{"image_features", rows(b.image_features)}, {"text_features", rows(b.text_features)},
            {"image_ids", b.image_ids}, {"text_ids", b.text_ids},
            {"image_cluster", clusters(b.image_cluster)}, {"text_cluster", clusters(b.text_cluster)}};
}

// ---- checkpoints ----

inline constexpr std::array<char, 4> kStateMagic{'C', 'P', 'S', 'T'};
inline constexpr std::uint32_t kStateVersion = 1;

namespace detail {

class BlobWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void matrix(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
    }
    std::vector<char> bytes;
};

class BlobReader {
public:
    explicit BlobReader(const std::vector<char>& b) : bytes_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("checkpoint state is truncated");
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = u64();
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    Matrix matrix() {
        const auto r = u64(), c = u64();
        if (r > (1u << 24) || c > (1u << 24)) throw FormatError("checkpoint tensor shape is implausible");
        need(r * c * 8);
        Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
        return m;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::vector<char>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_state(const TrainState& s) {
    detail::BlobWriter w;
    w.raw(kStateMagic.data(), 4);
    w.u64(kStateVersion);
    w.u64(s.epoch);
    w.u64(s.seed);
    w.f64(s.tau_image);
    w.f64(s.tau_text);
    w.f64(s.adam.beta1);
    w.f64(s.adam.beta2);
    w.f64(s.adam.epsilon);
    w.u64(s.adam.step);
    for (const auto* head : {&s.image_head, &s.text_head}) {
        w.u64(head->tensors().size());
        for (const auto& t : head->tensors()) {
            w.str(t.name);
            w.matrix(t.value);
        }
    }
    w.u64(s.adam.first.size());
    for (std::size_t i = 0; i < s.adam.first.size(); ++i) {
        w.matrix(s.adam.first[i]);
        w.matrix(s.adam.second[i]);
    }
    return w.bytes;
}

inline TrainState decode_state(const std::vector<char>& bytes) {
    if (bytes.size() < 12 || !std::equal(kStateMagic.begin(), kStateMagic.end(), bytes.begin()))
        throw FormatError("checkpoint state: bad magic");
    const std::vector<char> rest(bytes.begin() + 4, bytes.end());
    detail::BlobReader in(rest);
    if (in.u64() != kStateVersion) throw FormatError("checkpoint state: unsupported version");
    TrainState s;
    s.epoch = in.u64();
    s.seed = in.u64();
    s.tau_image = in.f64();
    s.tau_text = in.f64();
    s.adam.beta1 = in.f64();
    s.adam.beta2 = in.f64();
    s.adam.epsilon = in.f64();
    s.adam.step = in.u64();
    for (auto* head : {&s.image_head, &s.text_head}) {
        const auto n = in.u64();
        if (n != 2 && n != 4) throw FormatError("checkpoint state: a head must have 2 or 4 tensors");
        for (std::uint64_t i = 0; i < n; ++i) {
            NamedTensor t;
            t.name = in.str();
            t.value = in.matrix();
            head->tensors().push_back(std::move(t));
        }
    }
    const auto moments = in.u64();
    for (std::uint64_t i = 0; i < moments; ++i) {
        s.adam.first.push_back(in.matrix());
        s.adam.second.push_back(in.matrix());
    }
    if (!in.done()) throw FormatError("checkpoint state: trailing bytes");
    return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto* head : {&s.image_head, &s.text_head})
        for (const auto& t : head->tensors()) {
            EmbeddingSet e{Modality::Image, t.value.cast<float>().cast<double>()};
            save_embeddings(e, dir / (t.name + ".cpcl"));
        }
    detail::write_file(dir / "state.bin", encode_state(s));
}

inline TrainState load_checkpoint(const std::filesystem::path& dir) {
    try {
        return decode_state(detail::read_file(dir / "state.bin"));
    } catch (const FormatError& e) {
        throw FormatError((dir / "state.bin").string() + ": " + e.what());
    }
}

}  // namespace cpcl
