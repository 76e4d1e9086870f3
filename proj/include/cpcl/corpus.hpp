#pragma once

/// \file corpus.hpp
/// Bimodal embedding corpora: dense embedding sets, the many-to-many image/text
/// pairing relation, optional evaluation-only identity labels, binary/JSON file
/// formats and a seeded synthetic generator.
///
/// Embedding file layout (little-endian):
///   "CPCL" | u32 version (=1) | u32 count | u32 dim | count*dim float32, row-major
///
/// Pair file: {"image_to_texts": {"<image-id>": [text-id, ...], ...}}
/// Truth file: {"images": {"<id>": identity, ...}, "texts": {"<id>": identity, ...}}

#include "cpcl/errors.hpp"
#include "cpcl/types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cpcl {

inline constexpr std::array<char, 4> kEmbeddingMagic{'C', 'P', 'C', 'L'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

/// count x dim matrix of feature vectors; the instance id is the row index.
struct EmbeddingSet {
    Modality modality = Modality::Image;
    Matrix vectors;

    std::size_t count() const noexcept { return static_cast<std::size_t>(vectors.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(vectors.cols()); }

    friend bool operator==(const EmbeddingSet& a, const EmbeddingSet& b) {
        return a.modality == b.modality && a.vectors.rows() == b.vectors.rows() &&
               a.vectors.cols() == b.vectors.cols() && a.vectors == b.vectors;
    }
};

namespace detail {

inline std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file(path, std::vector<char>(text.begin(), text.end()));
}

inline std::size_t parse_id(const std::string& key, const std::string& what) {
    if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw FormatError("invalid " + what + " id '" + key + "'");
    try {
        return static_cast<std::size_t>(std::stoull(key));
    } catch (const std::exception&) {
        throw FormatError("invalid " + what + " id '" + key + "'");
    }
}

}  // namespace detail

/// Serializes with float32 payload. Values that are not float-representable are rounded.
inline std::vector<char> encode_embeddings(const EmbeddingSet& set) {
    std::vector<char> out(16 + set.count() * set.dim() * 4);
    std::size_t pos = 0;
    auto put = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out[pos++] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    };
    for (char ch : kEmbeddingMagic) out[pos++] = ch;
    put(kEmbeddingVersion);
    put(static_cast<std::uint32_t>(set.count()));
    put(static_cast<std::uint32_t>(set.dim()));
    for (Eigen::Index r = 0; r < set.vectors.rows(); ++r)
        for (Eigen::Index c = 0; c < set.vectors.cols(); ++c)
            put(std::bit_cast<std::uint32_t>(static_cast<float>(set.vectors(r, c))));
    return out;
}

inline EmbeddingSet decode_embeddings(const std::vector<char>& bytes, Modality modality = Modality::Image) {
    if (bytes.size() < 16 || !std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin()))
        throw FormatError("missing CPCL magic header");
    const auto version = detail::get_u32(bytes.data() + 4);
    if (version != kEmbeddingVersion) throw FormatError("unsupported embedding version " + std::to_string(version));
    const std::size_t count = detail::get_u32(bytes.data() + 8);
    const std::size_t dim = detail::get_u32(bytes.data() + 12);
    if (count == 0 || dim == 0) throw EmptyCorpusError("embedding file declares count=" + std::to_string(count) +
                                                       " dim=" + std::to_string(dim));
    const std::size_t expected = 16 + count * dim * 4;
    if (bytes.size() != expected)
        throw FormatError("payload size " + std::to_string(bytes.size()) + " does not match header (expected " +
                          std::to_string(expected) + " bytes)");
    EmbeddingSet set{modality, Matrix(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim))};
    const char* p = bytes.data() + 16;
    for (std::size_t r = 0; r < count; ++r)
        for (std::size_t c = 0; c < dim; ++c, p += 4)
            set.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                std::bit_cast<float>(detail::get_u32(p));
    return set;
}

/// Vectors are returned as stored; call normalize() before any similarity computation.
inline EmbeddingSet load_embeddings(const std::filesystem::path& path, Modality modality = Modality::Image) {
    try {
        return decode_embeddings(detail::read_file(path), modality);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const EmptyCorpusError& e) {
        throw EmptyCorpusError(path.string() + ": " + e.what());
    }
}

inline void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
    detail::write_file(path, encode_embeddings(set));
}

inline EmbeddingSet normalize(EmbeddingSet set) {
    for (Eigen::Index r = 0; r < set.vectors.rows(); ++r) {
        const double n = set.vectors.row(r).norm();
        if (!(n > 0.0) || !std::isfinite(n))
            throw DegenerateVectorError(std::string(to_string(set.modality)) + " vector " + std::to_string(r) +
                                        " has zero or non-finite norm");
        set.vectors.row(r) /= n;
    }
    return set;
}

/// Many-to-many image <-> text relation. The two adjacency lists are kept mutually inverse
/// and every instance has at least one partner.
class PairGraph {
public:
    PairGraph() = default;

    /// Builds the graph from the image side; the text side is derived.
    static PairGraph from_image_to_texts(std::vector<std::vector<std::size_t>> image_to_texts, std::size_t n_texts) {
        PairGraph g;
        g.text_to_images_.assign(n_texts, {});
        for (std::size_t i = 0; i < image_to_texts.size(); ++i) {
            if (image_to_texts[i].empty())
                throw ReferentialIntegrityError("image " + std::to_string(i) + " has no paired text");
            for (std::size_t t : image_to_texts[i]) {
                if (t >= n_texts)
                    throw ReferentialIntegrityError("image " + std::to_string(i) + " references unknown text " +
                                                    std::to_string(t));
                auto& back = g.text_to_images_[t];
                if (std::find(back.begin(), back.end(), i) != back.end())
                    throw ReferentialIntegrityError("duplicate pair (" + std::to_string(i) + ", " + std::to_string(t) + ")");
                back.push_back(i);
            }
        }
        for (std::size_t t = 0; t < n_texts; ++t)
            if (g.text_to_images_[t].empty())
                throw ReferentialIntegrityError("text " + std::to_string(t) + " has no paired image");
        g.image_to_texts_ = std::move(image_to_texts);
        return g;
    }

    std::size_t n_images() const noexcept { return image_to_texts_.size(); }
    std::size_t n_texts() const noexcept { return text_to_images_.size(); }

    const std::vector<std::size_t>& texts_of(std::size_t image) const {
        if (image >= image_to_texts_.size()) throw ReferentialIntegrityError("unknown image " + std::to_string(image));
        return image_to_texts_[image];
    }
    const std::vector<std::size_t>& images_of(std::size_t text) const {
        if (text >= text_to_images_.size()) throw ReferentialIntegrityError("unknown text " + std::to_string(text));
        return text_to_images_[text];
    }
    /// Partners of an instance in the other modality.
    const std::vector<std::size_t>& partners(Modality m, std::size_t id) const {
        return m == Modality::Image ? texts_of(id) : images_of(id);
    }

    const std::vector<std::vector<std::size_t>>& image_to_texts() const noexcept { return image_to_texts_; }
    const std::vector<std::vector<std::size_t>>& text_to_images() const noexcept { return text_to_images_; }

    /// All (image, text) pairs ordered by image id, then by the image's list order.
    std::vector<std::pair<std::size_t, std::size_t>> all_pairs() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t i = 0; i < image_to_texts_.size(); ++i)
            for (std::size_t t : image_to_texts_[i]) out.emplace_back(i, t);
        return out;
    }

    std::size_t pair_count() const noexcept {
        std::size_t n = 0;
        for (const auto& l : image_to_texts_) n += l.size();
        return n;
    }

    bool operator==(const PairGraph&) const = default;

private:
    std::vector<std::vector<std::size_t>> image_to_texts_;
    std::vector<std::vector<std::size_t>> text_to_images_;
};

inline nlohmann::json pairs_to_json(const PairGraph& g) {
    nlohmann::json m = nlohmann::json::object();
    for (std::size_t i = 0; i < g.n_images(); ++i) m[std::to_string(i)] = g.texts_of(i);
    return {{"image_to_texts", m}};
}

inline PairGraph pairs_from_json(const nlohmann::json& j, std::size_t n_images, std::size_t n_texts) {
    if (!j.is_object() || !j.contains("image_to_texts") || !j["image_to_texts"].is_object())
        throw FormatError("pair file must contain an 'image_to_texts' object");
    std::vector<std::vector<std::size_t>> lists(n_images);
    for (const auto& [key, value] : j["image_to_texts"].items()) {
        const std::size_t id = detail::parse_id(key, "image");
        if (id >= n_images) throw ReferentialIntegrityError("pair file references unknown image " + key);
        if (!value.is_array()) throw FormatError("pair list for image " + key + " is not an array");
        for (const auto& t : value) {
            if (!t.is_number_integer() || t.get<std::int64_t>() < 0)
                throw FormatError("non-integer text id in pair list for image " + key);
            lists[id].push_back(t.get<std::size_t>());
        }
    }
    return PairGraph::from_image_to_texts(std::move(lists), n_texts);
}

inline void save_pairs(const PairGraph& g, const std::filesystem::path& path) {
    detail::write_json(path, pairs_to_json(g));
}

inline PairGraph load_pairs(const std::filesystem::path& path, std::size_t n_images, std::size_t n_texts) {
    const auto j = detail::read_json(path);
    try {
        return pairs_from_json(j, n_images, n_texts);
    } catch (const ReferentialIntegrityError& e) {
        throw ReferentialIntegrityError(path.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Identity labels per instance. Read only by evaluation code.
struct GroundTruth {
    std::vector<std::int64_t> images;
    std::vector<std::int64_t> texts;

    const std::vector<std::int64_t>& of(Modality m) const { return m == Modality::Image ? images : texts; }
    bool operator==(const GroundTruth&) const = default;
};

inline void save_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
    nlohmann::json images = nlohmann::json::object(), texts = nlohmann::json::object();
    for (std::size_t i = 0; i < gt.images.size(); ++i) images[std::to_string(i)] = gt.images[i];
    for (std::size_t i = 0; i < gt.texts.size(); ++i) texts[std::to_string(i)] = gt.texts[i];
    detail::write_json(path, {{"images", images}, {"texts", texts}});
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path, std::size_t n_images, std::size_t n_texts) {
    const auto j = detail::read_json(path);
    auto read_side = [&](const char* name, std::size_t n) {
        if (!j.contains(name) || !j[name].is_object()) throw FormatError(path.string() + ": missing '" + name + "'");
        std::vector<std::int64_t> out(n, 0);
        std::vector<bool> seen(n, false);
        for (const auto& [key, value] : j[name].items()) {
            const std::size_t id = detail::parse_id(key, name);
            if (id >= n) throw ReferentialIntegrityError(path.string() + ": unknown id " + key + " in '" + name + "'");
            if (!value.is_number_integer()) throw FormatError(path.string() + ": identity must be an integer");
            out[id] = value.get<std::int64_t>();
            seen[id] = true;
        }
        for (std::size_t i = 0; i < n; ++i)
            if (!seen[i])
                throw ReferentialIntegrityError(path.string() + ": no identity for " + name + " " + std::to_string(i));
        return out;
    };
    return {read_side("images", n_images), read_side("texts", n_texts)};
}

struct Corpus {
    EmbeddingSet images{Modality::Image, {}};
    EmbeddingSet texts{Modality::Text, {}};
    PairGraph pairs;
    std::optional<GroundTruth> ground_truth;

    const EmbeddingSet& set(Modality m) const { return m == Modality::Image ? images : texts; }
};

inline constexpr const char* kImagesFile = "images.cpcl";
inline constexpr const char* kTextsFile = "texts.cpcl";
inline constexpr const char* kPairsFile = "pairs.json";
inline constexpr const char* kTruthFile = "truth.json";

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_embeddings(corpus.images, dir / kImagesFile);
    save_embeddings(corpus.texts, dir / kTextsFile);
    save_pairs(corpus.pairs, dir / kPairsFile);
    if (corpus.ground_truth) save_ground_truth(*corpus.ground_truth, dir / kTruthFile);
}

/// Loads a corpus directory and applies the mandatory normalization pass.
inline Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus c;
    c.images = normalize(load_embeddings(dir / kImagesFile, Modality::Image));
    c.texts = normalize(load_embeddings(dir / kTextsFile, Modality::Text));
    if (c.images.dim() != c.texts.dim())
        throw FormatError(dir.string() + ": image dim " + std::to_string(c.images.dim()) + " != text dim " +
                          std::to_string(c.texts.dim()));
    c.pairs = load_pairs(dir / kPairsFile, c.images.count(), c.texts.count());
    if (std::filesystem::exists(dir / kTruthFile))
        c.ground_truth = load_ground_truth(dir / kTruthFile, c.images.count(), c.texts.count());
    return c;
}

/// Parameters of the synthetic generator. Noise scales are per-component standard deviations.
struct SynthSpec {
    std::size_t n_identities = 10;
    std::size_t images_per_id = 2;
    std::size_t texts_per_image = 2;
    std::size_t dim = 32;
    double intra_id_noise = 0.05;
    double modality_offset_scale = 0.0;
    double outlier_fraction = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_identities < 1 || images_per_id < 1 || texts_per_image < 1 || dim < 1)
            throw ParameterError("synth: all counts must be >= 1");
        if (!(intra_id_noise >= 0.0) || !(modality_offset_scale >= 0.0))
            throw ParameterError("synth: noise scales must be >= 0");
        if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0))
            throw ParameterError("synth: outlier_fraction must lie in [0, 1)");
    }
};

namespace detail {

inline void quantize_to_float(Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

}  // namespace detail

/// Planted-identity corpus. Identity `id` owns images [id*ipi, (id+1)*ipi); image `i` owns
/// texts [i*tpi, (i+1)*tpi). A floor(outlier_fraction * n) subset of identities gets 3x noise.
/// Output values are float32-representable so that save/load round-trips bit-exactly.
inline Corpus synth_corpus(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto D = static_cast<Eigen::Index>(spec.dim);

    auto draw = [&](double scale) {
        RowVector v(D);
        for (Eigen::Index k = 0; k < D; ++k) v[k] = scale * gauss(rng);
        return v;
    };

    const RowVector image_offset = draw(spec.modality_offset_scale);
    const RowVector text_offset = draw(spec.modality_offset_scale);

    std::vector<std::size_t> order(spec.n_identities);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_noisy = static_cast<std::size_t>(std::floor(spec.outlier_fraction * static_cast<double>(spec.n_identities)));
    std::vector<bool> noisy(spec.n_identities, false);
    for (std::size_t i = 0; i < n_noisy; ++i) noisy[order[i]] = true;

    const std::size_t n_images = spec.n_identities * spec.images_per_id;
    const std::size_t n_texts = n_images * spec.texts_per_image;
    Corpus c;
    c.images = {Modality::Image, Matrix(static_cast<Eigen::Index>(n_images), D)};
    c.texts = {Modality::Text, Matrix(static_cast<Eigen::Index>(n_texts), D)};
    GroundTruth gt{std::vector<std::int64_t>(n_images), std::vector<std::int64_t>(n_texts)};
    std::vector<std::vector<std::size_t>> image_to_texts(n_images);

    for (std::size_t id = 0; id < spec.n_identities; ++id) {
        RowVector center = draw(1.0);
        center /= center.norm();
        const double sigma = noisy[id] ? 3.0 * spec.intra_id_noise : spec.intra_id_noise;
        for (std::size_t a = 0; a < spec.images_per_id; ++a) {
            const std::size_t img = id * spec.images_per_id + a;
            c.images.vectors.row(static_cast<Eigen::Index>(img)) = center + image_offset + draw(sigma);
            gt.images[img] = static_cast<std::int64_t>(id);
            for (std::size_t b = 0; b < spec.texts_per_image; ++b) {
                const std::size_t txt = img * spec.texts_per_image + b;
                c.texts.vectors.row(static_cast<Eigen::Index>(txt)) = center + text_offset + draw(sigma);
                gt.texts[txt] = static_cast<std::int64_t>(id);
                image_to_texts[img].push_back(txt);
            }
        }
    }
    c.images = normalize(std::move(c.images));
    c.texts = normalize(std::move(c.texts));
    detail::quantize_to_float(c.images.vectors);
    detail::quantize_to_float(c.texts.vectors);
    c.pairs = PairGraph::from_image_to_texts(std::move(image_to_texts), n_texts);
    c.ground_truth = std::move(gt);
    return c;
}

/// Keeps the images whose ids are listed (in that order) together with all their texts.
/// Image ids and text ids are re-numbered densely in the output.
inline Corpus subset_by_images(const Corpus& c, const std::vector<std::size_t>& image_ids) {
    Corpus out;
    std::vector<std::size_t> text_ids;
    std::vector<std::vector<std::size_t>> lists;
    std::vector<std::ptrdiff_t> text_map(c.texts.count(), -1);
    for (std::size_t img : image_ids) {
        std::vector<std::size_t> l;
        for (std::size_t t : c.pairs.texts_of(img)) {
            if (text_map[t] < 0) {
                text_map[t] = static_cast<std::ptrdiff_t>(text_ids.size());
                text_ids.push_back(t);
            }
            l.push_back(static_cast<std::size_t>(text_map[t]));
        }
        lists.push_back(std::move(l));
    }
    out.images = {Modality::Image, Matrix(static_cast<Eigen::Index>(image_ids.size()), c.images.vectors.cols())};
    out.texts = {Modality::Text, Matrix(static_cast<Eigen::Index>(text_ids.size()), c.texts.vectors.cols())};
    for (std::size_t i = 0; i < image_ids.size(); ++i)
        out.images.vectors.row(static_cast<Eigen::Index>(i)) = c.images.vectors.row(static_cast<Eigen::Index>(image_ids[i]));
    for (std::size_t i = 0; i < text_ids.size(); ++i)
        out.texts.vectors.row(static_cast<Eigen::Index>(i)) = c.texts.vectors.row(static_cast<Eigen::Index>(text_ids[i]));
    // Texts paired to dropped images would break complete pairing; only whole components are kept.
    std::vector<bool> kept(c.images.count(), false);
    for (std::size_t img : image_ids) kept[img] = true;
    for (std::size_t i = 0; i < text_ids.size(); ++i)
        for (std::size_t img : c.pairs.images_of(text_ids[i]))
            if (!kept[img])
                throw ReferentialIntegrityError("subset splits the pairing component of text " + std::to_string(text_ids[i]));
    out.pairs = PairGraph::from_image_to_texts(std::move(lists), text_ids.size());
    if (c.ground_truth) {
        GroundTruth gt;
        for (std::size_t img : image_ids) gt.images.push_back(c.ground_truth->images[img]);
        for (std::size_t t : text_ids) gt.texts.push_back(c.ground_truth->texts[t]);
        out.ground_truth = std::move(gt);
    }
    return out;
}

/// Generates n_identities + n_holdout identities in one draw (shared modality offsets) and
/// splits off the last n_holdout identities as an evaluation corpus.
inline std::pair<Corpus, Corpus> synth_corpus_split(const SynthSpec& spec, std::size_t n_holdout) {
    SynthSpec full = spec;
    full.n_identities += n_holdout;
    const Corpus all = synth_corpus(full);
    if (n_holdout == 0) return {all, Corpus{}};
    std::vector<std::size_t> train_ids, test_ids;
    for (std::size_t i = 0; i < all.images.count(); ++i)
        (i < spec.n_identities * spec.images_per_id ? train_ids : test_ids).push_back(i);
    return {subset_by_images(all, train_ids), subset_by_images(all, test_ids)};
}

}  // namespace cpcl
