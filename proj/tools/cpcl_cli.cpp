// cpcl: command-line driver for synthetic corpora, clustering, mining, training,
// evaluation and loss probing.

#include "cpcl/cpcl.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out_dir = ".";
};

cpcl::TrainConfig load_config(const Globals& g) {
    cpcl::TrainConfig c = g.config.empty() ? cpcl::TrainConfig{} : cpcl::train_config_from_json(cpcl::detail::read_json(g.config));
    if (g.seed) c.seed = *g.seed;
    return c;
}

fs::path out_path(const Globals& g, const std::string& name) {
    fs::create_directories(g.out_dir);
    return fs::path(g.out_dir) / name;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw cpcl::IoError("cannot open " + p.string() + " for writing");
    out << s;
}

/// Features for clustering/mining: raw embeddings, or the heads of a checkpoint.
cpcl::EncodedCorpus features_for(const cpcl::Corpus& corpus, const std::string& checkpoint) {
    if (checkpoint.empty()) return {corpus.images, corpus.texts};
    return cpcl::encode(corpus, cpcl::load_checkpoint(checkpoint));
}

void write_labels_tsv(const fs::path& p, const cpcl::PseudoLabeling& v, const cpcl::PseudoLabeling& t) {
    std::ostringstream os;
    os << "modality\tinstance\tlabel\n";
    for (const auto* l : {&v, &t})
        for (std::size_t i = 0; i < l->size(); ++i) os << cpcl::to_string(l->modality) << '\t' << i << '\t' << (*l)[i] << '\n';
    write_text(p, os.str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototypical cross-modal alignment on embedding corpora"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Override the RNG seed");
    app.add_option("--config", g.config, "Training config (JSON)");
    app.add_option("--out-dir", g.out_dir, "Output directory");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a planted-identity corpus");
    synth->fallthrough();
    cpcl::SynthSpec spec;
    std::size_t holdout = 0;
    synth->add_option("--identities", spec.n_identities);
    synth->add_option("--images-per-id", spec.images_per_id);
    synth->add_option("--texts-per-image", spec.texts_per_image);
    synth->add_option("--dim", spec.dim);
    synth->add_option("--noise", spec.intra_id_noise, "Per-component identity noise");
    synth->add_option("--gap", spec.modality_offset_scale, "Per-component modality offset scale");
    synth->add_option("--outlier-fraction", spec.outlier_fraction);
    synth->add_option("--holdout", holdout, "Identities written to <out-dir>/holdout");

    // cluster
    auto* cluster = app.add_subcommand("cluster", "Cluster both modalities and report the labeling");
    cluster->fallthrough();
    std::string corpus_dir, checkpoint;
    bool dump_distances = false, dump_prototypes = false;
    cluster->add_option("--corpus", corpus_dir)->required();
    cluster->add_option("--checkpoint", checkpoint, "Encode through trained heads first");
    cluster->add_flag("--dump-distances", dump_distances, "Write distance matrices as TSV");
    cluster->add_flag("--dump-prototypes", dump_prototypes, "Write initial prototype memories");

    // mine
    auto* mine = app.add_subcommand("mine", "Cluster, then run the refined mining stage");
    mine->fallthrough();
    mine->add_option("--corpus", corpus_dir)->required();
    mine->add_option("--checkpoint", checkpoint);

    // train
    auto* train = app.add_subcommand("train", "Train projection heads");
    train->fallthrough();
    std::string resume, eval_dir;
    train->add_option("--corpus", corpus_dir)->required();
    train->add_option("--resume", resume, "Checkpoint directory to continue from");
    std::optional<std::size_t> stop_after;
    train->add_option("--stop-after", stop_after, "Stop once this many epochs are complete");
    train->add_option("--eval-corpus", eval_dir, "Held-out corpus for per-epoch metrics");

    // eval
    auto* eval = app.add_subcommand("eval", "Retrieval metrics");
    eval->fallthrough();
    std::string direction = "text_to_image";
    bool strict = false;
    eval->add_option("--corpus", corpus_dir)->required();
    eval->add_option("--checkpoint", checkpoint, "Heads to evaluate (raw embeddings if omitted)");
    eval->add_option("--direction", direction)->check(CLI::IsMember({"text_to_image", "image_to_text"}));
    eval->add_flag("--strict", strict, "Fail on queries without a relevant gallery item");

    // loss-probe
    auto* probe = app.add_subcommand("loss-probe", "Evaluate one loss on a saved batch");
    probe->fallthrough();
    std::string batch_file, loss_name, image_mem_file, text_mem_file;
    double tau = 0.07;
    probe->add_option("--batch", batch_file)->required();
    probe->add_option("--loss", loss_name)->required()->check(CLI::IsMember({"pcm_cross", "pcm_single", "icpm", "itc"}));
    probe->add_option("--tau", tau);
    probe->add_option("--image-memory", image_mem_file, "Image prototypes (embedding format)");
    probe->add_option("--text-memory", text_mem_file, "Text prototypes (embedding format)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            if (g.seed) spec.seed = *g.seed;
            const auto [train_c, test_c] = cpcl::synth_corpus_split(spec, holdout);
            cpcl::save_corpus(train_c, g.out_dir);
            if (holdout > 0) cpcl::save_corpus(test_c, fs::path(g.out_dir) / "holdout");
            std::cout << json{{"images", train_c.images.count()}, {"texts", train_c.texts.count()},
                              {"holdout_images", test_c.images.count()}}.dump()
                      << "\n";
        } else if (cluster->parsed() || mine->parsed()) {
            const auto cfg = load_config(g);
            const auto corpus = cpcl::load_corpus(corpus_dir);
            const auto f = features_for(corpus, checkpoint);
            auto lv = cpcl::cluster_modality(f.images, cfg.clustering, cpcl::derive_seed(cfg.seed, 3, 0));
            auto lt = cpcl::cluster_modality(f.texts, cfg.clustering, cpcl::derive_seed(cfg.seed, 3, 1));
            if (cluster->parsed()) {
                const json report{{"image", cpcl::labeling_report(lv)}, {"text", cpcl::labeling_report(lt)}};
                std::cout << report.dump(2) << "\n";
                write_labels_tsv(out_path(g, "labels.tsv"), lv, lt);
                if (dump_distances) {
                    for (const auto* set : {&f.images, &f.texts}) {
                        auto d = cpcl::cosine_distance_matrix(*set);
                        if (cfg.clustering.metric == cpcl::ClusterMetric::Jaccard)
                            d = cpcl::jaccard_distance_matrix(d, cfg.clustering.jaccard);
                        std::ofstream os(out_path(g, std::string(cpcl::to_string(set->modality)) + "_distances.tsv"));
                        cpcl::write_tsv(os, d);
                    }
                }
                if (dump_prototypes) {
                    const auto mv = cpcl::init_memory(f.images, lv, cfg.memory, cfg.seed);
                    const auto mt = cpcl::init_memory(f.texts, lt, cfg.memory, cfg.seed);
                    cpcl::save_embeddings({cpcl::Modality::Image, mv.prototypes}, out_path(g, "image_prototypes.cpcl"));
                    cpcl::save_embeddings({cpcl::Modality::Text, mt.prototypes}, out_path(g, "text_prototypes.cpcl"));
                }
            } else {
                const auto report = cpcl::run_refined_stage({f.images.vectors, f.texts.vectors, corpus.pairs}, lv, lt,
                                                            cfg.mining);
                std::cout << cpcl::to_json(report).dump(2) << "\n";
            }
        } else if (train->parsed()) {
            const auto cfg = load_config(g);
            const auto corpus = cpcl::load_corpus(corpus_dir);
            std::optional<cpcl::Corpus> eval_corpus;
            if (!eval_dir.empty()) eval_corpus = cpcl::load_corpus(eval_dir);
            std::optional<cpcl::TrainState> state;
            if (!resume.empty()) state = cpcl::load_checkpoint(resume);

            const auto reports_path = out_path(g, "reports.jsonl");
            const auto outliers_path = out_path(g, "outliers.tsv");
            std::ofstream reports(reports_path, resume.empty() ? std::ios::trunc : std::ios::app);
            std::ofstream outliers(outliers_path, resume.empty() ? std::ios::trunc : std::ios::app);
            if (!reports || !outliers) throw cpcl::IoError("cannot open report files in " + g.out_dir);
            if (resume.empty()) outliers << "epoch\timage_before\ttext_before\timage_after\ttext_after\n";
            cpcl::detail::write_json(out_path(g, "config.json"), cpcl::to_json(cfg));

            const auto run = cpcl::run_training(
                corpus, cfg, eval_corpus ? &*eval_corpus : nullptr, std::move(state), [&](const cpcl::EpochReport& r, const cpcl::TrainState& st) {
                    const std::string line = cpcl::to_json(r).dump();
                    reports << line << "\n" << std::flush;
                    outliers << r.epoch << '\t' << r.outliers_image_before << '\t' << r.outliers_text_before << '\t'
                             << r.outliers_image_after << '\t' << r.outliers_text_after << "\n" << std::flush;
                    std::cout << line << "\n";
                    cpcl::save_checkpoint(st, out_path(g, "checkpoint"));
                },
                stop_after);
            (void)run;
        } else if (eval->parsed()) {
            const auto corpus = cpcl::load_corpus(corpus_dir);
            const auto f = features_for(corpus, checkpoint);
            const auto dir = direction == "text_to_image" ? cpcl::QueryDirection::TextToImage
                                                          : cpcl::QueryDirection::ImageToText;
            const auto ranking = cpcl::rank_corpus(corpus, f.images.vectors, f.texts.vectors, dir);
            if (strict) (void)cpcl::mean_average_precision(ranking, true);
            std::cout << cpcl::to_json(cpcl::summarize(ranking)).dump(2) << "\n";
            std::ofstream tsv(out_path(g, "per_query.tsv"));
            cpcl::write_per_query_tsv(tsv, ranking);
        } else if (probe->parsed()) {
            const auto batch = cpcl::batch_from_json(cpcl::detail::read_json(batch_file));
            auto memory = [&](const std::string& file, cpcl::Modality m) {
                if (file.empty()) throw cpcl::ParameterError(loss_name + " needs --image-memory and --text-memory");
                cpcl::PrototypeMemory mem;
                mem.prototypes = cpcl::load_embeddings(file, m).vectors;
                mem.temperature = tau;
                mem.modality = m;
                return mem;
            };
            cpcl::LossOutput out;
            if (loss_name == "itc") {
                out = cpcl::itc(batch, tau);
            } else if (loss_name == "icpm") {
                // Items sharing an image cluster or a text cluster match; a pair always matches itself.
                cpcl::MatchMatrix y(batch.size());
                for (std::size_t i = 0; i < batch.size(); ++i)
                    for (std::size_t j = 0; j < batch.size(); ++j)
                        y.set(i, j, i == j || (batch.image_cluster[i] && batch.image_cluster[i] == batch.image_cluster[j]) ||
                                        (batch.text_cluster[i] && batch.text_cluster[i] == batch.text_cluster[j]));
                out = cpcl::icpm(batch, y, tau);
            } else {
                const auto mv = memory(image_mem_file, cpcl::Modality::Image);
                const auto mt = memory(text_mem_file, cpcl::Modality::Text);
                out = loss_name == "pcm_cross" ? cpcl::pcm_cross(batch, mt, mv) : cpcl::pcm_single(batch, mv, mt);
            }
            std::cout << json{{"loss", loss_name},
                              {"value", out.value},
                              {"grad_image_norm", out.grad_image.norm()},
                              {"grad_text_norm", out.grad_text.norm()},
                              {"grad_tau_image", out.grad_tau_image},
                              {"grad_tau_text", out.grad_tau_text},
                              {"grad_tau", out.grad_tau}}
                             .dump(2)
                      << "\n";
        }
    } catch (const cpcl::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
