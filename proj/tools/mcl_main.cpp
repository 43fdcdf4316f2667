// mcl: geodesic-prototype contrastive training and MIL slide classification.
//
// Subcommands compose through files (feature CSVs, checkpoints, bag CSVs) so
// each pipeline stage can run and be inspected on its own.

#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcl/cluster.hpp"
#include "mcl/common.hpp"
#include "mcl/dataio.hpp"
#include "mcl/encoder.hpp"
#include "mcl/graph.hpp"
#include "mcl/losses.hpp"
#include "mcl/mil.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const mcl::ConfigError& e) {
        throw mcl::ConfigError(name + ": " + e.what());
    } catch (const mcl::ParseError& e) {
        throw mcl::ParseError(name + ": " + e.what());
    } catch (const mcl::DataError& e) {
        throw mcl::DataError(name + ": " + e.what());
    } catch (const mcl::IoError& e) {
        throw mcl::IoError(name + ": " + e.what());
    } catch (const mcl::NumericError& e) {
        throw mcl::NumericError(name + ": " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw mcl::IoError("cannot write " + path);
    out << body;
    if (!out) throw mcl::IoError("write failed for " + path);
}

// Options shared by every command that trains the stage-1 encoder.
struct EncoderOpts {
    mcl::TrainConfig cfg;
    std::vector<long> trunk = {64, 64};
    long embed_dim = 32;
    std::string linkage = "average";
    std::string variant = "geodesic";
    std::string proto_mode = "local";
    bool no_clamp = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--lr", cfg.lr, "encoder learning rate")->capture_default_str();
        cmd->add_option("--decay", cfg.lr_decay, "time-based lr decay")
            ->capture_default_str();
        cmd->add_option("--batch", cfg.batch_size, "mini-batch size")
            ->capture_default_str();
        cmd->add_option("--epochs", cfg.epochs, "training epochs")
            ->capture_default_str();
        cmd->add_option("--refresh-every", cfg.refresh_every,
                        "epochs between manifold refreshes")
            ->capture_default_str();
        cmd->add_option("--k", cfg.k, "kNN neighbor count")->capture_default_str();
        cmd->add_option("--n", cfg.n_subclasses, "sub-classes per class")
            ->capture_default_str();
        cmd->add_option("--linkage", linkage, "single|complete|average")
            ->capture_default_str();
        cmd->add_option("--margin", cfg.loss.margin, "inter-class margin")
            ->capture_default_str();
        cmd->add_flag("--no-clamp", no_clamp, "disable the hinge clamp on L_inter");
        cmd->add_option("--tau", cfg.loss.temperature,
                        "temperature for the cosine baseline")
            ->capture_default_str();
        cmd->add_option("--loss", variant, "geodesic|cosine")->capture_default_str();
        cmd->add_option("--proto-mode", proto_mode, "local|global|global+local")
            ->capture_default_str();
        cmd->add_option("--trunk", trunk, "trunk layer widths")->capture_default_str();
        cmd->add_option("--embed-dim", embed_dim, "embedding dimension D'")
            ->capture_default_str();
        cmd->add_option("--seed", cfg.seed, "encoder RNG seed")->capture_default_str();
    }

    mcl::TrainConfig resolve(const mcl::LabeledFeatureSet& data) {
        cfg.linkage = mcl::parse_linkage(linkage);
        cfg.variant = mcl::parse_variant(variant);
        cfg.proto_mode = mcl::parse_prototype_mode(proto_mode);
        cfg.loss.inter_clamp = !no_clamp;
        cfg.dims.input_dim = data.dim();
        cfg.dims.trunk = trunk;
        cfg.dims.embed_dim = embed_dim;
        cfg.dims.n_classes = data.num_classes();
        return cfg;
    }

    void echo(std::ostream& out) const {
        out << "encoder: lr=" << cfg.lr << " decay=" << cfg.lr_decay
            << " batch=" << cfg.batch_size << " epochs=" << cfg.epochs
            << " refresh_every=" << cfg.refresh_every << " k=" << cfg.k
            << " n=" << cfg.n_subclasses << " linkage=" << linkage
            << " margin=" << cfg.loss.margin << " clamp=" << (no_clamp ? "off" : "on")
            << " tau=" << cfg.loss.temperature << " loss=" << variant
            << " proto_mode=" << proto_mode << " embed_dim=" << embed_dim
            << " seed=" << cfg.seed << "\n";
    }
};

struct MilOpts {
    mcl::MilConfig cfg;

    void attach(CLI::App* cmd) {
        cmd->add_option("--bags-per-slide", cfg.bags_per_slide, "bags per slide")
            ->capture_default_str();
        cmd->add_option("--patches-per-bag", cfg.patches_per_bag, "patches per bag")
            ->capture_default_str();
        cmd->add_option("--hidden", cfg.classifier_hidden, "MIL hidden width")
            ->capture_default_str();
        cmd->add_option("--mil-lr", cfg.lr, "MIL learning rate")->capture_default_str();
        cmd->add_option("--mil-decay", cfg.decay, "MIL lr decay")->capture_default_str();
        cmd->add_option("--mil-epochs", cfg.epochs, "MIL training epochs")
            ->capture_default_str();
        cmd->add_option("--mil-batch", cfg.batch_size, "MIL batch size")
            ->capture_default_str();
        cmd->add_option("--mil-seed", cfg.seed, "MIL RNG seed")->capture_default_str();
    }

    void echo(std::ostream& out) const {
        out << "mil: bags_per_slide=" << cfg.bags_per_slide
            << " patches_per_bag=" << cfg.patches_per_bag
            << " hidden=" << cfg.classifier_hidden << " lr=" << cfg.lr
            << " decay=" << cfg.decay << " epochs=" << cfg.epochs
            << " batch=" << cfg.batch_size << " seed=" << cfg.seed << "\n";
    }
};

int run(int argc, char** argv) {
    CLI::App app{"geodesic manifold contrastive learning + MIL slide classification"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate interleaved synthetic manifolds");
    synth->set_config("--config");
    long synth_n = 100, synth_groups = 10, synth_dim = 3;
    double synth_noise = 0.05, synth_turns = 2.0, synth_fraction = 0.7;
    std::uint64_t synth_seed = 0, synth_split_seed = 0;
    std::string synth_out, synth_train_out, synth_test_out;
    synth->add_option("--n", synth_n, "points per class")->capture_default_str();
    synth->add_option("--noise", synth_noise, "Gaussian noise std-dev")
        ->capture_default_str();
    synth->add_option("--turns", synth_turns, "spiral turns")->capture_default_str();
    synth->add_option("--seed", synth_seed, "RNG seed")->capture_default_str();
    synth->add_option("--groups-per-class", synth_groups, "slide groups per class")
        ->capture_default_str();
    synth->add_option("--dim", synth_dim, "output dimension (>=3; >3 lifts by rotation)")
        ->capture_default_str();
    synth->add_option("--out", synth_out, "output feature CSV")->required();
    synth->add_option("--train-out", synth_train_out,
                      "also write a group-level train split here");
    synth->add_option("--test-out", synth_test_out,
                      "also write the matching test split here");
    synth->add_option("--train-fraction", synth_fraction,
                      "train share of groups for --train-out/--test-out")
        ->capture_default_str();
    synth->add_option("--split-seed", synth_split_seed, "group split seed")
        ->capture_default_str();
    synth->callback([&] {
        const auto set = mcl::gen_interleaved_manifolds(
            synth_n, synth_noise, synth_turns, synth_seed, synth_groups, synth_dim);
        mcl::save_feature_table(set, synth_out);
        std::cout << "wrote " << set.size() << " rows to " << synth_out << "\n";
        if (synth_train_out.empty() != synth_test_out.empty())
            throw mcl::ConfigError("--train-out and --test-out go together");
        if (!synth_train_out.empty()) {
            const auto [train, test] =
                mcl::split_by_group(set, synth_fraction, synth_split_seed);
            mcl::save_feature_table(train, synth_train_out);
            mcl::save_feature_table(test, synth_test_out);
            std::cout << "wrote " << train.size() << " train rows, " << test.size()
                      << " test rows\n";
        }
    });

    // graph-dump
    auto* gdump = app.add_subcommand("graph-dump", "dump a kNN graph as u,v,w edges");
    gdump->set_config("--config");
    std::string gd_in, gd_out;
    int gd_k = 5, gd_class = 0;
    bool gd_global = false;
    gdump->add_option("--in", gd_in, "input feature CSV")->required();
    gdump->add_option("--k", gd_k, "neighbor count")->capture_default_str();
    gdump->add_option("--class", gd_class, "class whose graph to build")
        ->capture_default_str();
    gdump->add_flag("--global", gd_global, "build one graph over all classes");
    gdump->add_option("--out", gd_out, "output edge list")->required();
    gdump->callback([&] {
        const auto set = mcl::load_feature_table(gd_in);
        Eigen::MatrixXd feats;
        if (gd_global) {
            feats = set.features;
        } else {
            const auto rows = set.rows_of_class(gd_class);
            if (rows.empty())
                throw mcl::DataError("class " + std::to_string(gd_class) + " is empty");
            feats.resize(static_cast<long>(rows.size()), set.dim());
            for (size_t i = 0; i < rows.size(); ++i)
                feats.row(static_cast<long>(i)) = set.features.row(rows[i]);
        }
        const auto graph = mcl::build_knn_graph(feats, gd_k);
        std::ostringstream body;
        mcl::dump_edge_list(graph, body);
        write_text_file(gd_out, body.str());
        std::cout << "wrote graph of " << graph.node_count << " nodes to " << gd_out
                  << "\n";
    });

    // cluster-dump
    auto* cdump = app.add_subcommand(
        "cluster-dump", "dump geodesic sub-class partition and prototypes");
    cdump->set_config("--config");
    std::string cd_in, cd_out, cd_protos, cd_linkage = "average";
    int cd_k = 5, cd_n = 10;
    cdump->add_option("--in", cd_in, "input feature CSV")->required();
    cdump->add_option("--k", cd_k, "neighbor count")->capture_default_str();
    cdump->add_option("--n", cd_n, "sub-classes per class")->capture_default_str();
    cdump->add_option("--linkage", cd_linkage, "single|complete|average")
        ->capture_default_str();
    cdump->add_option("--out", cd_out, "partition CSV (row_index,class,subclass)")
        ->required();
    cdump->add_option("--protos-out", cd_protos, "prototype CSV (class,subclass,f...)");
    cdump->callback([&] {
        const auto set = mcl::load_feature_table(cd_in);
        const auto state = mcl::refresh_manifold(set, set.features, cd_k, cd_n,
                                                 mcl::parse_linkage(cd_linkage));
        std::ostringstream body;
        mcl::dump_partition(state, body);
        write_text_file(cd_out, body.str());
        if (!cd_protos.empty()) {
            std::ostringstream protos;
            mcl::dump_prototypes(state, protos);
            write_text_file(cd_protos, protos.str());
        }
        std::cout << "wrote partition of " << set.size() << " rows to " << cd_out << "\n";
    });

    // train-encoder
    auto* tenc = app.add_subcommand("train-encoder", "stage-1 encoder training");
    tenc->set_config("--config");
    EncoderOpts te_opts;
    std::string te_in, te_ckpt, te_hist;
    tenc->add_option("--in", te_in, "training feature CSV")->required();
    tenc->add_option("--checkpoint", te_ckpt, "encoder checkpoint output (JSON)")
        ->required();
    tenc->add_option("--history", te_hist, "per-epoch training log CSV");
    te_opts.attach(tenc);
    tenc->callback([&] {
        const auto data =
            stage("load", [&] { return mcl::load_feature_table(te_in); });
        const auto cfg = te_opts.resolve(data);
        te_opts.echo(std::cout);
        auto [model, history] =
            stage("train", [&] { return mcl::train_encoder(data, cfg); });
        mcl::save_encoder(model, te_ckpt);
        if (!te_hist.empty()) {
            std::ostringstream body;
            mcl::write_history_csv(history, body);
            write_text_file(te_hist, body.str());
        }
        std::cout << "wrote checkpoint to " << te_ckpt << "\n";
    });

    // embed
    auto* embed = app.add_subcommand("embed", "extract embeddings with a checkpoint");
    embed->set_config("--config");
    std::string em_in, em_ckpt, em_out;
    embed->add_option("--in", em_in, "input feature CSV")->required();
    embed->add_option("--checkpoint", em_ckpt, "encoder checkpoint")->required();
    embed->add_option("--out", em_out, "output embedding CSV")->required();
    embed->callback([&] {
        const auto set = mcl::load_feature_table(em_in);
        const auto model = mcl::load_encoder(em_ckpt);
        mcl::LabeledFeatureSet out;
        out.features = mcl::extract_embeddings(model, set);
        out.labels = set.labels;
        out.group_ids = set.group_ids;
        mcl::save_feature_table(out, em_out);
        std::cout << "wrote " << out.size() << " embeddings to " << em_out << "\n";
    });

    // bags
    auto* bags = app.add_subcommand("bags", "generate MIL bags from embeddings");
    bags->set_config("--config");
    MilOpts bg_opts;
    std::string bg_in, bg_out;
    bags->add_option("--in", bg_in, "embedding CSV")->required();
    bags->add_option("--out", bg_out, "output bag CSV")->required();
    bg_opts.attach(bags);
    bags->callback([&] {
        const auto set = mcl::load_feature_table(bg_in);
        const auto slides = mcl::group_slides(set);
        std::vector<mcl::MilBag> all;
        for (const auto& s : slides) {
            auto sb = mcl::make_bags(mcl::slide_embeddings(set.features, s), s.id,
                                     s.label, bg_opts.cfg, bg_opts.cfg.seed);
            all.insert(all.end(), sb.begin(), sb.end());
        }
        mcl::save_bags(all, bg_out);
        std::cout << "wrote " << all.size() << " bags (" << slides.size()
                  << " slides) to " << bg_out << "\n";
    });

    // train-mil
    auto* tmil = app.add_subcommand("train-mil", "train the MIL bag classifier");
    tmil->set_config("--config");
    MilOpts tm_opts;
    std::string tm_bags, tm_ckpt;
    tmil->add_option("--bags", tm_bags, "training bag CSV")->required();
    tmil->add_option("--checkpoint", tm_ckpt, "MIL checkpoint output (JSON)")
        ->required();
    tm_opts.attach(tmil);
    tmil->callback([&] {
        const auto data = mcl::load_bags(tm_bags);
        const auto clf =
            stage("train-mil", [&] { return mcl::train_mil(data, tm_opts.cfg); });
        mcl::save_mil_classifier(clf, tm_ckpt);
        std::cout << "wrote MIL checkpoint to " << tm_ckpt << "\n";
    });

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate bag predictions per slide");
    eval->set_config("--config");
    std::string ev_bags, ev_ckpt, ev_preds, ev_metrics;
    eval->add_option("--bags", ev_bags, "bag CSV to evaluate")->required();
    eval->add_option("--checkpoint", ev_ckpt, "MIL checkpoint")->required();
    eval->add_option("--preds-out", ev_preds, "per-slide prediction CSV");
    eval->add_option("--metrics-out", ev_metrics, "metrics CSV");
    eval->callback([&] {
        const auto data = mcl::load_bags(ev_bags);
        const auto clf = mcl::load_mil_classifier(ev_ckpt);
        std::map<std::string, std::vector<mcl::MilBag>> by_slide;
        std::map<std::string, int> truth;
        for (const auto& b : data) {
            by_slide[b.slide_id].push_back(b);
            truth[b.slide_id] = b.label;
        }
        std::vector<mcl::SlidePrediction> preds;
        for (const auto& [id, sb] : by_slide)
            preds.push_back(mcl::predict_slide(clf, sb));
        const auto metrics = mcl::evaluate(preds, truth);
        if (!ev_preds.empty()) {
            std::ostringstream body;
            mcl::write_predictions_csv(preds, truth, body);
            write_text_file(ev_preds, body.str());
        }
        if (!ev_metrics.empty()) {
            mcl::ExperimentReport rep;
            rep.runs = {metrics};
            rep.mean = metrics;
            std::ostringstream body;
            mcl::write_metrics_csv(rep, body);
            write_text_file(ev_metrics, body.str());
        }
        std::cout << "accuracy=" << mcl::format_double(metrics.accuracy)
                  << " precision=" << mcl::format_double(metrics.precision)
                  << " recall=" << mcl::format_double(metrics.recall)
                  << " f1=" << mcl::format_double(metrics.f1) << "\n";
    });

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "end-to-end encoder + MIL experiment");
    pipe->set_config("--config");
    EncoderOpts pl_enc;
    MilOpts pl_mil;
    std::string pl_train, pl_test, pl_metrics, pl_hist;
    int pl_repeats = 1;
    pipe->add_option("--train", pl_train, "training feature CSV")->required();
    pipe->add_option("--test", pl_test, "test feature CSV")->required();
    pipe->add_option("--repeats", pl_repeats, "MIL train/eval repetitions")
        ->capture_default_str();
    pipe->add_option("--metrics-out", pl_metrics, "metrics CSV output")->required();
    pipe->add_option("--history-out", pl_hist, "encoder history CSV output");
    pl_enc.attach(pipe);
    pl_mil.attach(pipe);
    pipe->callback([&] {
        const auto train =
            stage("load-train", [&] { return mcl::load_feature_table(pl_train); });
        const auto test =
            stage("load-test", [&] { return mcl::load_feature_table(pl_test); });
        const auto cfg = pl_enc.resolve(train);
        pl_enc.echo(std::cout);
        pl_mil.echo(std::cout);
        const auto report = stage("pipeline", [&] {
            return mcl::run_experiment(train, test, cfg, pl_mil.cfg, pl_repeats);
        });
        std::ostringstream body;
        mcl::write_metrics_csv(report, body);
        write_text_file(pl_metrics, body.str());
        if (!pl_hist.empty()) {
            std::ostringstream hist;
            mcl::write_history_csv(report.encoder_history, hist);
            write_text_file(pl_hist, hist.str());
        }
        std::cout << "mean accuracy=" << mcl::format_double(report.mean.accuracy)
                  << " over " << report.runs.size() << " runs\n";
    });

    // ablate-prototypes
    auto* ablate = app.add_subcommand(
        "ablate-prototypes", "compare global / local / global+local prototypes");
    ablate->set_config("--config");
    EncoderOpts ab_enc;
    MilOpts ab_mil;
    std::string ab_train, ab_test, ab_metrics;
    int ab_repeats = 1;
    ablate->add_option("--train", ab_train, "training feature CSV")->required();
    ablate->add_option("--test", ab_test, "test feature CSV")->required();
    ablate->add_option("--repeats", ab_repeats, "MIL repetitions per strategy")
        ->capture_default_str();
    ablate->add_option("--metrics-out", ab_metrics, "metrics CSV output")->required();
    ab_enc.attach(ablate);
    ab_mil.attach(ablate);
    ablate->callback([&] {
        const auto train =
            stage("load-train", [&] { return mcl::load_feature_table(ab_train); });
        const auto test =
            stage("load-test", [&] { return mcl::load_feature_table(ab_test); });
        const auto base_cfg = ab_enc.resolve(train);
        ab_enc.echo(std::cout);
        ab_mil.echo(std::cout);

        struct Row {
            const char* name;
            mcl::PrototypeMode mode;
            long per_class;
        };
        const Row rows[] = {
            {"global", mcl::PrototypeMode::global, 1},
            {"local", mcl::PrototypeMode::local, base_cfg.n_subclasses},
            {"global+local", mcl::PrototypeMode::global_plus_local,
             base_cfg.n_subclasses + 1},
        };
        std::ostringstream body;
        body << "strategy,total_prototypes,accuracy,precision,recall,f1\n";
        for (const auto& row : rows) {
            mcl::TrainConfig cfg = base_cfg;
            cfg.proto_mode = row.mode;
            const auto report = stage(row.name, [&] {
                return mcl::run_experiment(train, test, cfg, ab_mil.cfg, ab_repeats);
            });
            body << row.name << "," << row.per_class * train.num_classes() << ","
                 << mcl::format_double(report.mean.accuracy) << ","
                 << mcl::format_double(report.mean.precision) << ","
                 << mcl::format_double(report.mean.recall) << ","
                 << mcl::format_double(report.mean.f1) << "\n";
            std::cout << row.name << ": mean accuracy "
                      << mcl::format_double(report.mean.accuracy) << "\n";
        }
        write_text_file(ab_metrics, body.str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const mcl::ConfigError& e) {
        std::cerr << "mcl: usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const mcl::ParseError& e) {
        std::cerr << "mcl: data error: " << e.what() << "\n";
        return kExitData;
    } catch (const mcl::DataError& e) {
        std::cerr << "mcl: data error: " << e.what() << "\n";
        return kExitData;
    } catch (const mcl::IoError& e) {
        std::cerr << "mcl: io error: " << e.what() << "\n";
        return kExitData;
    } catch (const mcl::NumericError& e) {
        std::cerr << "mcl: numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "mcl: internal error: " << e.what() << "\n";
        return 1;
    }
}
