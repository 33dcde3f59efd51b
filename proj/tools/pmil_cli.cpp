// Single-binary CLI over the three-stage pipeline. Subcommands mirror the
// pipeline stages; every checkpoint-producing run writes its resolved
// configuration next to the output file.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pmil/pipeline.hpp"
#include "pmil/synthdata.hpp"

using namespace pmil;
namespace fs = std::filesystem;

namespace {

Corpus load_corpus(const std::string& dir) { return read_corpus(dir); }

BackboneConfig backbone_for(const Corpus& corpus, const std::string& preset) {
    BackboneConfig bb = BackboneConfig::preset(preset);
    bb.height = corpus.spec.height;
    bb.width = corpus.spec.width;
    return bb;
}

void write_resolved_config(CLI::App* sub, const fs::path& out) {
    std::ofstream f(out.string() + ".config");
    if (!f) throw FormatError("cannot write resolved config: " + out.string() + ".config");
    f << sub->config_to_str(true, false);
}

void add_config_flag(CLI::App* sub) {
    sub->set_config("--config", "", "Read options from a key = value file");
    sub->allow_config_extras(false);
}

void print_record(const MetricsRecord& rec) {
    std::cout << metrics_csv_header() << "\n" << metrics_csv_row(rec) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt-learning pipeline for multiple-instance classification"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    add_config_flag(gen);
    std::string gen_spec, gen_out;
    std::uint64_t gen_seed = 0;
    bool gen_seed_set = false;
    gen->add_option("--spec", gen_spec, "Corpus spec JSON file (defaults used when absent)");
    gen->add_option("--out", gen_out, "Output corpus directory")->required();
    gen->add_option("--seed", gen_seed, "Override the spec seed")
        ->each([&gen_seed_set](const std::string&) { gen_seed_set = true; });
    gen->callback([&] {
        CorpusSpec spec = gen_spec.empty() ? CorpusSpec{} : corpus_spec_from_json_file(gen_spec);
        if (gen_seed_set) spec.seed = gen_seed;
        write_corpus(gen_corpus(spec), gen_out);
        std::cout << "wrote corpus to " << gen_out << "\n";
    });

    // ---- pretrain-backbone ----
    auto* pre = app.add_subcommand("pretrain-backbone",
                                   "Pretrain the backbone on the labeled source patches");
    add_config_flag(pre);
    std::string pre_corpus, pre_preset = "resnet18-like", pre_out;
    std::uint64_t pre_seed = 1;
    int pre_epochs = 30;
    double pre_lr = 1e-3;
    pre->add_option("--corpus", pre_corpus, "Corpus directory")->required();
    pre->add_option("--preset", pre_preset, "resnet18-like | resnet50-like");
    pre->add_option("--seed", pre_seed, "PRNG seed");
    pre->add_option("--epochs", pre_epochs, "Pretraining epochs");
    pre->add_option("--lr", pre_lr, "Pretraining learning rate");
    pre->add_option("--out", pre_out, "Output checkpoint path")->required();
    pre->callback([&] {
        const Corpus corpus = load_corpus(pre_corpus);
        const BackboneConfig bb = backbone_for(corpus, pre_preset);
        const PretrainResult r = pretrain_backbone(corpus, bb, pre_seed, pre_epochs, pre_lr);
        Checkpoint ckpt;
        ckpt.params = r.params;
        encode_backbone_config(bb, ckpt.meta);
        ckpt.meta["stage"] = "pretrain";
        ckpt.meta["seed"] = std::to_string(pre_seed);
        ckpt.meta["epochs"] = std::to_string(pre_epochs);
        char num[64];
        std::snprintf(num, sizeof(num), "%.17g", pre_lr);
        ckpt.meta["lr"] = num;
        std::snprintf(num, sizeof(num), "%.17g", r.source_val_acc);
        ckpt.meta["source_val_acc"] = num;
        write_checkpoint(pre_out, ckpt);
        write_resolved_config(pre, pre_out);
        std::cout << "pretrained backbone (held-out source acc " << r.source_val_acc
                  << ") -> " << pre_out << "\n";
    });

    // ---- extract ----
    auto* ext = app.add_subcommand("extract", "Extract frozen features for every bag");
    add_config_flag(ext);
    std::string ext_corpus, ext_backbone, ext_out;
    ext->add_option("--corpus", ext_corpus, "Corpus directory")->required();
    ext->add_option("--backbone", ext_backbone, "Backbone checkpoint")->required();
    ext->add_option("--out", ext_out, "Output feature directory")->required();
    ext->callback([&] {
        const Corpus corpus = load_corpus(ext_corpus);
        const Checkpoint ckpt = read_checkpoint(ext_backbone);
        const BackboneConfig bb = decode_backbone_config(ckpt.meta);
        const auto store = extract_features(corpus, ckpt.params, bb, PromptMode::off(),
                                            file_fingerprint(ext_backbone));
        write_feature_store(store, ext_out);
        std::cout << "extracted features for " << store.splits.size() << " splits -> " << ext_out
                  << "\n";
    });

    // ---- train-mil ----
    auto* mil = app.add_subcommand("train-mil", "Stage I: train the MIL classifier on features");
    add_config_flag(mil);
    std::string mil_features, mil_backbone, mil_out;
    ExperimentConfig mil_cfg;
    mil->add_option("--features", mil_features, "Feature directory")->required();
    mil->add_option("--backbone", mil_backbone,
                    "Backbone checkpoint to bundle so the result is directly evaluable");
    mil->add_option("--seed", mil_cfg.seed, "PRNG seed");
    mil->add_option("--epochs", mil_cfg.epochs, "Training epochs");
    mil->add_option("--lr", mil_cfg.lr, "Learning rate");
    mil->add_option("--weight-decay", mil_cfg.weight_decay, "L2 weight decay");
    mil->add_option("--batch", mil_cfg.batch, "Bags per optimizer step");
    mil->add_option("--hidden", mil_cfg.mil_hidden, "Attention hidden width");
    mil->add_option("--out", mil_out, "Output checkpoint path")->required();
    mil->callback([&] {
        const FeatureStore store = read_feature_store(mil_features);
        mil_cfg.method = "baseline";
        const TrainResult r = stage1_train_mil(store, mil_cfg);
        Checkpoint out;
        if (!mil_backbone.empty()) {
            const Checkpoint bb_ckpt = read_checkpoint(mil_backbone);
            const BackboneConfig bb = decode_backbone_config(bb_ckpt.meta);
            ParamSet<float> merged = bb_ckpt.params;
            for (const auto& [name, t] : r.params.entries) merged.add(name, t, true);
            out = make_checkpoint("stage1", merged, bb, mil_cfg, &r);
        } else {
            out = make_checkpoint("stage1", r.params, BackboneConfig::preset(mil_cfg.preset),
                                  mil_cfg, &r);
        }
        out.meta["features_fingerprint"] = store.extractor_fingerprint;
        write_checkpoint(mil_out, out);
        write_resolved_config(mil, mil_out);
        std::cout << "stage 1 done (best epoch " << r.best_epoch << ") -> " << mil_out << "\n";
    });

    // ---- select ----
    auto* sel = app.add_subcommand("select", "Stage II: representative patch selection");
    add_config_flag(sel);
    std::string sel_features, sel_mil, sel_out;
    int sel_k = 16;
    sel->add_option("--features", sel_features, "Feature directory")->required();
    sel->add_option("--mil", sel_mil, "Stage-1 MIL checkpoint")->required();
    sel->add_option("--k", sel_k, "Patches kept per bag");
    sel->add_option("--out", sel_out, "Output manifest path")->required();
    sel->callback([&] {
        const FeatureStore store = read_feature_store(sel_features);
        const Checkpoint mil_ckpt = read_checkpoint(sel_mil);
        const auto manifest =
            stage2_select(store, mil_ckpt.params, sel_k, file_fingerprint(sel_mil));
        write_selection_manifest(manifest, sel_out);
        std::cout << "selected top-" << sel_k << " patches for " << manifest.entries.size()
                  << " bags -> " << sel_out << "\n";
    });

    // ---- prompt-tune / finetune (shared wiring) ----
    struct Stage3Args {
        std::string corpus, backbone, manifest, mil, out;
        ExperimentConfig cfg;
    };
    auto add_stage3 = [&app](const std::string& name, const std::string& desc, Stage3Args& a) {
        auto* sub = app.add_subcommand(name, desc);
        add_config_flag(sub);
        sub->add_option("--corpus", a.corpus, "Corpus directory")->required();
        sub->add_option("--backbone", a.backbone, "Pretrained backbone checkpoint")->required();
        sub->add_option("--manifest", a.manifest, "Stage-2 selection manifest")->required();
        sub->add_option("--mil", a.mil, "Stage-1 MIL checkpoint (required for warm init)");
        sub->add_option("--mil-init", a.cfg.mil_init, "warm | fresh");
        sub->add_option("--seed", a.cfg.seed, "PRNG seed");
        sub->add_option("--epochs", a.cfg.epochs, "Training epochs");
        sub->add_option("--lr", a.cfg.lr, "Learning rate");
        sub->add_option("--weight-decay", a.cfg.weight_decay, "L2 weight decay");
        sub->add_option("--batch", a.cfg.batch, "Bags per optimizer step");
        sub->add_option("--hidden", a.cfg.mil_hidden, "Attention hidden width (fresh init)");
        sub->add_option("--out", a.out, "Output checkpoint path")->required();
        return sub;
    };
    auto run_stage3 = [](CLI::App* sub, Stage3Args& a, bool finetune_all) {
        const Corpus corpus = load_corpus(a.corpus);
        const Checkpoint bb_ckpt = read_checkpoint(a.backbone);
        const BackboneConfig bb = decode_backbone_config(bb_ckpt.meta);
        const auto manifest = read_selection_manifest(a.manifest);
        a.cfg.method = finetune_all ? "rps_ft" : "rps_pt";
        a.cfg.k = manifest.k;

        ParamSet<float> mil_params;
        const ParamSet<float>* warm = nullptr;
        if (a.cfg.mil_init == "warm") {
            if (a.mil.empty()) throw ConfigError(sub->get_name() + ": --mil-init warm needs --mil");
            mil_params = read_checkpoint(a.mil).params;
            warm = &mil_params;
        }
        const TrainResult r =
            stage3_tune(corpus, manifest, bb_ckpt.params, bb, warm, a.cfg, finetune_all);
        const Checkpoint out = make_checkpoint("stage3", r.params, bb, a.cfg, &r);
        write_checkpoint(a.out, out);
        write_resolved_config(sub, a.out);
        std::cout << "stage 3 (" << a.cfg.method << ") done (best epoch " << r.best_epoch
                  << ") -> " << a.out << "\n";
    };
    static Stage3Args pt_args, ft_args;
    auto* pt = add_stage3("prompt-tune",
                          "Stage III: tune prompt blocks + MIL on selected patches", pt_args);
    pt->callback([&] { run_stage3(pt, pt_args, false); });
    auto* ft = add_stage3("finetune",
                          "Stage III baseline: finetune the whole backbone + MIL", ft_args);
    ft->callback([&] { run_stage3(ft, ft_args, true); });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    add_config_flag(ev);
    std::string ev_ckpt, ev_corpus, ev_split = "test", ev_csv;
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
    ev->add_option("--corpus", ev_corpus, "Corpus directory")->required();
    ev->add_option("--split", ev_split, "train | val | test");
    ev->add_option("--csv", ev_csv, "Append the row to this metrics CSV");
    ev->callback([&] {
        const Checkpoint ckpt = read_checkpoint(ev_ckpt);
        const Corpus corpus = load_corpus(ev_corpus);
        const MetricsRecord rec = evaluate(ckpt, corpus, ev_split);
        print_record(rec);
        if (!ev_csv.empty()) append_metrics_csv(ev_csv, {rec});
    });

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "Sweep K or the prompt-site count");
    add_config_flag(ab);
    std::string ab_corpus, ab_csv;
    AblateRequest req;
    ExperimentConfig ab_cfg;
    ab->add_option("--corpus", ab_corpus, "Corpus directory")->required();
    ab->add_option("--axis", req.axis, "k | sites")->required();
    ab->add_option("--values", req.values, "Axis values")->required()->expected(-1);
    ab->add_option("--seeds", req.seeds, "Seeds to sweep")->required()->expected(-1);
    ab->add_option("--preset", ab_cfg.preset, "Backbone preset");
    ab->add_option("--k", ab_cfg.k, "K used by the sites sweep");
    ab->add_option("--epochs", ab_cfg.epochs, "Stage-3 epochs");
    ab->add_option("--lr", ab_cfg.lr, "Learning rate");
    ab->add_option("--weight-decay", ab_cfg.weight_decay, "L2 weight decay");
    ab->add_option("--pretrain-epochs", ab_cfg.pretrain_epochs, "Backbone pretraining epochs");
    ab->add_option("--csv", ab_csv, "Metrics CSV to append")->required();
    ab->callback([&] {
        const Corpus corpus = load_corpus(ab_corpus);
        const auto rows = ablate(corpus, req, ab_cfg);
        append_metrics_csv(ab_csv, rows);
        std::cout << "ablation wrote " << rows.size() << " rows -> " << ab_csv << "\n";
    });

    // ---- report ----
    auto* rep = app.add_subcommand("report", "Summarize a metrics CSV");
    std::string rep_csv;
    rep->add_option("--csv", rep_csv, "Metrics CSV path")->required();
    rep->callback([&] { std::cout << report_from_csv(rep_csv); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const InvariantBreach& e) {
        std::cerr << "invariant breach: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const std::runtime_error& e) {
        // contract, config, dimension, and numeric errors
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
