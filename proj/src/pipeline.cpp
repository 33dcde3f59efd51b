#include "pmil/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "pmil/synthdata.hpp"

namespace pmil {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::map<std::string, int> leaf_params(Tape<float>& tape, const ParamSet<float>& params) {
    std::map<std::string, int> vars;
    for (const auto& [name, t] : params.entries) {
        Tensor<float> leaf = t;
        leaf.clear_grad();
        vars[name] = tape.leaf(std::move(leaf));
    }
    return vars;
}

void accumulate_grads(Tape<float>& tape, const std::map<std::string, int>& vars,
                      const ParamSet<float>& params, GradMap<float>& grads) {
    for (const auto& [name, t] : params.entries) {
        if (!t.requires_grad) continue;
        const auto& g = tape.grad(vars.at(name));
        auto& dst = grads[name];
        if (dst.empty()) dst.assign(t.numel(), 0.0f);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
}

void scale_grads(GradMap<float>& grads, float s) {
    for (auto& [name, g] : grads)
        for (auto& x : g) x *= s;
}

std::optional<double> mil_val_auc(const std::vector<FeatureBag>& bags,
                                  const ParamSet<float>& params) {
    std::vector<double> probs;
    std::vector<int> labels;
    for (const auto& bag : bags) {
        const auto r = classify_bag(bag.features, params);
        probs.push_back(positive_probability(r.logits));
        labels.push_back(bag.label);
    }
    if (probs.empty()) return std::nullopt;
    return auc(probs, labels);
}

// Ties go to the later epoch: on easy corpora validation AUC saturates
// immediately and a strict comparison would freeze the untrained snapshot.
bool better(std::optional<double> cand, std::optional<double> best) {
    if (!cand) return false;
    return !best || *cand >= *best;
}

std::vector<int> sites_for_count(const BackboneConfig& cfg, int count) {
    if (count < 0 || count > cfg.num_blocks)
        throw ConfigError("prompt site count out of range: " + std::to_string(count));
    std::vector<int> sites;
    for (int i = cfg.num_blocks - count + 1; i <= cfg.num_blocks; ++i) sites.push_back(i);
    return sites;
}

}  // namespace

PretrainResult pretrain_backbone(const Corpus& corpus, const BackboneConfig& cfg,
                                 std::uint64_t seed, int epochs, double lr) {
    if (corpus.source.empty()) throw ContractError("pretrain_backbone: empty source set");
    cfg.validate();
    Rng init_rng(seed, "init.backbone");
    ParamSet<float> params = backbone_init<float>(cfg, init_rng);
    for (auto& [name, t] : params.entries)
        t.requires_grad = name.rfind("backbone.", 0) == 0;  // prompts sit out of pretraining
    {
        Rng head_rng(seed, "init.head");
        Tensor<float> hw = Tensor<float>::zeros({2, cfg.channels});
        const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
        for (auto& x : hw.data) x = static_cast<float>(head_rng.gaussian(0.0, sigma));
        params.add("pretrain.head.w", std::move(hw), true);
        params.add("pretrain.head.b", Tensor<float>::zeros({2}), true);
    }

    const int n = static_cast<int>(corpus.source.size());
    const int n_train = std::max(1, n * 4 / 5);

    AdamState<float> adam;
    adam.lr = static_cast<float>(lr);
    Rng shuffle(seed, "shuffle.pretrain");
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto order = shuffle.permutation(n_train);
        for (int idx : order) {
            const auto& sp = corpus.source[idx];
            Tape<float> tape;
            auto vars = leaf_params(tape, params);
            Tensor<float> patch = sp.patch;
            patch.requires_grad = false;
            const int feat = backbone_forward_taped(tape, tape.leaf(std::move(patch)), vars, cfg,
                                                    PromptMode::off());
            const int logits =
                tape.linear(feat, vars.at("pretrain.head.w"), vars.at("pretrain.head.b"));
            const int loss = tape.ce_loss(logits, sp.label);
            tape.backward(loss);
            GradMap<float> grads;
            accumulate_grads(tape, vars, params, grads);
            adam_step(params, grads, adam);
        }
    }

    // held-out source accuracy with the throwaway head
    int correct = 0, total = 0;
    for (int i = n_train; i < n; ++i) {
        const auto feat = backbone_forward(corpus.source[i].patch, params, cfg, PromptMode::off());
        const auto& hw = params.at("pretrain.head.w");
        const auto& hb = params.at("pretrain.head.b");
        float l0 = hb.data[0], l1 = hb.data[1];
        for (int j = 0; j < cfg.channels; ++j) {
            l0 += hw.data[j] * feat.data[j];
            l1 += hw.data[static_cast<std::size_t>(cfg.channels) + j] * feat.data[j];
        }
        correct += ((l1 > l0 ? 1 : 0) == corpus.source[i].label);
        ++total;
    }

    PretrainResult out;
    out.source_val_acc = total > 0 ? static_cast<double>(correct) / total : 0.0;
    params.entries.erase("pretrain.head.w");
    params.entries.erase("pretrain.head.b");
    for (auto& [name, t] : params.entries)
        t.requires_grad = name.rfind("prompt.", 0) == 0;  // backbone re-frozen
    out.params = std::move(params);
    return out;
}

std::vector<Tensor<float>> extract_bag_features(const std::vector<Tensor<float>>& patches,
                                                const ParamSet<float>& params,
                                                const BackboneConfig& cfg, PromptMode mode) {
    std::vector<Tensor<float>> feats(patches.size());
    // order-independent slot writes, safe to fan out
#pragma omp parallel for schedule(dynamic) if (patches.size() > 1)
    for (std::size_t i = 0; i < patches.size(); ++i)
        feats[i] = backbone_forward(patches[i], params, cfg, mode);
    return feats;
}

FeatureStore extract_features(const Corpus& corpus, const ParamSet<float>& params,
                              const BackboneConfig& cfg, PromptMode mode,
                              const std::string& fingerprint) {
    FeatureStore store;
    store.extractor_fingerprint = fingerprint;
    store.feature_dim = cfg.channels;
    for (const std::string split : {"train", "val", "test"}) {
        auto& out = store.splits[split];
        for (const auto& bag : corpus.split(split)) {
            FeatureBag fb;
            fb.bag_id = bag.bag_id;
            fb.label = bag.label;
            fb.extractor_fingerprint = fingerprint;
            fb.features = extract_bag_features(bag.patches, params, cfg, mode);
            out.push_back(std::move(fb));
        }
    }
    return store;
}

void write_feature_store(const FeatureStore& store, const fs::path& dir) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["format_version"] = 1;
    manifest["extractor_fingerprint"] = store.extractor_fingerprint;
    manifest["feature_dim"] = store.feature_dim;
    ordered_json splits;
    for (const auto& [name, bags] : store.splits) {
        fs::create_directories(dir / name);
        ordered_json arr = ordered_json::array();
        for (const auto& bag : bags) {
            const std::string file = name + "/" + bag.bag_id + ".bin";
            std::vector<Tensor<float>> rows;
            rows.reserve(bag.features.size());
            for (const auto& f : bag.features) {
                Tensor<float> r = f;
                r.shape = {1, 1, static_cast<int>(f.numel())};
                rows.push_back(std::move(r));
            }
            write_patch_blob(dir / file, rows);
            ordered_json rec;
            rec["bag_id"] = bag.bag_id;
            rec["label"] = bag.label;
            rec["num_features"] = bag.features.size();
            rec["file"] = file;
            arr.push_back(std::move(rec));
        }
        splits[name] = std::move(arr);
    }
    manifest["splits"] = std::move(splits);
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw FormatError("cannot write feature manifest in " + dir.string());
    mf << manifest.dump(2) << "\n";
}

FeatureStore read_feature_store(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw FormatError("missing feature manifest in " + dir.string());
    ordered_json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad feature manifest: " + std::string(e.what()));
    }
    if (manifest.value("format_version", 0) != 1)
        throw FormatError("unsupported feature store version in " + dir.string());
    FeatureStore store;
    store.extractor_fingerprint = manifest.at("extractor_fingerprint").get<std::string>();
    store.feature_dim = manifest.at("feature_dim").get<int>();
    for (const auto& [name, arr] : manifest.at("splits").items()) {
        auto& bags = store.splits[name];
        for (const auto& rec : arr) {
            FeatureBag fb;
            fb.bag_id = rec.at("bag_id").get<std::string>();
            fb.label = rec.at("label").get<int>();
            fb.extractor_fingerprint = store.extractor_fingerprint;
            for (auto& row : read_patch_blob(dir / rec.at("file").get<std::string>())) {
                row.shape = {static_cast<int>(row.numel())};
                fb.features.push_back(std::move(row));
            }
            if (fb.features.size() != rec.at("num_features").get<std::size_t>())
                throw FormatError("feature count mismatch for bag " + fb.bag_id);
            bags.push_back(std::move(fb));
        }
    }
    return store;
}

TrainResult stage1_train_mil(const FeatureStore& store, const ExperimentConfig& cfg) {
    cfg.validate();
    auto train_it = store.splits.find("train");
    if (train_it == store.splits.end() || train_it->second.empty())
        throw ContractError("stage1_train_mil: no training features");
    const auto& train = train_it->second;
    const auto val_it = store.splits.find("val");
    static const std::vector<FeatureBag> kNoBags;
    const auto& val = val_it != store.splits.end() ? val_it->second : kNoBags;

    MilConfig mcfg{cfg.mil_hidden, store.feature_dim};
    ParamSet<float> params;
    Rng init_rng(cfg.seed, "init.mil");
    mil_init(params, mcfg, init_rng);

    TrainResult best;
    best.params = params;
    best.best_val_auc = mil_val_auc(val, params);
    best.best_epoch = 0;

    AdamState<float> adam;
    adam.lr = static_cast<float>(cfg.lr);
    adam.weight_decay = static_cast<float>(cfg.weight_decay);
    Rng shuffle(cfg.seed, "shuffle");
    const int n = static_cast<int>(train.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = shuffle.permutation(n);
        for (int start = 0; start < n; start += cfg.batch) {
            const int stop = std::min(n, start + cfg.batch);
            GradMap<float> grads;
            for (int bi = start; bi < stop; ++bi) {
                const auto& bag = train[order[bi]];
                Tape<float> tape;
                auto vars = leaf_params(tape, params);
                std::vector<int> feats;
                feats.reserve(bag.features.size());
                for (const auto& f : bag.features) {
                    Tensor<float> leaf = f;
                    leaf.requires_grad = false;
                    feats.push_back(tape.leaf(std::move(leaf)));
                }
                const auto r = classify_bag_taped(tape, feats, vars);
                tape.backward(tape.ce_loss(r.logits, bag.label));
                accumulate_grads(tape, vars, params, grads);
            }
            scale_grads(grads, 1.0f / static_cast<float>(stop - start));
            adam_step(params, grads, adam);
        }
        const auto val_auc = mil_val_auc(val, params);
        if (better(val_auc, best.best_val_auc)) {
            best.params = params;
            best.best_val_auc = val_auc;
            best.best_epoch = epoch;
        }
    }
    if (best.best_epoch == 0 && cfg.epochs > 0 && !best.best_val_auc) {
        best.params = params;  // final-epoch fallback when val AUC never resolved
        best.best_epoch = cfg.epochs;
    }
    return best;
}

SelectionManifest stage2_select(const FeatureStore& store, const ParamSet<float>& mil, int k,
                                const std::string& mil_fingerprint) {
    SelectionManifest m;
    m.k = k;
    m.mil_fingerprint = mil_fingerprint;
    for (const std::string split : {"train", "val", "test"}) {
        auto it = store.splits.find(split);
        if (it == store.splits.end()) continue;
        for (const auto& bag : it->second) {
            SelectionEntry e;
            e.sel = select_representatives(bag, mil, k);
            e.split = split;
            m.entries.push_back(std::move(e));
        }
    }
    return m;
}

void write_selection_manifest(const SelectionManifest& m, const fs::path& path) {
    ordered_json j;
    j["format_version"] = 1;
    j["k"] = m.k;
    j["mil_checkpoint_fingerprint"] = m.mil_fingerprint;
    ordered_json arr = ordered_json::array();
    for (const auto& e : m.entries) {
        ordered_json rec;
        rec["bag_id"] = e.sel.bag_id;
        rec["split"] = e.split;
        rec["label"] = e.sel.label;
        rec["k_requested"] = e.sel.k_requested;
        rec["kept_indices"] = e.sel.kept_indices;
        std::vector<float> kept_scores;
        for (int i : e.sel.kept_indices)
            kept_scores.push_back(e.sel.scores.empty() ? 0.0f : e.sel.scores[i]);
        rec["kept_scores"] = kept_scores;
        arr.push_back(std::move(rec));
    }
    j["bags"] = std::move(arr);
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write selection manifest: " + path.string());
    f << j.dump(2) << "\n";
}

SelectionManifest read_selection_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open selection manifest: " + path.string());
    ordered_json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad selection manifest: " + std::string(e.what()));
    }
    if (j.value("format_version", 0) != 1)
        throw FormatError("unsupported selection manifest version: " + path.string());
    SelectionManifest m;
    m.k = j.at("k").get<int>();
    m.mil_fingerprint = j.value("mil_checkpoint_fingerprint", "");
    for (const auto& rec : j.at("bags")) {
        SelectionEntry e;
        e.sel.bag_id = rec.at("bag_id").get<std::string>();
        e.split = rec.at("split").get<std::string>();
        e.sel.label = rec.at("label").get<int>();
        e.sel.k_requested = rec.at("k_requested").get<int>();
        e.sel.kept_indices = rec.at("kept_indices").get<std::vector<int>>();
        m.entries.push_back(std::move(e));
    }
    return m;
}

TrainResult stage3_tune(const Corpus& corpus, const SelectionManifest& manifest,
                        const ParamSet<float>& backbone, const BackboneConfig& cfg,
                        const ParamSet<float>* mil_warm, const ExperimentConfig& ecfg,
                        bool finetune_all) {
    ecfg.validate();
    cfg.validate();

    ParamSet<float> params;
    for (const auto& [name, t] : backbone.entries) {
        if (name.rfind("backbone.", 0) == 0) {
            params.add(name, t, finetune_all);
        }
    }
    if (!finetune_all) {
        const int hidden = cfg.channels / cfg.reduction;
        Rng prompt_rng(ecfg.seed, "init.prompt");
        for (int s : cfg.prompt_sites) {
            const auto w1 = prompt_w1_name(s), w2 = prompt_w2_name(s);
            if (backbone.has(w1)) {
                params.add(w1, backbone.at(w1), true);
            } else {
                // site absent from the incoming checkpoint (site-count sweep):
                // same init scheme as backbone_init, W1 random / W2 zero
                Tensor<float> t = Tensor<float>::zeros({hidden, cfg.channels});
                for (auto& x : t.data)
                    x = static_cast<float>(prompt_rng.gaussian(0.0, std::sqrt(2.0 / cfg.channels)));
                params.add(w1, std::move(t), true);
            }
            params.add(w2, backbone.has(w2) ? backbone.at(w2)
                                            : Tensor<float>::zeros({cfg.channels, hidden}),
                       true);
        }
    }
    if (ecfg.mil_init == "warm") {
        if (!mil_warm) throw ContractError("stage3: warm MIL init requires a stage-1 checkpoint");
        for (const auto& [name, t] : mil_warm->entries)
            if (name.rfind("mil.", 0) == 0) params.add(name, t, true);
    } else {
        MilConfig mcfg{ecfg.mil_hidden, cfg.channels};
        Rng init_rng(ecfg.seed, "init.mil3");
        mil_init(params, mcfg, init_rng);
    }

    // frozen snapshot for the bit-exact audit
    std::map<std::string, std::vector<float>> frozen;
    for (const auto& [name, t] : params.entries)
        if (!t.requires_grad) frozen[name] = t.data;

    std::map<std::string, const PatchBag*> by_id;
    for (const auto& bag : corpus.train) by_id[bag.bag_id] = &bag;
    std::vector<PatchBag> train_bags;
    for (const auto& e : manifest.entries) {
        if (e.split != "train") continue;
        auto it = by_id.find(e.sel.bag_id);
        if (it == by_id.end())
            throw ContractError("stage3: manifest bag not in corpus: " + e.sel.bag_id);
        train_bags.push_back(materialize_selected_bag(e.sel, *it->second));
    }
    if (train_bags.empty()) throw ContractError("stage3: no training bags in manifest");

    const PromptMode mode = finetune_all ? PromptMode::off() : PromptMode::active();

    // Prompt path only: the warm-started MIL was trained on ungated features,
    // but freshly initialized prompts gate every site at exactly 0.5. Re-fit
    // the MIL alone on cached init-gated features first, so the joint loop
    // starts at the stage-I operating point instead of spending its budget
    // undoing the scale change. Prompts are bit-frozen here, so features are
    // extracted once and reused across these epochs.
    if (!finetune_all && ecfg.epochs > 0) {
        auto featurize = [&](const std::vector<PatchBag>& bags) {
            std::vector<FeatureBag> out;
            out.reserve(bags.size());
            for (const auto& bag : bags) {
                FeatureBag fb;
                fb.bag_id = bag.bag_id;
                fb.label = bag.label;
                fb.features = extract_bag_features(bag.patches, params, cfg, mode);
                out.push_back(std::move(fb));
            }
            return out;
        };
        const auto ftrain = featurize(train_bags);
        const auto fval = featurize(corpus.val);
        ParamSet<float> mil;
        for (const auto& [name, t] : params.entries)
            if (name.rfind("mil.", 0) == 0) mil.add(name, t, true);
        ParamSet<float> best_mil = mil;
        auto best_val = mil_val_auc(fval, mil);
        AdamState<float> recal_adam;
        recal_adam.lr = static_cast<float>(ecfg.lr);
        recal_adam.weight_decay = static_cast<float>(ecfg.weight_decay);
        Rng recal_shuffle(ecfg.seed, "shuffle.recal");
        const int nb = static_cast<int>(ftrain.size());
        constexpr int kRecalEpochs = 20;
        for (int epoch = 1; epoch <= kRecalEpochs; ++epoch) {
            const auto order = recal_shuffle.permutation(nb);
            for (int start = 0; start < nb; start += ecfg.batch) {
                const int stop = std::min(nb, start + ecfg.batch);
                GradMap<float> grads;
                for (int bi = start; bi < stop; ++bi) {
                    const auto& bag = ftrain[order[bi]];
                    Tape<float> tape;
                    auto vars = leaf_params(tape, mil);
                    std::vector<int> feats;
                    feats.reserve(bag.features.size());
                    for (const auto& f : bag.features) {
                        Tensor<float> leaf = f;
                        leaf.requires_grad = false;
                        feats.push_back(tape.leaf(std::move(leaf)));
                    }
                    const auto r = classify_bag_taped(tape, feats, vars);
                    tape.backward(tape.ce_loss(r.logits, bag.label));
                    accumulate_grads(tape, vars, mil, grads);
                }
                scale_grads(grads, 1.0f / static_cast<float>(stop - start));
                adam_step(mil, grads, recal_adam);
            }
            const auto v = mil_val_auc(fval, mil);
            if (better(v, best_val)) {
                best_val = v;
                best_mil = mil;
            }
        }
        for (auto& [name, t] : best_mil.entries) params.entries.at(name).data = std::move(t.data);
    }

    // Model selection scores FULL validation bags (every patch, current
    // extractor state), matching what evaluate() will see. Scoring the
    // selected val bags instead would inflate epoch-0 AUC (selection strips
    // distractor patches) and pin the snapshot to the warm start.
    auto val_auc_now = [&]() -> std::optional<double> {
        std::vector<double> probs;
        std::vector<int> labels;
        for (const auto& bag : corpus.val) {
            const auto feats = extract_bag_features(bag.patches, params, cfg, mode);
            const auto r = classify_bag(feats, params);
            probs.push_back(positive_probability(r.logits));
            labels.push_back(bag.label);
        }
        if (probs.empty()) return std::nullopt;
        return auc(probs, labels);
    };

    TrainResult best;
    best.params = params;
    best.best_val_auc = val_auc_now();
    best.best_epoch = 0;

    AdamState<float> adam;
    adam.lr = static_cast<float>(ecfg.lr);
    adam.weight_decay = static_cast<float>(ecfg.weight_decay);
    Rng shuffle(ecfg.seed, "shuffle");
    const int n = static_cast<int>(train_bags.size());
    for (int epoch = 1; epoch <= ecfg.epochs; ++epoch) {
        const auto order = shuffle.permutation(n);
        for (int start = 0; start < n; start += ecfg.batch) {
            const int stop = std::min(n, start + ecfg.batch);
            GradMap<float> grads;
            for (int bi = start; bi < stop; ++bi) {
                const auto& bag = train_bags[order[bi]];
                Tape<float> tape;
                auto vars = leaf_params(tape, params);
                std::vector<int> feats;
                feats.reserve(bag.patches.size());
                for (const auto& patch : bag.patches) {
                    Tensor<float> leaf = patch;
                    leaf.requires_grad = false;
                    feats.push_back(backbone_forward_taped(tape, tape.leaf(std::move(leaf)),
                                                           vars, cfg, mode));
                }
                const auto r = classify_bag_taped(tape, feats, vars);
                tape.backward(tape.ce_loss(r.logits, bag.label));
                accumulate_grads(tape, vars, params, grads);
            }
            scale_grads(grads, 1.0f / static_cast<float>(stop - start));
            adam_step(params, grads, adam);
        }
        const auto val_auc = val_auc_now();
        if (better(val_auc, best.best_val_auc)) {
            best.params = params;
            best.best_val_auc = val_auc;
            best.best_epoch = epoch;
        }
    }
    if (best.best_epoch == 0 && ecfg.epochs > 0 && !best.best_val_auc) {
        best.params = params;
        best.best_epoch = ecfg.epochs;
    }

    for (const auto& [name, data] : frozen) {
        const auto& now = best.params.at(name).data;
        if (now.size() != data.size() ||
            std::memcmp(now.data(), data.data(), data.size() * sizeof(float)) != 0)
            throw InvariantBreach("frozen parameter drifted during stage 3: " + name);
    }
    return best;
}

Checkpoint make_checkpoint(std::string stage, const ParamSet<float>& params,
                           const BackboneConfig& bb, const ExperimentConfig& cfg,
                           const TrainResult* train) {
    Checkpoint ckpt;
    ckpt.params = params;
    encode_backbone_config(bb, ckpt.meta);
    ckpt.meta["stage"] = std::move(stage);
    ckpt.meta["method"] = cfg.method;
    ckpt.meta["k"] = std::to_string(cfg.k);
    ckpt.meta["seed"] = std::to_string(cfg.seed);
    ckpt.meta["epochs"] = std::to_string(cfg.epochs);
    ckpt.meta["mil_hidden"] = std::to_string(cfg.mil_hidden);
    ckpt.meta["mil_init"] = cfg.mil_init;
    ckpt.meta["config_fingerprint"] = cfg.fingerprint;
    char num[64];
    std::snprintf(num, sizeof(num), "%.17g", cfg.lr);
    ckpt.meta["lr"] = num;
    std::snprintf(num, sizeof(num), "%.17g", cfg.weight_decay);
    ckpt.meta["weight_decay"] = num;
    if (train) {
        ckpt.meta["best_epoch"] = std::to_string(train->best_epoch);
        if (train->best_val_auc) {
            std::snprintf(num, sizeof(num), "%.17g", *train->best_val_auc);
            ckpt.meta["val_auc"] = num;
        } else {
            ckpt.meta["val_auc"] = "n/a";
        }
    }
    return ckpt;
}

std::vector<double> bag_probabilities(const Checkpoint& ckpt, const std::vector<PatchBag>& bags,
                                      std::optional<PromptMode> prompt_override) {
    const BackboneConfig cfg = decode_backbone_config(ckpt.meta);
    const std::string method = ckpt.meta_or("method", "baseline");
    PromptMode mode = method == "rps_pt" ? PromptMode::active() : PromptMode::off();
    if (prompt_override) mode = *prompt_override;
    std::vector<double> probs;
    probs.reserve(bags.size());
    for (const auto& bag : bags) {
        const auto feats = extract_bag_features(bag.patches, ckpt.params, cfg, mode);
        const auto r = classify_bag(feats, ckpt.params);
        probs.push_back(positive_probability(r.logits));
    }
    return probs;
}

MetricsRecord evaluate(const Checkpoint& ckpt, const Corpus& corpus, const std::string& split,
                       std::optional<PromptMode> prompt_override) {
    const auto& bags = corpus.split(split);
    if (bags.empty()) throw ContractError("evaluate: split is empty: " + split);
    const auto probs = bag_probabilities(ckpt, bags, prompt_override);
    std::vector<int> labels;
    for (const auto& bag : bags) labels.push_back(bag.label);

    MetricsRecord rec;
    rec.auc = auc(probs, labels);
    const auto fa = f1_acc(probs, labels);
    rec.f1 = fa.f1;
    rec.acc = fa.acc;
    rec.n_bags = static_cast<int>(bags.size());
    rec.split = split;
    rec.seed = std::stoull(ckpt.meta_or("seed", "0"));
    rec.config_fingerprint = ckpt.meta_or("config_fingerprint", "");
    rec.method = ckpt.meta_or("method", "baseline");
    rec.backbone_preset = ckpt.meta_or("backbone.preset", "");
    rec.k = std::stoi(ckpt.meta_or("k", "0"));
    const BackboneConfig cfg = decode_backbone_config(ckpt.meta);
    rec.prompt_sites =
        rec.method == "rps_pt" ? static_cast<int>(cfg.prompt_sites.size()) : 0;
    return rec;
}

MethodRun run_method(const Corpus& corpus, const PretrainResult& pretrained,
                     const BackboneConfig& bb, const ExperimentConfig& cfg) {
    cfg.validate();
    const auto features =
        extract_features(corpus, pretrained.params, bb, PromptMode::off(), "in-memory");
    const auto stage1 = stage1_train_mil(features, cfg);

    MethodRun run;
    run.stage1_val_auc = stage1.best_val_auc;
    if (cfg.method == "baseline") {
        ParamSet<float> merged = pretrained.params;
        for (const auto& [name, t] : stage1.params.entries) merged.add(name, t, true);
        run.final_ckpt = make_checkpoint("stage1", merged, bb, cfg, &stage1);
    } else {
        const auto manifest = stage2_select(features, stage1.params, cfg.k, "in-memory");
        const auto stage3 = stage3_tune(corpus, manifest, pretrained.params, bb, &stage1.params,
                                        cfg, cfg.method == "rps_ft");
        run.final_ckpt = make_checkpoint("stage3", stage3.params, bb, cfg, &stage3);
    }
    run.val = evaluate(run.final_ckpt, corpus, "val");
    run.test = evaluate(run.final_ckpt, corpus, "test");
    return run;
}

std::vector<MetricsRecord> ablate(const Corpus& corpus, const AblateRequest& req,
                                  ExperimentConfig cfg) {
    if (req.axis != "k" && req.axis != "sites")
        throw ConfigError("ablate: axis must be k or sites");
    BackboneConfig bb = BackboneConfig::preset(cfg.preset);
    bb.height = corpus.spec.height;
    bb.width = corpus.spec.width;
    std::vector<MetricsRecord> rows;
    for (const std::uint64_t seed : req.seeds) {
        cfg.seed = seed;
        cfg.method = "rps_pt";
        const auto pre = pretrain_backbone(corpus, bb, seed, cfg.pretrain_epochs, cfg.pretrain_lr);
        const auto features =
            extract_features(corpus, pre.params, bb, PromptMode::off(), "in-memory");
        const auto stage1 = stage1_train_mil(features, cfg);

        if (req.axis == "k") {
            for (int k : req.values) {
                ExperimentConfig c = cfg;
                c.k = k;
                const auto manifest = stage2_select(features, stage1.params, k, "in-memory");
                const auto stage3 =
                    stage3_tune(corpus, manifest, pre.params, bb, &stage1.params, c, false);
                const auto ckpt = make_checkpoint("stage3", stage3.params, bb, c, &stage3);
                rows.push_back(evaluate(ckpt, corpus, "test"));
            }
        } else {
            const auto manifest = stage2_select(features, stage1.params, cfg.k, "in-memory");
            for (int count : req.values) {
                if (count == 0) {
                    // no prompt sites: frozen baseline evaluated on the selected bags
                    std::vector<double> probs;
                    std::vector<int> labels;
                    for (const auto& e : manifest.entries) {
                        if (e.split != "test") continue;
                        const FeatureBag* fb = nullptr;
                        for (const auto& b : features.splits.at("test"))
                            if (b.bag_id == e.sel.bag_id) fb = &b;
                        std::vector<Tensor<float>> kept;
                        for (int i : e.sel.kept_indices) kept.push_back(fb->features[i]);
                        const auto r = classify_bag(kept, stage1.params);
                        probs.push_back(positive_probability(r.logits));
                        labels.push_back(e.sel.label);
                    }
                    MetricsRecord rec;
                    rec.auc = auc(probs, labels);
                    const auto fa = f1_acc(probs, labels);
                    rec.f1 = fa.f1;
                    rec.acc = fa.acc;
                    rec.n_bags = static_cast<int>(labels.size());
                    rec.split = "test";
                    rec.seed = seed;
                    rec.method = "rps_pt";
                    rec.backbone_preset = cfg.preset;
                    rec.k = cfg.k;
                    rec.prompt_sites = 0;
                    rows.push_back(std::move(rec));
                    continue;
                }
                BackboneConfig bbv = bb;
                bbv.prompt_sites = sites_for_count(bb, count);
                const auto stage3 =
                    stage3_tune(corpus, manifest, pre.params, bbv, &stage1.params, cfg, false);
                const auto ckpt = make_checkpoint("stage3", stage3.params, bbv, cfg, &stage3);
                rows.push_back(evaluate(ckpt, corpus, "test"));
            }
        }
    }
    return rows;
}

void append_metrics_csv(const fs::path& path, const std::vector<MetricsRecord>& rows) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    std::ofstream f(path, std::ios::app);
    if (!f) throw FormatError("cannot open metrics csv: " + path.string());
    if (fresh) f << metrics_csv_header() << "\n";
    for (const auto& r : rows) f << metrics_csv_row(r) << "\n";
}

std::string report_from_csv(const fs::path& csv) {
    std::ifstream f(csv);
    if (!f) throw FormatError("cannot open metrics csv: " + csv.string());
    std::string line;
    if (!std::getline(f, line) || line != metrics_csv_header())
        throw FormatError("unexpected csv header in " + csv.string());

    struct Cell {
        double auc_sum = 0, f1_sum = 0, acc_sum = 0;
        int n = 0, auc_n = 0;
    };
    std::map<std::pair<std::string, std::string>, Cell> cells;  // (method, split)
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
        if (cols.size() != 10) throw FormatError("bad csv row: " + line);
        Cell& c = cells[{cols[2], cols[0]}];
        if (cols[6] != "n/a") {
            c.auc_sum += std::stod(cols[6]);
            ++c.auc_n;
        }
        c.f1_sum += std::stod(cols[7]);
        c.acc_sum += std::stod(cols[8]);
        ++c.n;
    }

    std::ostringstream out;
    out << "method        split  runs   auc      f1       acc\n";
    for (const auto& [key, c] : cells) {
        char buf[160];
        if (c.auc_n > 0)
            std::snprintf(buf, sizeof(buf), "%-13s %-6s %4d   %.4f   %.4f   %.4f\n",
                          key.first.c_str(), key.second.c_str(), c.n, c.auc_sum / c.auc_n,
                          c.f1_sum / c.n, c.acc_sum / c.n);
        else
            std::snprintf(buf, sizeof(buf), "%-13s %-6s %4d   n/a      %.4f   %.4f\n",
                          key.first.c_str(), key.second.c_str(), c.n, c.f1_sum / c.n,
                          c.acc_sum / c.n);
        out << buf;
    }

    auto gap_of = [&cells](const std::string& method) -> std::optional<double> {
        auto v = cells.find({method, "val"});
        auto t = cells.find({method, "test"});
        if (v == cells.end() || t == cells.end() || v->second.auc_n == 0 ||
            t->second.auc_n == 0)
            return std::nullopt;
        return v->second.auc_sum / v->second.auc_n - t->second.auc_sum / t->second.auc_n;
    };
    const auto ft_gap = gap_of("rps_ft");
    const auto pt_gap = gap_of("rps_pt");
    if (ft_gap && pt_gap) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "overfit-direction: %s (rps_ft val-test auc gap %.4f vs rps_pt %.4f)\n",
                      *ft_gap > *pt_gap ? "PASS" : "FAIL", *ft_gap, *pt_gap);
        out << buf;
    }
    return out.str();
}

}  // namespace pmil
