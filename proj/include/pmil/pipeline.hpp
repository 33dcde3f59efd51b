#pragma once

// Three-stage experiment pipeline: (I) MIL training on frozen features,
// (II) representative patch selection, (III) prompt tuning or full
// fine-tuning on the selected patches, plus evaluation and the ablation
// driver.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmil/backbone.hpp"
#include "pmil/checkpoint.hpp"
#include "pmil/data.hpp"
#include "pmil/metrics.hpp"
#include "pmil/mil.hpp"
#include "pmil/rps.hpp"

namespace pmil {

struct ExperimentConfig {
    std::string preset = "resnet18-like";
    std::string method = "baseline";  // baseline | rps_ft | rps_pt
    int k = 16;
    int epochs = 100;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    int batch = 1;  // bags per optimizer step
    std::uint64_t seed = 1;
    std::string mil_init = "warm";  // warm | fresh
    int mil_hidden = 128;
    int pretrain_epochs = 30;
    double pretrain_lr = 1e-3;
    std::string fingerprint;  // hash of the resolved run config

    void validate() const {
        if (method != "baseline" && method != "rps_ft" && method != "rps_pt")
            throw ConfigError("unknown method: " + method);
        if (mil_init != "warm" && mil_init != "fresh")
            throw ConfigError("mil_init must be warm or fresh");
        if (k < 1 || epochs < 0 || batch < 1) throw ConfigError("bad experiment config values");
    }
};

struct FeatureStore {
    std::string extractor_fingerprint;
    int feature_dim = 0;
    std::map<std::string, std::vector<FeatureBag>> splits;
};

struct PretrainResult {
    ParamSet<float> params;  // backbone frozen, prompt entries zero/trainable
    double source_val_acc = 0;
};

struct TrainResult {
    ParamSet<float> params;
    std::optional<double> best_val_auc;
    int best_epoch = -1;
};

struct SelectionEntry {
    Selection sel;
    std::string split;
};

struct SelectionManifest {
    int k = 0;
    std::string mil_fingerprint;
    std::vector<SelectionEntry> entries;
};

/// Desk-scale stand-in for ImageNet pretraining: backbone + throwaway linear
/// head, CE on source patch classes. Returned backbone weights are frozen.
PretrainResult pretrain_backbone(const Corpus& corpus, const BackboneConfig& cfg,
                                 std::uint64_t seed, int epochs, double lr);

std::vector<Tensor<float>> extract_bag_features(const std::vector<Tensor<float>>& patches,
                                                const ParamSet<float>& params,
                                                const BackboneConfig& cfg, PromptMode mode);
FeatureStore extract_features(const Corpus& corpus, const ParamSet<float>& params,
                              const BackboneConfig& cfg, PromptMode mode,
                              const std::string& fingerprint);
void write_feature_store(const FeatureStore& store, const std::filesystem::path& dir);
FeatureStore read_feature_store(const std::filesystem::path& dir);

TrainResult stage1_train_mil(const FeatureStore& features, const ExperimentConfig& cfg);

SelectionManifest stage2_select(const FeatureStore& features, const ParamSet<float>& mil,
                                int k, const std::string& mil_fingerprint = "");
void write_selection_manifest(const SelectionManifest& m, const std::filesystem::path& path);
SelectionManifest read_selection_manifest(const std::filesystem::path& path);

/// Stage III. finetune_all=false: prompts + MIL trainable, backbone frozen
/// (audited bit-exactly). finetune_all=true: whole backbone + MIL trainable,
/// no prompt blocks.
TrainResult stage3_tune(const Corpus& corpus, const SelectionManifest& manifest,
                        const ParamSet<float>& backbone, const BackboneConfig& cfg,
                        const ParamSet<float>* mil_warm, const ExperimentConfig& ecfg,
                        bool finetune_all);

Checkpoint make_checkpoint(std::string stage, const ParamSet<float>& params,
                           const BackboneConfig& bb, const ExperimentConfig& cfg,
                           const TrainResult* train = nullptr);

/// Bag probabilities + metrics on one split. `prompt_override` replaces the
/// method-implied prompt mode (used by the identity-equivalence check).
MetricsRecord evaluate(const Checkpoint& ckpt, const Corpus& corpus, const std::string& split,
                       std::optional<PromptMode> prompt_override = std::nullopt);

/// Per-bag positive probabilities, same model wiring as evaluate().
std::vector<double> bag_probabilities(const Checkpoint& ckpt, const std::vector<PatchBag>& bags,
                                      std::optional<PromptMode> prompt_override = std::nullopt);

struct MethodRun {
    Checkpoint final_ckpt;
    MetricsRecord val, test;
    std::optional<double> stage1_val_auc;
};

/// End-to-end run of one method on an in-memory corpus (pretrain is passed in
/// so sweeps can share it).
MethodRun run_method(const Corpus& corpus, const PretrainResult& pretrained,
                     const BackboneConfig& bb, const ExperimentConfig& cfg);

struct AblateRequest {
    std::string axis;  // "k" | "sites"
    std::vector<int> values;
    std::vector<std::uint64_t> seeds;
};
std::vector<MetricsRecord> ablate(const Corpus& corpus, const AblateRequest& req,
                                  ExperimentConfig cfg);

void append_metrics_csv(const std::filesystem::path& path,
                        const std::vector<MetricsRecord>& rows);

/// Text table grouped by method (means over seeds per split), plus the
/// val-test AUC gap comparison between rps_ft and rps_pt when both exist.
std::string report_from_csv(const std::filesystem::path& csv);

}  // namespace pmil
