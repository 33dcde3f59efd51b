#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pmil/tensor.hpp"

namespace pmil {

/// A labeled bag of raw patches. instance_truth is generator-only ground
/// truth; it is stored in a sidecar file and never fed to training code.
struct PatchBag {
    std::string bag_id;
    int label = 0;  // 0 negative, 1 positive
    std::vector<Tensor<float>> patches;
    std::vector<std::uint8_t> instance_truth;
    std::string provenance;  // source bag_id when this bag is a selection
};

struct FeatureBag {
    std::string bag_id;
    int label = 0;
    std::vector<Tensor<float>> features;
    std::string extractor_fingerprint;
};

/// One labeled patch of the source-domain pretraining set.
struct SourcePatch {
    Tensor<float> patch;
    int label = 0;
};

/// Defaults are calibrated so the default corpus is hard enough that the
/// frozen baseline leaves headroom (weak texture separation, per-patch
/// contrast spread, shifted target domain) while val/test are large enough
/// that small AUC differences are resolvable (16/40 bags = 64/400 ranking
/// pairs).
struct CorpusSpec {
    int num_train_bags = 40;
    int num_val_bags = 16;
    int num_test_bags = 40;
    int patches_per_bag = 64;
    int num_source_patches = 256;
    double rho = 0.08;  // positive-instance fraction in positive bags
    int height = 8;
    int width = 8;
    double delta = 1.0;           // texture separation between classes
    double noise_sigma = 1.5;     // base texture noise
    double contrast_sigma = 0.8;  // log-normal per-patch contrast (stain) spread
    std::array<double, 3> shift_gain = {1.4, 0.7, 1.0};
    std::array<double, 3> shift_offset = {0.3, -0.3, 0.0};
    std::uint64_t seed = 1;

    void validate() const {
        if (num_train_bags < 0 || num_val_bags < 0 || num_test_bags < 0)
            throw ContractError("corpus spec: bag counts must be >= 0");
        if (patches_per_bag < 1) throw ContractError("corpus spec: patches_per_bag >= 1");
        if (!(rho > 0) || rho > 1) throw ContractError("corpus spec: rho must be in (0,1]");
        if (rho * patches_per_bag < 1)
            throw ContractError("corpus spec: rho * patches_per_bag must be >= 1");
        if (height < 1 || width < 1) throw ContractError("corpus spec: patch size >= 1");
        if (noise_sigma < 0) throw ContractError("corpus spec: noise_sigma >= 0");
        if (contrast_sigma < 0) throw ContractError("corpus spec: contrast_sigma >= 0");
    }
};

struct Corpus {
    CorpusSpec spec;
    std::vector<PatchBag> train, val, test;
    std::vector<SourcePatch> source;

    const std::vector<PatchBag>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw ContractError("unknown split: " + name);
    }
};

}  // namespace pmil
