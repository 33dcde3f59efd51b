#pragma once

// Feature extractor: conv stem + B residual blocks + GAP, with optional
// squeeze-excitation style prompt blocks gating chosen residual blocks.
// Block i: y = ReLU(f_i + conv_i(f_i)); at a prompt site the output is
// channel-scaled by p_i = sigmoid(W2 ReLU(W1 GAP(f_i))), where the gate is
// computed from the block INPUT.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pmil/params.hpp"
#include "pmil/rng.hpp"
#include "pmil/tape.hpp"

namespace pmil {

struct BackboneConfig {
    int in_channels = 3;
    int channels = 32;
    int height = 8;
    int width = 8;
    int num_blocks = 4;
    std::vector<int> prompt_sites;  // 1-based block indices
    int reduction = 4;
    std::string preset_name;

    void validate() const {
        if (channels < 1 || num_blocks < 1 || reduction < 1)
            throw ConfigError("backbone config: counts must be >= 1");
        if (channels % reduction != 0)
            throw ConfigError("backbone config: reduction must divide channels");
        for (int s : prompt_sites)
            if (s < 1 || s > num_blocks)
                throw ConfigError("backbone config: prompt site " + std::to_string(s) +
                                  " outside 1.." + std::to_string(num_blocks));
    }

    static BackboneConfig preset(const std::string& name) {
        BackboneConfig cfg;
        cfg.preset_name = name;
        if (name == "resnet18-like") {
            cfg.num_blocks = 4;
            cfg.prompt_sites = {3, 4};
        } else if (name == "resnet50-like") {
            cfg.num_blocks = 6;
            cfg.prompt_sites = {1, 2, 3, 4, 5, 6};
        } else {
            throw ConfigError("unknown backbone preset: " + name);
        }
        return cfg;
    }
};

inline std::string block_weight_name(int i) {
    return "backbone.block" + std::to_string(i) + ".conv.w";
}
inline std::string block_bias_name(int i) {
    return "backbone.block" + std::to_string(i) + ".conv.b";
}
inline std::string prompt_w1_name(int site) {
    return "prompt.site" + std::to_string(site) + ".w1";
}
inline std::string prompt_w2_name(int site) {
    return "prompt.site" + std::to_string(site) + ".w2";
}

/// How prompt gates enter the forward pass. `kForcedOnes` exists for the
/// prompt-identity equivalence check and `kForcedValue` for the zero-init
/// half-scaling check.
struct PromptMode {
    enum Kind { kOff, kActive, kForcedValue } kind = kOff;
    double forced_value = 1.0;

    static PromptMode off() { return {kOff, 1.0}; }
    static PromptMode active() { return {kActive, 1.0}; }
    static PromptMode forced(double v) { return {kForcedValue, v}; }
};

/// Kaiming gaussian conv init, zero biases, everything frozen. Prompt gates
/// start at exactly 0.5 everywhere (W2 = 0) and are trainable; W1 carries
/// small random weights because a doubly-zero MLP has identically zero
/// gradients through the inner ReLU and could never leave the saddle.
template <typename S>
ParamSet<S> backbone_init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    ParamSet<S> ps;
    auto gauss_fill = [&rng](Tensor<S>& t, double sigma) {
        for (auto& x : t.data) x = static_cast<S>(rng.gaussian(0.0, sigma));
    };
    {
        Tensor<S> w = Tensor<S>::zeros({cfg.channels, cfg.in_channels, 3, 3});
        gauss_fill(w, std::sqrt(2.0 / (cfg.in_channels * 9)));
        ps.add("backbone.stem.w", std::move(w), false);
        ps.add("backbone.stem.b", Tensor<S>::zeros({cfg.channels}), false);
    }
    for (int i = 1; i <= cfg.num_blocks; ++i) {
        Tensor<S> w = Tensor<S>::zeros({cfg.channels, cfg.channels, 3, 3});
        gauss_fill(w, std::sqrt(2.0 / (cfg.channels * 9)));
        ps.add(block_weight_name(i), std::move(w), false);
        ps.add(block_bias_name(i), Tensor<S>::zeros({cfg.channels}), false);
    }
    const int hidden = cfg.channels / cfg.reduction;
    for (int s : cfg.prompt_sites) {
        Tensor<S> w1 = Tensor<S>::zeros({hidden, cfg.channels});
        gauss_fill(w1, std::sqrt(2.0 / cfg.channels));
        ps.add(prompt_w1_name(s), std::move(w1), true);
        ps.add(prompt_w2_name(s), Tensor<S>::zeros({cfg.channels, hidden}), true);
    }
    return ps;
}

/// Taped forward pass; returns the post-GAP feature var (length C).
template <typename S>
int backbone_forward_taped(Tape<S>& tape, int patch, const std::map<std::string, int>& vars,
                           const BackboneConfig& cfg, PromptMode mode = PromptMode::off()) {
    auto var = [&vars](const std::string& name) {
        auto it = vars.find(name);
        if (it == vars.end()) throw ConfigError("backbone_forward: missing param " + name);
        return it->second;
    };
    const bool prompts = mode.kind != PromptMode::kOff;
    int f = tape.relu(tape.conv3x3(patch, var("backbone.stem.w"), var("backbone.stem.b")));
    for (int i = 1; i <= cfg.num_blocks; ++i) {
        int y = tape.relu(tape.add(f, tape.conv3x3(f, var(block_weight_name(i)),
                                                   var(block_bias_name(i)))));
        const bool site = prompts && std::find(cfg.prompt_sites.begin(), cfg.prompt_sites.end(),
                                               i) != cfg.prompt_sites.end();
        if (site) {
            int p;
            if (mode.kind == PromptMode::kForcedValue) {
                p = tape.leaf(Tensor<S>::full({cfg.channels}, static_cast<S>(mode.forced_value)));
            } else {
                const int w1 = var(prompt_w1_name(i));
                const int w2 = var(prompt_w2_name(i));
                p = tape.sigmoid(tape.linear(tape.relu(tape.linear(tape.gap(f), w1)), w2));
            }
            f = tape.channel_scale(y, p);
        } else {
            f = y;
        }
    }
    return tape.gap(f);
}

/// No-grad forward: same graph on a throwaway tape, so values are
/// bit-identical to the taped path.
template <typename S>
Tensor<S> backbone_forward(const Tensor<S>& patch, const ParamSet<S>& params,
                           const BackboneConfig& cfg, PromptMode mode = PromptMode::off()) {
    Tape<S> tape;
    std::map<std::string, int> vars;
    for (const auto& [name, t] : params.entries) {
        Tensor<S> leaf = t;
        leaf.requires_grad = false;
        leaf.clear_grad();
        vars[name] = tape.leaf(std::move(leaf));
    }
    Tensor<S> p = patch;
    p.requires_grad = false;
    const int out = backbone_forward_taped(tape, tape.leaf(std::move(p)), vars, cfg, mode);
    return tape.value(out);
}

}  // namespace pmil
