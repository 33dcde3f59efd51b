#pragma once

// Gated-attention MIL classifier: per-patch scores
//   a_k = w^T (tanh(V1 h_k) . sigmoid(V2 h_k)),
// softmax over the bag, attention-weighted pooling, and a linear 2-class
// head over the bag feature.

#include <map>
#include <string>
#include <vector>

#include "pmil/params.hpp"
#include "pmil/rng.hpp"
#include "pmil/tape.hpp"

namespace pmil {

struct MilConfig {
    int hidden = 128;     // M
    int feature_dim = 0;  // L, matches incoming feature width
};

template <typename S>
struct AttentionResult {
    std::vector<S> alphas;
    Tensor<S> bag_feature;
    Tensor<S> logits;  // [2]
};

/// Attention weights gaussian with sigma 1/sqrt(fan_in); head starts at zero
/// so an untrained classifier scores every bag 0.5. All entries trainable.
template <typename S>
void mil_init(ParamSet<S>& ps, const MilConfig& cfg, Rng& rng) {
    if (cfg.feature_dim < 1 || cfg.hidden < 1)
        throw ConfigError("mil config: dimensions must be >= 1");
    auto gauss = [&rng](Tensor<S>& t, double sigma) {
        for (auto& x : t.data) x = static_cast<S>(rng.gaussian(0.0, sigma));
    };
    const double s_in = 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim));
    const double s_hid = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    Tensor<S> v1 = Tensor<S>::zeros({cfg.hidden, cfg.feature_dim});
    Tensor<S> v2 = Tensor<S>::zeros({cfg.hidden, cfg.feature_dim});
    Tensor<S> w = Tensor<S>::zeros({cfg.hidden});
    gauss(v1, s_in);
    gauss(v2, s_in);
    gauss(w, s_hid);
    ps.add("mil.v1", std::move(v1), true);
    ps.add("mil.v2", std::move(v2), true);
    ps.add("mil.w", std::move(w), true);
    ps.add("mil.head.w", Tensor<S>::zeros({2, cfg.feature_dim}), true);
    ps.add("mil.head.b", Tensor<S>::zeros({2}), true);
}

template <typename S>
int attention_scores_taped(Tape<S>& tape, const std::vector<int>& feats,
                           const std::map<std::string, int>& vars) {
    if (feats.empty()) throw ContractError("attention_scores: empty bag");
    const int v1 = vars.at("mil.v1"), v2 = vars.at("mil.v2"), w = vars.at("mil.w");
    std::vector<int> raw;
    raw.reserve(feats.size());
    for (int h : feats) {
        const int gate = tape.mul(tape.tanh(tape.linear(h, v1)),
                                  tape.sigmoid(tape.linear(h, v2)));
        raw.push_back(tape.dot(w, gate));
    }
    return tape.softmax(tape.concat(raw));
}

template <typename S>
struct TapedBagResult {
    int alphas, bag_feature, logits;
};

template <typename S>
TapedBagResult<S> classify_bag_taped(Tape<S>& tape, const std::vector<int>& feats,
                                     const std::map<std::string, int>& vars) {
    const int alphas = attention_scores_taped(tape, feats, vars);
    const int bag = tape.bag_pool(feats, alphas);
    const int logits = tape.linear(bag, vars.at("mil.head.w"), vars.at("mil.head.b"));
    return {alphas, bag, logits};
}

namespace detail {
template <typename S>
Tape<S> make_mil_tape(const ParamSet<S>& params, const std::vector<Tensor<S>>& features,
                      std::map<std::string, int>& vars, std::vector<int>& feat_vars) {
    Tape<S> tape;
    for (const auto& [name, t] : params.entries) {
        if (name.rfind("mil.", 0) != 0) continue;
        Tensor<S> leaf = t;
        leaf.requires_grad = false;
        leaf.clear_grad();
        vars[name] = tape.leaf(std::move(leaf));
    }
    for (const auto& f : features) {
        Tensor<S> leaf = f;
        leaf.requires_grad = false;
        leaf.clear_grad();
        feat_vars.push_back(tape.leaf(std::move(leaf)));
    }
    return tape;
}
}  // namespace detail

template <typename S>
std::vector<S> attention_scores(const std::vector<Tensor<S>>& features,
                                const ParamSet<S>& params) {
    std::map<std::string, int> vars;
    std::vector<int> feat_vars;
    Tape<S> tape = detail::make_mil_tape(params, features, vars, feat_vars);
    const int alphas = attention_scores_taped(tape, feat_vars, vars);
    return tape.value(alphas).data;
}

/// F = sum_k alphas[k] h_k, accumulated in ascending original index.
template <typename S>
Tensor<S> bag_pool(const std::vector<Tensor<S>>& features, const std::vector<S>& alphas) {
    if (features.size() != alphas.size()) throw DimensionError("bag_pool: length mismatch");
    if (features.empty()) throw ContractError("bag_pool: empty bag");
    Tensor<S> out = Tensor<S>::zeros(features[0].shape);
    for (std::size_t k = 0; k < features.size(); ++k) {
        if (!features[k].same_shape(out)) throw DimensionError("bag_pool: ragged features");
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.data[i] += alphas[k] * features[k].data[i];
    }
    return out;
}

template <typename S>
AttentionResult<S> classify_bag(const std::vector<Tensor<S>>& features,
                                const ParamSet<S>& params) {
    std::map<std::string, int> vars;
    std::vector<int> feat_vars;
    Tape<S> tape = detail::make_mil_tape(params, features, vars, feat_vars);
    const auto r = classify_bag_taped(tape, feat_vars, vars);
    AttentionResult<S> out;
    out.alphas = tape.value(r.alphas).data;
    out.bag_feature = tape.value(r.bag_feature);
    out.logits = tape.value(r.logits);
    return out;
}

/// softmax(logits)[1], the positive-class probability.
template <typename S>
S positive_probability(const Tensor<S>& logits) {
    const S m = std::max(logits.data[0], logits.data[1]);
    const S e0 = std::exp(logits.data[0] - m), e1 = std::exp(logits.data[1] - m);
    return e1 / (e0 + e1);
}

}  // namespace pmil
