#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pmil/tensor.hpp"

namespace pmil {

template <typename S>
using GradMap = std::map<std::string, std::vector<S>>;

/// Named parameter tensors. std::map keeps iteration lexicographic, so every
/// walk over the set is deterministic. requires_grad on each tensor is the
/// trainable flag.
template <typename S>
struct ParamSet {
    std::map<std::string, Tensor<S>> entries;

    void add(const std::string& name, Tensor<S> t, bool trainable) {
        if (entries.count(name)) throw ContractError("duplicate parameter name: " + name);
        t.requires_grad = trainable;
        entries.emplace(name, std::move(t));
    }

    Tensor<S>& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return entries.count(name) != 0; }

    std::size_t trainable_scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries)
            if (t.requires_grad) n += t.numel();
        return n;
    }

    void set_all_trainable(bool flag) {
        for (auto& [name, t] : entries) t.requires_grad = flag;
    }

    template <typename T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        for (const auto& [name, t] : entries) out.entries.emplace(name, t.template cast<T>());
        return out;
    }
};

/// Adam with bias correction; weight decay enters as classic loss-coupled L2
/// (g += wd * theta) before the moment updates. State exists only for
/// trainable entries and frozen entries are never written.
template <typename S>
struct AdamState {
    S lr = S(1e-4), beta1 = S(0.9), beta2 = S(0.999), eps = S(1e-8), weight_decay = S(0);
    long t = 0;
    std::map<std::string, std::vector<S>> m, v;
};

template <typename S>
void adam_step(ParamSet<S>& params, const GradMap<S>& grads, AdamState<S>& st) {
    st.t += 1;
    const S bc1 = S(1) - std::pow(st.beta1, static_cast<S>(st.t));
    const S bc2 = S(1) - std::pow(st.beta2, static_cast<S>(st.t));
    for (auto& [name, p] : params.entries) {
        if (!p.requires_grad) continue;
        auto git = grads.find(name);
        if (git == grads.end())
            throw ContractError("adam_step: missing gradient for trainable param " + name);
        const auto& g = git->second;
        if (g.size() != p.numel())
            throw DimensionError("adam_step: gradient size mismatch for " + name);
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.size() != p.numel()) m.assign(p.numel(), S(0));
        if (v.size() != p.numel()) v.assign(p.numel(), S(0));
        for (std::size_t i = 0; i < p.numel(); ++i) {
            S gi = g[i] + st.weight_decay * p.data[i];
            m[i] = st.beta1 * m[i] + (S(1) - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (S(1) - st.beta2) * gi * gi;
            const S mhat = m[i] / bc1;
            const S vhat = v[i] / bc2;
            p.data[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

}  // namespace pmil
