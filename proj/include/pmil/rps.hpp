#pragma once

// Representative patch selection: rank a bag's patches by attention weight
// and keep the top-K as a smaller bag with the original label. Ties break
// toward the smaller original index, which makes selections deterministic
// and K-monotone.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "pmil/data.hpp"
#include "pmil/mil.hpp"

namespace pmil {

struct Selection {
    std::string bag_id;
    int label = 0;
    int k_requested = 0;
    std::vector<int> kept_indices;  // strictly ascending
    std::vector<float> scores;      // attention weights of ALL patches, by index
};

/// Top-k indices of `scores`, ties by smaller index, returned ascending.
inline std::vector<int> top_k_indices(const std::vector<float>& scores, int k) {
    if (k < 1) throw ContractError("top_k_indices: k must be >= 1");
    const int n = static_cast<int>(scores.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](int a, int b) { return scores[a] > scores[b]; });
    order.resize(std::min(k, n));
    std::sort(order.begin(), order.end());
    return order;
}

inline Selection select_representatives(const FeatureBag& bag, const ParamSet<float>& mil,
                                        int k) {
    if (bag.features.empty()) throw ContractError("select_representatives: empty bag");
    if (k < 1) throw ContractError("select_representatives: k must be >= 1");
    Selection sel;
    sel.bag_id = bag.bag_id;
    sel.label = bag.label;
    sel.k_requested = k;
    sel.scores = attention_scores(bag.features, mil);
    sel.kept_indices = top_k_indices(sel.scores, k);
    return sel;
}

inline PatchBag materialize_selected_bag(const Selection& sel, const PatchBag& raw) {
    if (sel.kept_indices.empty()) throw ContractError("materialize_selected_bag: empty selection");
    PatchBag out;
    out.bag_id = sel.bag_id + "#rps" + std::to_string(sel.k_requested);
    out.label = sel.label;
    out.provenance = sel.bag_id;
    for (int i : sel.kept_indices) {
        if (i < 0 || i >= static_cast<int>(raw.patches.size()))
            throw ContractError("materialize_selected_bag: index out of range");
        out.patches.push_back(raw.patches[i]);
        if (!raw.instance_truth.empty()) out.instance_truth.push_back(raw.instance_truth[i]);
    }
    return out;
}

}  // namespace pmil
