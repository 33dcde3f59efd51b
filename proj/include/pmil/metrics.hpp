#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pmil/tensor.hpp"

namespace pmil {

struct MetricsRecord {
    std::optional<double> auc;  // nullopt when only one class is present
    double f1 = 0;
    double acc = 0;
    int n_bags = 0;
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    std::string split;
    std::string method;
    std::string backbone_preset;
    int k = 0;
    int prompt_sites = 0;
};

/// Mann-Whitney AUC via sorted midranks; ties contribute half. Returns
/// nullopt when labels are single-class (undefined, never 0).
inline std::optional<double> auc(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("auc: length mismatch");
    const int n = static_cast<int>(scores.size());
    long p = 0;
    for (int y : labels) p += (y != 0);
    const long q = n - p;
    if (p == 0 || q == 0) return std::nullopt;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](int a, int b) { return scores[a] < scores[b]; });
    // midrank sum over positives
    double rank_sum_pos = 0;
    int i = 0;
    while (i < n) {
        int j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i) + j + 1) / 2.0;  // 1-based
        for (int t = i; t < j; ++t)
            if (labels[order[t]] != 0) rank_sum_pos += midrank;
        i = j;
    }
    const double u = rank_sum_pos - static_cast<double>(p) * (p + 1) / 2.0;
    return u / (static_cast<double>(p) * static_cast<double>(q));
}

struct F1Acc {
    double f1 = 0;
    double acc = 0;
};

/// Threshold at 0.5 by default (argmax of a 2-class softmax). F1 on the
/// positive class, 0 when precision + recall is 0.
inline F1Acc f1_acc(const std::vector<double>& scores, const std::vector<int>& labels,
                    double threshold = 0.5) {
    if (scores.size() != labels.size()) throw DimensionError("f1_acc: length mismatch");
    if (scores.empty()) throw ContractError("f1_acc: empty input");
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        const bool pos = labels[i] != 0;
        if (pred && pos) ++tp;
        else if (pred && !pos) ++fp;
        else if (!pred && pos) ++fn;
        else ++tn;
    }
    F1Acc out;
    out.acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    const double denom = 2.0 * tp + fp + fn;
    out.f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    return out;
}

/// Diagnostic: fraction of the top-ceil(rho*n) attention-ranked patches that
/// are true positive instances. Positive bags only; reads the quarantined
/// truth sidecar.
inline double attention_localization(const std::vector<float>& alphas,
                                     const std::vector<std::uint8_t>& truth, double rho) {
    if (alphas.size() != truth.size()) throw DimensionError("attention_localization: length mismatch");
    bool any = false;
    for (auto t : truth) any = any || (t != 0);
    if (!any) throw ContractError("attention_localization: negative bag");
    const int n = static_cast<int>(alphas.size());
    const int k = std::max(1, static_cast<int>(std::ceil(rho * n)));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&alphas](int a, int b) { return alphas[a] > alphas[b]; });
    int hits = 0;
    for (int i = 0; i < std::min(k, n); ++i) hits += (truth[order[i]] != 0);
    return static_cast<double>(hits) / std::min(k, n);
}

inline std::string metrics_csv_header() {
    return "split,seed,method,backbone_preset,K,prompt_sites,auc,f1,acc,n_bags";
}

std::string metrics_csv_row(const MetricsRecord& r);

}  // namespace pmil
