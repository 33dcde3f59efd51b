#pragma once

// Central-difference gradient checker. Always runs in double regardless of
// the training precision; the analytic side replays the same graph builder
// on a double tape.

#include <algorithm>
#include <cstdint>
#include <functional>

#include "pmil/params.hpp"
#include "pmil/rng.hpp"
#include "pmil/tape.hpp"

namespace pmil {

/// Builds the loss graph for one evaluation. `vars` maps each parameter name
/// to its leaf on the tape; trainable entries carry requires_grad.
using GradCheckFn =
    std::function<int(Tape<double>&, const std::map<std::string, int>& vars)>;

namespace detail {

inline double eval_loss(const GradCheckFn& f, const ParamSet<double>& params) {
    Tape<double> tape;
    std::map<std::string, int> vars;
    for (const auto& [name, t] : params.entries) {
        Tensor<double> leaf = t;
        leaf.requires_grad = false;  // forward only
        leaf.clear_grad();
        vars[name] = tape.leaf(std::move(leaf));
    }
    const int loss = f(tape, vars);
    const double v = tape.value(loss).data[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is non-finite");
    return v;
}

}  // namespace detail

/// Max over checked coordinates of
///   |g_a - g_n| / max(|g_a|, |g_n|, 1e-6)
/// with g_n = (f(t+eps) - f(t-eps)) / (2 eps). When max_coords_per_param > 0,
/// that many coordinates are sampled per parameter instead of all of them.
///
/// The 1e-6 denominator floor is an absolute-tolerance guard for coordinates
/// whose true gradient is ~0: the central difference of an O(1) loss carries
/// ~|f|*2^-52 / (2 eps) ~ 1e-12 of round-off at eps=1e-4, so a floor at the
/// round-off boundary (1e-8) would report that noise as relative error 1e-4
/// on dead coordinates while real gradients sit many orders above the floor.
inline double grad_check(const GradCheckFn& f, ParamSet<double> params, double eps,
                         int max_coords_per_param = 0, std::uint64_t seed = 0) {
    if (!(eps > 0)) throw ContractError("grad_check: eps must be > 0");

    // analytic pass
    Tape<double> tape;
    std::map<std::string, int> vars;
    for (const auto& [name, t] : params.entries) {
        Tensor<double> leaf = t;
        leaf.clear_grad();
        vars[name] = tape.leaf(std::move(leaf));
    }
    const int loss = f(tape, vars);
    if (tape.value(loss).numel() != 1) throw ContractError("grad_check: loss must be scalar");
    if (!std::isfinite(tape.value(loss).data[0]))
        throw NumericError("grad_check: loss is non-finite");
    tape.backward(loss);

    Rng rng(seed, "gradcheck");
    double worst = 0;
    for (auto& [name, t] : params.entries) {
        if (!t.requires_grad) continue;
        const auto& analytic = tape.grad(vars[name]);
        std::vector<std::size_t> coords;
        const std::size_t n = t.numel();
        if (max_coords_per_param <= 0 || n <= static_cast<std::size_t>(max_coords_per_param)) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            auto perm = rng.permutation(static_cast<int>(n));
            coords.assign(perm.begin(), perm.begin() + max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t i : coords) {
            const double saved = t.data[i];
            t.data[i] = saved + eps;
            const double fp = detail::eval_loss(f, params);
            t.data[i] = saved - eps;
            const double fm = detail::eval_loss(f, params);
            t.data[i] = saved;
            const double gn = (fp - fm) / (2 * eps);
            const double ga = analytic[i];
            const double denom = std::max({std::abs(ga), std::abs(gn), 1e-6});
            worst = std::max(worst, std::abs(ga - gn) / denom);
        }
    }
    return worst;
}

}  // namespace pmil
