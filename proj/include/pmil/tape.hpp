#pragma once

// Reverse-mode autodiff over whole-tensor ops. The tape records one node per
// op; node ids are topologically ordered by construction, and backward() walks
// them once in reverse. Tensors are immutable once recorded.

#include <cmath>
#include <functional>
#include <vector>

#include "pmil/kernels.hpp"
#include "pmil/tensor.hpp"

namespace pmil {

namespace act {
template <typename S>
inline S relu(S x) { return x > S(0) ? x : S(0); }
template <typename S>
inline S sigmoid(S x) { return S(1) / (S(1) + std::exp(-x)); }
template <typename S>
inline S tanh(S x) { return std::tanh(x); }
}  // namespace act

template <typename S>
inline void check_finite(const std::vector<S>& v, const char* what) {
    for (S x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

template <typename S>
class Tape {
  public:
    using Var = int;

    Var leaf(Tensor<S> value) {
        Node n;
        n.val = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    const Tensor<S>& value(Var v) const { return nodes_[v].val; }
    std::vector<S>& grad(Var v) { return nodes_[v].val.grad; }
    bool requires_grad(Var v) const { return nodes_[v].val.requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        if (nodes_[loss].val.numel() != 1)
            throw ContractError("backward requires a scalar loss node");
        for (auto& n : nodes_)
            if (n.val.requires_grad) n.val.ensure_grad();
        nodes_[loss].val.grad.assign(1, S(1));
        for (int i = loss; i >= 0; --i)
            if (nodes_[i].back && nodes_[i].val.requires_grad) nodes_[i].back(*this);
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (!ta.same_shape(tb)) throw DimensionError("add: shape mismatch");
        Tensor<S> out = Tensor<S>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return record(std::move(out), {a, b}, [a, b](Tape& t) {
            const auto& g = t.g(t.out_);
            if (t.requires_grad(a)) t.accum(a, g);
            if (t.requires_grad(b)) t.accum(b, g);
        });
    }

    Var mul(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (!ta.same_shape(tb)) throw DimensionError("mul: shape mismatch");
        Tensor<S> out = Tensor<S>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return record(std::move(out), {a, b}, [a, b](Tape& t) {
            const auto& g = t.g(t.out_);
            if (t.requires_grad(a)) {
                auto& ga = t.grad(a);
                const auto& vb = t.val(b).data;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.requires_grad(b)) {
                auto& gb = t.grad(b);
                const auto& va = t.val(a).data;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    Var relu(Var a) { return unary(a, act::relu<S>, [](S x, S) { return x > S(0) ? S(1) : S(0); }); }
    Var sigmoid(Var a) { return unary(a, act::sigmoid<S>, [](S, S y) { return y * (S(1) - y); }); }
    Var tanh(Var a) { return unary(a, act::tanh<S>, [](S, S y) { return S(1) - y * y; }); }

    Var sum(Var a) {
        S acc = 0;
        for (S x : val(a).data) acc += x;
        return record(Tensor<S>::from({1}, {acc}), {a}, [a](Tape& t) {
            if (!t.requires_grad(a)) return;
            const S g = t.g(t.out_)[0];
            auto& ga = t.grad(a);
            for (auto& x : ga) x += g;
        });
    }

    Var dot(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.numel() != tb.numel()) throw DimensionError("dot: length mismatch");
        S acc = 0;
        for (std::size_t i = 0; i < ta.numel(); ++i) acc += ta.data[i] * tb.data[i];
        return record(Tensor<S>::from({1}, {acc}), {a, b}, [a, b](Tape& t) {
            const S g = t.g(t.out_)[0];
            if (t.requires_grad(a)) {
                auto& ga = t.grad(a);
                const auto& vb = t.val(b).data;
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * vb[i];
            }
            if (t.requires_grad(b)) {
                auto& gb = t.grad(b);
                const auto& va = t.val(a).data;
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * va[i];
            }
        });
    }

    // ---- layers ----

    /// x: [N] (or any shape flattened to N), w: [M,N], optional b: [M] -> [M]
    Var linear(Var x, Var w, Var b = -1) {
        const auto& tx = val(x);
        const auto& tw = val(w);
        if (tw.shape.size() != 2) throw DimensionError("linear: weight must be 2-d");
        const int m = tw.shape[0], n = tw.shape[1];
        if (static_cast<std::size_t>(n) != tx.numel())
            throw DimensionError("linear: input length " + std::to_string(tx.numel()) +
                                 " vs weight cols " + std::to_string(n));
        if (b >= 0 && static_cast<int>(val(b).numel()) != m)
            throw DimensionError("linear: bias length mismatch");
        Tensor<S> out = Tensor<S>::zeros({m});
        for (int i = 0; i < m; ++i) {
            S acc = b >= 0 ? val(b).data[i] : S(0);
            const S* wr = tw.data.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) acc += wr[j] * tx.data[j];
            out.data[i] = acc;
        }
        std::vector<Var> ins{x, w};
        if (b >= 0) ins.push_back(b);
        return record(std::move(out), ins, [x, w, b, m, n](Tape& t) {
            const auto& g = t.g(t.out_);
            const auto& vw = t.val(w).data;
            const auto& vx = t.val(x).data;
            if (t.requires_grad(x)) {
                auto& gx = t.grad(x);
                for (int i = 0; i < m; ++i) {
                    const S* wr = vw.data() + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gx[j] += g[i] * wr[j];
                }
            }
            if (t.requires_grad(w)) {
                auto& gw = t.grad(w);
                for (int i = 0; i < m; ++i) {
                    S* gr = gw.data() + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gr[j] += g[i] * vx[j];
                }
            }
            if (b >= 0 && t.requires_grad(b)) {
                auto& gb = t.grad(b);
                for (int i = 0; i < m; ++i) gb[i] += g[i];
            }
        });
    }

    /// x: [C_in,H,W], w: [C_out,C_in,3,3], optional b: [C_out] -> [C_out,H,W]
    Var conv3x3(Var x, Var w, Var b = -1) {
        const auto& tx = val(x);
        const auto& tw = val(w);
        if (tx.shape.size() != 3) throw DimensionError("conv3x3: input must be [C,H,W]");
        if (tw.shape.size() != 4 || tw.shape[2] != 3 || tw.shape[3] != 3)
            throw DimensionError("conv3x3: weight must be [C_out,C_in,3,3]");
        const int ci = tx.shape[0], h = tx.shape[1], wd = tx.shape[2], co = tw.shape[0];
        if (tw.shape[1] != ci)
            throw DimensionError("conv3x3: input has " + std::to_string(ci) +
                                 " channels, weight expects " + std::to_string(tw.shape[1]));
        if (b >= 0 && static_cast<int>(val(b).numel()) != co)
            throw DimensionError("conv3x3: bias length mismatch");
        Tensor<S> out = Tensor<S>::zeros({co, h, wd});
        kernels::conv3x3_forward(tx.data.data(), tw.data.data(),
                                 b >= 0 ? val(b).data.data() : nullptr, out.data.data(),
                                 ci, h, wd, co);
        std::vector<Var> ins{x, w};
        if (b >= 0) ins.push_back(b);
        return record(std::move(out), ins, [x, w, b, ci, h, wd, co](Tape& t) {
            const auto& g = t.g(t.out_);
            if (t.requires_grad(x))
                kernels::conv3x3_backward_input(g.data(), t.val(w).data.data(),
                                                t.grad(x).data(), ci, h, wd, co);
            if (t.requires_grad(w) || (b >= 0 && t.requires_grad(b)))
                kernels::conv3x3_backward_params(
                    t.val(x).data.data(), g.data(),
                    t.requires_grad(w) ? t.grad(w).data() : t.scratch(ci * co * 9),
                    (b >= 0 && t.requires_grad(b)) ? t.grad(b).data() : nullptr,
                    ci, h, wd, co);
        });
    }

    /// [C,H,W] -> [C], per-channel spatial mean
    Var gap(Var x) {
        const auto& tx = val(x);
        if (tx.shape.size() != 3) throw DimensionError("gap: input must be [C,H,W]");
        const int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
        Tensor<S> out = Tensor<S>::zeros({c});
        for (int i = 0; i < c; ++i) {
            S acc = 0;
            const S* p = tx.data.data() + static_cast<std::size_t>(i) * hw;
            for (int j = 0; j < hw; ++j) acc += p[j];
            out.data[i] = acc / static_cast<S>(hw);
        }
        return record(std::move(out), {x}, [x, c, hw](Tape& t) {
            if (!t.requires_grad(x)) return;
            const auto& g = t.g(t.out_);
            auto& gx = t.grad(x);
            for (int i = 0; i < c; ++i) {
                const S gi = g[i] / static_cast<S>(hw);
                S* p = gx.data() + static_cast<std::size_t>(i) * hw;
                for (int j = 0; j < hw; ++j) p[j] += gi;
            }
        });
    }

    /// out[c,h,w] = x[c,h,w] * p[c]
    Var channel_scale(Var x, Var p) {
        const auto& tx = val(x);
        const auto& tp = val(p);
        if (tx.shape.size() != 3) throw DimensionError("channel_scale: input must be [C,H,W]");
        const int c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
        if (static_cast<int>(tp.numel()) != c)
            throw DimensionError("channel_scale: scale length != channel count");
        Tensor<S> out = Tensor<S>::zeros(tx.shape);
        for (int i = 0; i < c; ++i) {
            const S s = tp.data[i];
            const S* xi = tx.data.data() + static_cast<std::size_t>(i) * hw;
            S* oi = out.data.data() + static_cast<std::size_t>(i) * hw;
            for (int j = 0; j < hw; ++j) oi[j] = xi[j] * s;
        }
        return record(std::move(out), {x, p}, [x, p, c, hw](Tape& t) {
            const auto& g = t.g(t.out_);
            if (t.requires_grad(x)) {
                auto& gx = t.grad(x);
                const auto& vp = t.val(p).data;
                for (int i = 0; i < c; ++i) {
                    const S s = vp[i];
                    const S* gi = g.data() + static_cast<std::size_t>(i) * hw;
                    S* o = gx.data() + static_cast<std::size_t>(i) * hw;
                    for (int j = 0; j < hw; ++j) o[j] += gi[j] * s;
                }
            }
            if (t.requires_grad(p)) {
                auto& gp = t.grad(p);
                const auto& vx = t.val(x).data;
                for (int i = 0; i < c; ++i) {
                    S acc = 0;
                    const S* gi = g.data() + static_cast<std::size_t>(i) * hw;
                    const S* xi = vx.data() + static_cast<std::size_t>(i) * hw;
                    for (int j = 0; j < hw; ++j) acc += gi[j] * xi[j];
                    gp[i] += acc;
                }
            }
        });
    }

    /// Stable softmax over a flat vector.
    Var softmax(Var x) {
        const auto& tx = val(x);
        const int n = static_cast<int>(tx.numel());
        if (n < 1) throw DimensionError("softmax: empty input");
        S mx = tx.data[0];
        for (S v : tx.data) mx = std::max(mx, v);
        Tensor<S> out = Tensor<S>::zeros(tx.shape);
        S z = 0;
        for (int i = 0; i < n; ++i) {
            out.data[i] = std::exp(tx.data[i] - mx);
            z += out.data[i];
        }
        for (int i = 0; i < n; ++i) out.data[i] /= z;
        return record(std::move(out), {x}, [x, n](Tape& t) {
            if (!t.requires_grad(x)) return;
            const auto& g = t.g(t.out_);
            const auto& y = t.val(t.out_).data;
            S inner = 0;
            for (int i = 0; i < n; ++i) inner += g[i] * y[i];
            auto& gx = t.grad(x);
            for (int i = 0; i < n; ++i) gx[i] += y[i] * (g[i] - inner);
        });
    }

    /// -log softmax(logits)[label], log-sum-exp form.
    Var ce_loss(Var logits, int label) {
        const auto& tl = val(logits);
        const int n = static_cast<int>(tl.numel());
        if (label < 0 || label >= n) throw ContractError("ce_loss: label out of range");
        S mx = tl.data[0];
        for (S v : tl.data) mx = std::max(mx, v);
        S z = 0;
        for (int i = 0; i < n; ++i) z += std::exp(tl.data[i] - mx);
        const S loss = std::log(z) + mx - tl.data[label];
        return record(Tensor<S>::from({1}, {loss}), {logits}, [logits, label, n](Tape& t) {
            if (!t.requires_grad(logits)) return;
            const S g = t.g(t.out_)[0];
            const auto& tl = t.val(logits).data;
            S mx = tl[0];
            for (S v : tl) mx = std::max(mx, v);
            S z = 0;
            for (int i = 0; i < n; ++i) z += std::exp(tl[i] - mx);
            auto& gl = t.grad(logits);
            for (int i = 0; i < n; ++i) {
                S p = std::exp(tl[i] - mx) / z;
                gl[i] += g * (p - (i == label ? S(1) : S(0)));
            }
        });
    }

    /// Stack flat inputs into one vector, in argument order.
    Var concat(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat: empty input list");
        std::size_t total = 0;
        for (Var p : parts) total += val(p).numel();
        Tensor<S> out = Tensor<S>::zeros({static_cast<int>(total)});
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& tp = val(p);
            for (std::size_t i = 0; i < tp.numel(); ++i) out.data[off + i] = tp.data[i];
            off += tp.numel();
        }
        return record(std::move(out), parts, [parts](Tape& t) {
            const auto& g = t.g(t.out_);
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t n = t.val(p).numel();
                if (t.requires_grad(p)) {
                    auto& gp = t.grad(p);
                    for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                }
                off += n;
            }
        });
    }

    /// F = sum_k alphas[k] * feats[k]; summation in ascending k so permuted
    /// bags re-sorted by original index reduce identically.
    Var bag_pool(const std::vector<Var>& feats, Var alphas) {
        if (feats.empty()) throw ContractError("bag_pool: empty bag");
        const int n = static_cast<int>(feats.size());
        if (static_cast<int>(val(alphas).numel()) != n)
            throw DimensionError("bag_pool: alpha count != feature count");
        const std::size_t l = val(feats[0]).numel();
        Tensor<S> out = Tensor<S>::zeros(val(feats[0]).shape);
        const auto& a = val(alphas).data;
        for (int k = 0; k < n; ++k) {
            const auto& f = val(feats[k]);
            if (f.numel() != l) throw DimensionError("bag_pool: ragged feature lengths");
            for (std::size_t i = 0; i < l; ++i) out.data[i] += a[k] * f.data[i];
        }
        std::vector<Var> ins = feats;
        ins.push_back(alphas);
        return record(std::move(out), ins, [feats, alphas, n, l](Tape& t) {
            const auto& g = t.g(t.out_);
            const auto& a = t.val(alphas).data;
            for (int k = 0; k < n; ++k) {
                if (t.requires_grad(feats[k])) {
                    auto& gf = t.grad(feats[k]);
                    for (std::size_t i = 0; i < l; ++i) gf[i] += a[k] * g[i];
                }
            }
            if (t.requires_grad(alphas)) {
                auto& ga = t.grad(alphas);
                for (int k = 0; k < n; ++k) {
                    const auto& f = t.val(feats[k]).data;
                    S acc = 0;
                    for (std::size_t i = 0; i < l; ++i) acc += g[i] * f[i];
                    ga[k] += acc;
                }
            }
        });
    }

  private:
    struct Node {
        Tensor<S> val;
        std::vector<int> inputs;
        std::function<void(Tape&)> back;
    };

    const Tensor<S>& val(Var v) const { return nodes_[v].val; }
    const std::vector<S>& g(Var v) const { return nodes_[v].val.grad; }

    void accum(Var v, const std::vector<S>& g) {
        auto& dst = grad(v);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    S* scratch(std::size_t n) {
        if (scratch_.size() < n) scratch_.resize(n);
        std::fill(scratch_.begin(), scratch_.begin() + n, S(0));
        return scratch_.data();
    }

    template <typename Fwd, typename Bwd>
    Var unary(Var a, Fwd fwd, Bwd dfun) {
        const auto& ta = val(a);
        Tensor<S> out = Tensor<S>::zeros(ta.shape);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = fwd(ta.data[i]);
        return record(std::move(out), {a}, [a, dfun](Tape& t) {
            if (!t.requires_grad(a)) return;
            const auto& g = t.g(t.out_);
            const auto& vx = t.val(a).data;
            const auto& vy = t.val(t.out_).data;
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfun(vx[i], vy[i]);
        });
    }

    template <typename Back>
    Var record(Tensor<S> out, std::vector<int> inputs, Back back) {
        bool rg = false;
        for (int i : inputs) rg = rg || nodes_[i].val.requires_grad;
        out.requires_grad = rg;
        const Var id = static_cast<Var>(nodes_.size());
        Node n;
        n.val = std::move(out);
        n.inputs = std::move(inputs);
        if (rg)
            n.back = [id, back](Tape& t) {
                t.out_ = id;
                back(t);
            };
        nodes_.push_back(std::move(n));
        return id;
    }

    std::vector<Node> nodes_;
    std::vector<S> scratch_;
    Var out_ = -1;  // id of the node whose backward rule is running
};

}  // namespace pmil
