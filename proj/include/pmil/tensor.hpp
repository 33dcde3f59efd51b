#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmil {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Frozen-weight drift and similar hard invariant failures.
struct InvariantBreach : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major n-d array. `grad` is empty unless gradients have been
/// accumulated; `requires_grad` doubles as the trainable flag inside a ParamSet.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;

    Tensor() = default;

    static std::size_t check_shape(const std::vector<int>& shape) {
        if (shape.empty())
            throw DimensionError("tensor shape must be nonempty");
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 1)
                throw DimensionError("tensor dimension must be >= 1, got " + std::to_string(d));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor full(std::vector<int> shape, S fill) {
        std::size_t n = check_shape(shape);
        Tensor t;
        t.shape = std::move(shape);
        t.data.assign(n, fill);
        return t;
    }

    static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), S(0)); }

    static Tensor from(std::vector<int> shape, std::vector<S> values) {
        std::size_t n = check_shape(shape);
        if (values.size() != n)
            throw DimensionError("fill length " + std::to_string(values.size()) +
                                 " does not match shape product " + std::to_string(n));
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(values);
        return t;
    }

    std::size_t numel() const { return data.size(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void clear_grad() { grad.clear(); }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.requires_grad = requires_grad;
        out.data.reserve(data.size());
        for (S v : data) out.data.push_back(static_cast<T>(v));
        return out;
    }
};

template <typename S>
inline std::string shape_str(const Tensor<S>& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

}  // namespace pmil
