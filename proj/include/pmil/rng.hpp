#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pmil/tensor.hpp"

namespace pmil {

/// Deterministic PRNG: xoshiro256** seeded through splitmix64.
/// A (seed, stream_label) pair fully determines the sequence; stream labels
/// keep independent consumers ("data", "init", "shuffle") from colliding.
class Rng {
  public:
    Rng(std::uint64_t seed, std::string_view stream_label) : label_(stream_label) {
        std::uint64_t x = seed ^ fnv1a(stream_label);
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t next_u64() {
        // xoshiro256** by Blackman & Vigna (public domain)
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0,1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) {
        if (!(b > a)) throw ContractError("uniform requires b > a");
        return a + (b - a) * next_unit();
    }

    /// Box-Muller, cosine branch only. sigma == 0 returns exactly mu.
    double gaussian(double mu, double sigma) {
        if (sigma < 0) throw ContractError("gaussian requires sigma >= 0");
        if (sigma == 0) return mu;
        double u1 = next_unit();
        while (u1 == 0.0) u1 = next_unit();
        const double u2 = next_unit();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mu + sigma * z;
    }

    /// Unbiased integer in [0, n) by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw ContractError("next_below requires n >= 1");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n) {
        if (n < 1) throw ContractError("permutation requires n >= 1");
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(next_below(static_cast<std::uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

    const std::string& stream_label() const { return label_; }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 14695981039346656037ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
    std::string label_;
};

}  // namespace pmil
