#pragma once

#include "lsp/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lsp {

// FNV-1a, used to derive per-component seeds from (root seed, tag).
inline uint64_t hash_seed(uint64_t seed, const std::string& tag) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint8_t byte) {
        h ^= byte;
        h *= 1099511628211ull;
    };
    for (int i = 0; i < 8; ++i) mix(static_cast<uint8_t>(seed >> (8 * i)));
    for (char c : tag) mix(static_cast<uint8_t>(c));
    return h;
}

// Deterministic random stream. The raw engine is std::mt19937_64 (stable by
// the standard); every distribution transform is implemented here so that the
// produced values do not depend on the standard library build.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    // Child stream independent of draw order on the parent.
    Rng split(const std::string& tag) const { return Rng(hash_seed(seed_, tag)); }

    uint64_t seed() const { return seed_; }
    uint64_t next_u64() { return engine_(); }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n), modulo-bias-free.
    uint64_t uniform_index(uint64_t n) {
        uint64_t threshold = (0ull - n) % n;
        for (;;) {
            uint64_t r = engine_();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (both values used, in order).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Standard Gumbel: -log(-log(U)).
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double l = -std::log(u);
        if (l < 1e-300) l = 1e-300;
        return -std::log(l);
    }

    template <class S>
    void fill_uniform(Tensor<S>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
    }

    template <class S>
    void fill_normal(Tensor<S>& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal());
    }

    template <class S>
    void fill_gumbel(Tensor<S>& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(gumbel());
    }

    // Fisher-Yates; the exact permutation is part of the reproducibility
    // contract, so std::shuffle (unspecified algorithm) is not used.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace lsp
