#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "errors.hpp"

namespace pemm {

/// Mixes a base seed with a salt into a fresh, well-spread 64-bit seed
/// (splitmix64 finalizer). Used to derive independent streams: one per
/// weight set, per sample, per epoch, ... from a single run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic random stream. Wraps std::mt19937_64 (whose output sequence
/// the standard pins down exactly) but avoids std::*_distribution, whose
/// results are implementation-defined; the derived draws below are spelled
/// out so every platform produces identical streams.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call;
    /// the sine partner is discarded to keep the stream position
    /// independent of call parity.
    double normal() {
        double u1 = 1.0 - uniform(); // (0, 1]: keeps log() finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: n must be positive");
        if ((n & (n - 1)) == 0) return next_u64() & (n - 1); // power of two
        std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

private:
    std::mt19937_64 gen_;
};

/// In-place Fisher-Yates shuffle driven by Rng::below, so the permutation
/// depends only on the seed, never on the standard library build.
template <typename T>
inline void shuffle_values(std::vector<T>& values, Rng& rng) {
    for (std::size_t i = values.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(values[i - 1], values[j]);
    }
}

/// [0, 1, ..., n-1] shuffled with the given stream.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    shuffle_values(idx, rng);
    return idx;
}

} // namespace pemm
