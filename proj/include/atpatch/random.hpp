#pragma once

#include <atpatch/tensor.hpp>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace atpatch {

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a salt (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

} // namespace atpatch
