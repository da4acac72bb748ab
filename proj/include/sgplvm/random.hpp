#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace sgplvm {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for sub-stream `stream` of base seed `base` (e.g. one per chain).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t salt = 0) {
    return mix_seed(mix_seed(base) ^ mix_seed(stream + 0x1000 * (salt + 1)));
}

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return n(rng);
}

inline double uniform01(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    return u(rng);
}

inline Eigen::MatrixXd standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::MatrixXd out(rows, cols);
    std::normal_distribution<double> n(0.0, 1.0);
    // Column-major fill keeps draw order stable across Eigen versions.
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = n(rng);
    return out;
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

} // namespace sgplvm
