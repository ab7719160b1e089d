#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace lcmae {

/// Seeded random stream.
///
/// Streams are forked by tag rather than by consumption: `fork(t)` depends only
/// on the seed this stream was created with, so per-item streams stay the same
/// no matter how much of the parent has been drawn or in which order items are
/// processed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }

    Rng fork(std::uint64_t tag) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal (Box-Muller, no cached second value).
    double normal();
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer, used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace lcmae
