#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace anomalign {

// Every stochastic routine in the library draws from this wrapper instead of
// the std distributions, whose outputs differ between standard library
// implementations. All mappings below are fixed bit-for-bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t uniform_index(std::uint64_t n);

    int uniform_int(int n) { return static_cast<int>(uniform_index(static_cast<std::uint64_t>(n))); }

    /// Standard normal via Box-Muller (one value per call, no spare cached).
    double normal();

    /// Fisher-Yates shuffle of the index range [0, n).
    std::vector<int> permutation(int n);

    /// k distinct indices out of [0, n), in selection order.
    std::vector<int> sample_without_replacement(int n, int k);

private:
    std::mt19937_64 engine_;
};

/// Stable seed derivation for named sub-streams, e.g. one stream per
/// training iteration. Same (seed, tag, index) always yields the same value.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

} // namespace anomalign
