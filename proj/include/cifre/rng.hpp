#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cifre {

// splitmix64 mix step. Used to derive independent substreams from (seed, index) pairs
// so dataset sample k and parameter tensor k do not depend on generation order.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG with hand-rolled distributions. std::*_distribution is
// implementation-defined, so sampling goes through fixed arithmetic on raw
// mt19937_64 output to keep streams bitwise stable across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}
    Rng(uint64_t seed, uint64_t stream) : eng_(splitmix64(splitmix64(seed) ^ stream)) {}

    uint64_t bits() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] via rejection-free modulo on 64-bit output.
    // Bias is negligible for the small ranges used here.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    bool coin(double p = 0.5) { return uniform() < p; }

    // Box-Muller; one value per call, the pair partner is discarded for simplicity.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace cifre
