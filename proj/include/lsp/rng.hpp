#pragma once

#include <cmath>
#include <cstdint>

namespace lsp {

// Counter-based generator: every draw is a pure function of (seed, counter),
// so fills are reproducible bit-for-bit and safe to evaluate in parallel.
namespace rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t seed, uint64_t counter) {
    return splitmix64(splitmix64(seed ^ 0x5bf0f3c9d3b1a201ULL) + counter);
}

// Uniform in [0, 1).
inline double uniform01(uint64_t seed, uint64_t counter) {
    return static_cast<double>(mix(seed, counter) >> 11) * 0x1.0p-53;
}

// Uniform in (0, 1]; never 0, usable under a log.
inline double uniform01_open(uint64_t seed, uint64_t counter) {
    return (static_cast<double>(mix(seed, counter) >> 11) + 1.0) * 0x1.0p-53;
}

// Standard normal via Box-Muller; consumes counters 2i and 2i+1 for element i.
inline double normal01(uint64_t seed, uint64_t counter) {
    double u1 = uniform01_open(seed, 2 * counter);
    double u2 = uniform01(seed, 2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace rng

// Seed-plus-counter stream; identical (seed, counter) yields identical draws.
// Used for dropout masks; resetting the counter replays a mask exactly.
struct RngStream {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit RngStream(uint64_t s = 0, uint64_t c = 0) : seed(s), counter(c) {}

    double next_uniform() { return rng::uniform01(seed, counter++); }

    // Element i of the next block, without advancing; call skip() afterwards.
    double uniform_at(uint64_t i) const { return rng::uniform01(seed, counter + i); }
    void skip(uint64_t n) { counter += n; }
};

}  // namespace lsp
