#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dualatt {

// Seeded 64-bit generator with portable uniform/normal draws. The standard
// distributions are implementation-defined, so they are avoided wherever a
// value ends up in a persisted artifact.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    // Stream keyed by (seed, counter); used where generation must not depend
    // on how many draws happened before.
    Rng(std::uint64_t seed, std::uint64_t counter) : engine_(mix(seed, counter)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one draw per call so the stream is position-stable.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t counter) {
        return splitmix(splitmix(seed) ^ (counter * 0xD1B54A32D192ED03ULL + 1));
    }

    std::mt19937_64 engine_;
};

}  // namespace dualatt
