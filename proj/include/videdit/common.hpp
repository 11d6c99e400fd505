#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace videdit {

// Error taxonomy used across the library. Parameter errors are bad call
// arguments, shape errors are array-dimension mismatches, state errors are
// sequencing violations (e.g. a cache entry inserted twice), config errors
// are invalid or unsupported run configurations.
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define VIDEDIT_CHECK(cond, ExcType, msg)   \
    do {                                    \
        if (!(cond)) throw ExcType(msg);    \
    } while (0)

// Deterministic RNG. std::mt19937_64 has a pinned algorithm, but the
// distributions in <random> are implementation-defined, so uniform and
// normal draws are generated by hand to keep trajectories reproducible
// across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t raw() { return engine_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) {
        // Rejection sampling avoids modulo bias.
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return static_cast<int64_t>(r % un);
    }

    // Standard normal via Box-Muller, spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        has_spare_ = true;
        return mag * std::cos(two_pi * u2);
    }

    // Derives an independent stream, e.g. one per frame or per clip.
    Rng fork(uint64_t salt) {
        return Rng(engine_() ^ (salt * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull));
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used to key persisted artifacts (weights, latents) to their inputs.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace videdit
