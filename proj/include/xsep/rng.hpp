#pragma once

#include <cmath>
#include <cstdint>

namespace xsep {

// SplitMix64 (Vigna's public-domain reference constants). Chosen because the
// whole stream is a pure function of the 64-bit seed, with no platform-varying
// state, so identical seeds give identical streams everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 mantissa bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Plain modulo draw; the tiny bias is irrelevant for shuffling and the
    // scheme must stay fixed so shuffles are reproducible.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Box-Muller, one value per call (the spare is kept).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Derives an independent stream, e.g. one per epoch from a base seed.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
        Rng r(seed ^ (0x632BE59BD9B4E019ull * (salt + 1)));
        return r.next_u64();
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace xsep
