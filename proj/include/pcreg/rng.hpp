#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pcreg {

/// Deterministic random source. The mt19937_64 engine output is fixed by the
/// standard; the value mappings below are hand-rolled because the standard
/// distributions are implementation-defined and would break cross-toolchain
/// reproducibility of seeded artifacts.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0; modulo bias is negligible
    /// for the desk-scale ranges used here (n << 2^64).
    std::uint64_t uniform_index(std::uint64_t n) { return engine_() % n; }

    /// Standard normal via Box-Muller; caches the spare deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace pcreg
