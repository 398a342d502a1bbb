#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mxd {

/// Counter-based generator: draw i is splitmix64(seed + i * golden_gamma).
/// Every stream is a pure function of (seed, counter), so any run replays
/// bit-identically on any platform with IEEE-754 doubles.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept { return mix(seed_ + (++counter_) * kGamma); }

    /// Independent child stream; the parent is not advanced.
    Rng fork(std::uint64_t stream) const noexcept {
        return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL)));
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in the inclusive range [lo, hi]; unbiased via rejection.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(next_u64());
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t draw = next_u64();
        while (draw >= limit) draw = next_u64();
        return lo + static_cast<std::int64_t>(draw % span);
    }

    std::size_t index(std::size_t n) noexcept {
        return static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(n) - 1));
    }

    /// Standard normal via Box-Muller (one output per two uniforms).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace mxd
