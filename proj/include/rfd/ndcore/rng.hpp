#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "rfd/ndcore/error.hpp"
#include "rfd/ndcore/tensor.hpp"

namespace rfd {

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) noexcept {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// xoshiro256** seeded through splitmix64.
///
/// Raw 64-bit draws are bit-identical on every platform. Uniforms take the top
/// 53 bits; normals use the Box-Muller transform with the second variate
/// cached. Substreams are derived from the construction seed and a label, so a
/// substream does not depend on how many draws the parent has consumed.
class Rng {
public:
    struct State {
        std::uint64_t seed = 0;
        std::array<std::uint64_t, 4> s{};
        bool has_cached_normal = false;
        double cached_normal = 0.0;
        friend bool operator==(const State&, const State&) = default;
    };

    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) noexcept {
        st_.seed = seed;
        std::uint64_t sm = seed;
        for (auto& w : st_.s) w = splitmix64(sm);
        st_.has_cached_normal = false;
        st_.cached_normal = 0.0;
    }

    std::uint64_t seed() const noexcept { return st_.seed; }

    Rng substream(std::string_view label) const noexcept {
        std::uint64_t mix = st_.seed ^ 0xD1B54A32D192ED03ULL;
        std::uint64_t derived = splitmix64(mix) ^ fnv1a64(label);
        return Rng(derived);
    }

    Rng substream(std::string_view label, std::uint64_t index) const noexcept {
        Rng base = substream(label);
        std::uint64_t mix = base.seed() + index * 0x9E3779B97F4A7C15ULL;
        return Rng(splitmix64(mix));
    }

    std::uint64_t next_u64() noexcept {
        auto& s = st_.s;
        const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n) without modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        require(n > 0, ErrorCode::invalid_argument, "uniform_int range must be positive");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    double normal() noexcept {
        if (st_.has_cached_normal) {
            st_.has_cached_normal = false;
            return st_.cached_normal;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        st_.cached_normal = r * std::sin(theta);
        st_.has_cached_normal = true;
        return r * std::cos(theta);
    }

    Tensor normal_tensor(Shape shape) {
        Tensor t(std::move(shape));
        for (double& v : t.storage()) v = normal();
        return t;
    }

    const State& state() const noexcept { return st_; }
    void set_state(const State& s) noexcept { st_ = s; }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    State st_;
};

} // namespace rfd
