#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace slicefine {

// Deterministic random source. mt19937_64 output is bit-exact per the
// standard, but the standard *distributions* are implementation-defined, so
// every draw here goes through our own fixed algorithms. Two runs with the
// same seed produce the same bytes on any conforming toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Derive an independent stream, e.g. one per (study cell, seed).
    // splitmix64 scrambling so nearby (seed, stream) pairs decorrelate.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        auto mix = [](std::uint64_t z) {
            z += 0x9e3779b97f4a7c15ull;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            return z ^ (z >> 31);
        };
        return Rng(mix(mix(seed) + stream));
    }

    std::uint64_t bits() { return engine_(); }

    // Uniform on [0,1) with 53 random bits.
    double uniform01() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller. The cosine branch only; one draw costs two uniforms but the
    // call pattern stays independent of who consumed the previous draw.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();  // log(0) guard
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased integer in [0, n). Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        while (true) {
            std::uint64_t x = engine_();
            __uint128_t m = static_cast<__uint128_t>(x) * n;
            auto lo = static_cast<std::uint64_t>(m);
            if (lo >= n || lo >= std::uint64_t(-std::int64_t(n)) % n)
                return static_cast<std::uint64_t>(m >> 64);
        }
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(below(n)); }

    // Uniform k-subset of {0..n-1} by partial Fisher-Yates; ascending result.
    std::vector<std::size_t> subset(std::size_t n, std::size_t k) {
        if (k > n) throw std::invalid_argument("Rng::subset: k exceeds n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i)
            std::swap(pool[i], pool[i + index(n - i)]);
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        return pool;
    }

    // In-place Fisher-Yates shuffle of an index vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace slicefine
