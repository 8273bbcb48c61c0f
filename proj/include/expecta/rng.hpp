#pragma once

// Portable random numbers.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard distributions are implementation-defined, so the
// integer and normal draws below are written out explicitly; together they
// make every sampled quantity reproducible from a single 64-bit seed on any
// conforming platform.

#include <cstdint>
#include <random>
#include <utility>
#include <string_view>

namespace expecta {

// SplitMix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seed for item `index` of the stream named `stream` under `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                    std::uint64_t index = 0) noexcept {
    return mix64(mix64(seed ^ fnv1a64(stream)) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform over {0, ..., n-1}; n > 0. Rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t x = engine_();
            if (x >= threshold) return x % n;
        }
    }

    // Uniform over the inclusive integer interval [lo, hi].
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the second variate is discarded to keep the stream simple.
    double normal(double mean = 0.0, double stddev = 1.0);

    bool bernoulli(double p) { return uniform() < p; }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

// Fisher-Yates with Rng::below; std::shuffle's draws are implementation-defined.
template <class Vec>
void shuffle(Vec& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace expecta
