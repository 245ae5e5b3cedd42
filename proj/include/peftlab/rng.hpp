// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random numbers: every draw is a pure function of
// (key, counter), so streams keyed by parameter name are reproducible
// regardless of the order in which parameters are created.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace peftlab {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::string_view stream = {})
        : key_(splitmix64(seed ^ splitmix64(fnv1a(stream)))) {}

    std::uint64_t bits(std::uint64_t counter) const { return splitmix64(key_ ^ splitmix64(counter)); }

    /// Uniform in (0, 1), 53-bit resolution.
    double uniform(std::uint64_t counter) const {
        return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller on counters (2i, 2i+1).
    double normal(std::uint64_t index) const {
        const std::uint64_t pair = index / 2;
        const double u1 = uniform(2 * pair), u2 = uniform(2 * pair + 1);
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        return (index % 2 == 0) ? radius * std::cos(angle) : radius * std::sin(angle);
    }

private:
    std::uint64_t key_;
};

/// Sequential generator on top of CounterRng for data generation and
/// shuffling.
class StreamRng {
public:
    explicit StreamRng(std::uint64_t seed, std::string_view stream = {}) : rng_(seed, stream) {}

    std::uint64_t next() { return rng_.bits(counter_++); }
    double next_uniform() { return rng_.uniform(counter_++); }

    /// Uniform integer in [lo, hi].
    std::uint64_t range(std::uint64_t lo, std::uint64_t hi) {
        const std::uint64_t span = hi - lo + 1;
        // rejection sampling keeps the draw unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t v;
        do {
            v = next();
        } while (v >= limit);
        return lo + v % span;
    }

    template <class Vec>
    void shuffle(Vec& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(range(0, i - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    CounterRng rng_;
    std::uint64_t counter_ = 0;
};

}  // namespace peftlab
