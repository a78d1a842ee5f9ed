#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace chronofuse {

// Deterministic RNG with named substreams. All distribution transforms are
// hand-rolled on top of mt19937_64 so streams are bit-identical across
// standard library implementations. A single global seed fans out to
// substreams via derive(), so pipeline stages and per-item workers draw from
// independent, schedule-independent streams.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

    std::uint64_t u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive, via rejection sampling.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(u64());  // full range
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / span * span;
        std::uint64_t r = u64();
        while (r >= limit) r = u64();
        return lo + static_cast<std::int64_t>(r % span);
    }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * kPi * u2;
        cached_ = radius * std::sin(angle);
        has_cached_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

    // First k entries of a random permutation of {0..n-1}, without replacement.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    // Child stream keyed by a label and optional indices. Independent of the
    // order in which sibling streams are created or consumed.
    Rng derive(const std::string& label, std::uint64_t a = 0, std::uint64_t b = 0) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (const char c : label) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001b3ull;
        }
        std::uint64_t s = seed_ ^ splitmix(h);
        s = splitmix(s ^ splitmix(a + 0x9e3779b97f4a7c15ull));
        s = splitmix(s ^ splitmix(b + 0x6a09e667f3bcc909ull));
        return Rng(s);
    }

    std::uint64_t seed() const { return seed_; }

  private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static constexpr double kPi = 3.141592653589793238462643383279502884;

    std::mt19937_64 engine_;
    std::uint64_t seed_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

inline std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k && i < n; ++i) {
        const auto j =
            static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k < n ? k : n);
    return pool;
}

}  // namespace chronofuse
