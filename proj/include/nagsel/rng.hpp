#pragma once

#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nagsel::rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Counter-based stream: element i of stream `key` is splitmix64(key ^ mix(i)),
// so each stream can be generated independently of every other stream.
class CounterStream {
public:
    explicit constexpr CounterStream(std::uint64_t key) noexcept : key_(splitmix64(key)) {}

    constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
        return splitmix64(key_ ^ splitmix64(counter + 0x632BE59BD9B4E019ULL));
    }

    // Uniform double in [0, 1) with 53 random bits.
    constexpr double uniform01(std::uint64_t counter) const noexcept {
        return static_cast<double>(at(counter) >> 11) * 0x1.0p-53;
    }

private:
    std::uint64_t key_;
};

inline constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return splitmix64(splitmix64(seed ^ 0xA0761D6478BD642FULL) ^ splitmix64(a * 0xE7037ED1A0B428DBULL + b + 1));
}

// Engine-portable helpers. std::uniform_*_distribution is implementation defined,
// so anything that must be reproducible across standard libraries goes through these.
inline std::uint64_t bounded(std::mt19937_64& gen, std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("bounded(): empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
        v = gen();
    } while (v >= limit);
    return v % bound;
}

inline double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

// `count` distinct indices from [0, population), in sampling order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t population, std::size_t count,
                                                           std::mt19937_64& gen) {
    if (count > population) {
        throw std::invalid_argument("sample size " + std::to_string(count) + " exceeds population " +
                                    std::to_string(population));
    }
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t j = i + static_cast<std::size_t>(bounded(gen, population - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
}

}  // namespace nagsel::rng
