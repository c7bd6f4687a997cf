#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace rmsflow {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Child seed for a subsystem, derived from a root seed and a path of tags.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags)
{
    std::uint64_t h = splitmix64(root);
    for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
    return h;
}

namespace seed_tag {
inline constexpr std::uint64_t data = 1;
inline constexpr std::uint64_t split = 2;
inline constexpr std::uint64_t init = 3;
inline constexpr std::uint64_t subsample = 4;
inline constexpr std::uint64_t augment = 5;
inline constexpr std::uint64_t network = 6;
inline constexpr std::uint64_t order = 7;
inline constexpr std::uint64_t eval = 8;
inline constexpr std::uint64_t bench = 9;
}  // namespace seed_tag

}  // namespace rmsflow
