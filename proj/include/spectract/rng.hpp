#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace spectract {

// splitmix64 finalizer; used to derive independent stream seeds from a root
// seed and a tuple of indices.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t s = mix_seed(root);
    for (auto k : keys) s = mix_seed(s ^ (k + 0x632be59bd9b4e019ULL));
    return s;
}

using Rng = std::mt19937_64;

inline std::vector<double> standard_normal(std::size_t n, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> out(n);
    for (auto& v : out) v = dist(rng);
    return out;
}

}  // namespace spectract
