#pragma once

#include <cstdint>
#include <initializer_list>

namespace clda {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Stable child seed from a root seed and a path of integers.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(root);
    for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632BE59BD9B4E019ull));
    return s;
}

}  // namespace clda
