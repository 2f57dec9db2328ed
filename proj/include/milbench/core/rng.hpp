#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace milbench {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Mixes a base seed with a key path into an independent stream seed. Streams
// keyed by (seed, epoch, item) make results independent of scheduling order.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t s = splitmix64(base);
    for (auto k : keys) s = splitmix64(s ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return s;
}

inline Rng make_stream(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
    return Rng(derive_seed(base, keys));
}

inline std::uint64_t key_of(std::string_view name) { return fnv1a64(name); }

}  // namespace milbench
