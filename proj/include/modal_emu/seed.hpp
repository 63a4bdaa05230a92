#pragma once

#include <cstdint>

namespace modal_emu {

/// SplitMix64 mix of a base seed with stream coordinates.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(seed);
    for (auto v : {a, b, c}) h = mix(h ^ v);
    return h;
}

}  // namespace modal_emu
