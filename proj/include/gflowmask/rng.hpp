#pragma once

#include <cstdint>
#include <random>

namespace gfm {

// Named RNG substreams. Every source of randomness in a run is derived from
// the single run seed plus a stream tag and up to two indices, so components
// (data order, mask sampling, noise, init) are independently reproducible
// and insensitive to each other's draw counts.
enum class Stream : std::uint64_t {
    init = 1,
    data_order = 2,
    mask = 3,
    noise = 4,
    datagen = 5,
};

inline std::mt19937_64 substream(std::uint64_t seed, Stream stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::seed_seq seq{
        static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
        static_cast<std::uint32_t>(static_cast<std::uint64_t>(stream)),
        static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
        static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

} // namespace gfm
