#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "dhtidx/identity.hpp"

namespace dhtidx {

/// Bit length of b - a for a <= b in natural order (0 when equal).
int natural_distance_bits(const Key160& a, const Key160& b);

/// Histograms over adjacent pairs of naturally sorted random keys.
struct DistanceHistograms {
    std::uint64_t key_count = 0;
    std::uint64_t seed = 0;
    /// Bit length of the natural difference -> pair count.
    std::map<int, std::uint64_t> natural_bits;
    /// Common prefix bits of the XOR distance -> pair count.
    std::map<int, std::uint64_t> common_prefix;

    /// "histogram,bits,count" rows; only non-empty buckets, ascending bits.
    std::string csv() const;
};

/// Throws std::invalid_argument when key_count < 2.
DistanceHistograms analyze_distance(std::uint64_t key_count, std::uint64_t seed);

}  // namespace dhtidx
