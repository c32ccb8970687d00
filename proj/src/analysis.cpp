#include "dhtidx/analysis.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>
#include <vector>

namespace dhtidx {

int natural_distance_bits(const Key160& a, const Key160& b) {
    std::array<std::uint8_t, Key160::kBytes> diff{};
    int borrow = 0;
    for (int i = static_cast<int>(Key160::kBytes) - 1; i >= 0; --i) {
        int d = static_cast<int>(b.bytes()[i]) - static_cast<int>(a.bytes()[i]) - borrow;
        borrow = d < 0;
        diff[i] = static_cast<std::uint8_t>(d + (borrow ? 256 : 0));
    }
    if (borrow) throw std::invalid_argument("natural_distance_bits needs a <= b");
    return Key160::kBits - Key160(diff).leading_zero_bits();
}

std::string DistanceHistograms::csv() const {
    std::string out = "histogram,bits,count\n";
    for (const auto& [bits, n] : natural_bits) {
        out += "natural_log2," + std::to_string(bits) + "," + std::to_string(n) + "\n";
    }
    for (const auto& [bits, n] : common_prefix) {
        out += "xor_common_prefix," + std::to_string(bits) + "," + std::to_string(n) + "\n";
    }
    return out;
}

DistanceHistograms analyze_distance(std::uint64_t key_count, std::uint64_t seed) {
    if (key_count < 2) throw std::invalid_argument("analyze-distance needs at least 2 keys");
    std::mt19937_64 rng(seed);
    std::vector<Key160> keys(key_count);
    for (auto& k : keys) {
        for (std::size_t i = 0; i < Key160::kBytes; i += 8) {
            std::uint64_t x = rng();
            for (std::size_t j = i; j < std::min(i + 8, Key160::kBytes); ++j, x >>= 8) {
                k.bytes()[j] = static_cast<std::uint8_t>(x);
            }
        }
    }
    std::sort(keys.begin(), keys.end());
    DistanceHistograms h;
    h.key_count = key_count;
    h.seed = seed;
    for (std::size_t i = 1; i < keys.size(); ++i) {
        ++h.natural_bits[natural_distance_bits(keys[i - 1], keys[i])];
        ++h.common_prefix[common_prefix_bits(keys[i - 1], keys[i])];
    }
    return h;
}

}  // namespace dhtidx
