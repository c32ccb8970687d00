#pragma once

#include <bitset>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "dhtidx/identity.hpp"

namespace testutil {

inline dhtidx::Key160 random_key(std::mt19937_64& rng) {
    dhtidx::Key160 k;
    for (auto& b : k.bytes()) b = static_cast<std::uint8_t>(rng());
    return k;
}

// Bit i of the bitset is bit i from the MSB of the key.
inline std::bitset<160> bits_of(const dhtidx::Key160& k) {
    std::bitset<160> out;
    for (int i = 0; i < 160; ++i) out[i] = (k.bytes()[i / 8] >> (7 - i % 8)) & 1;
    return out;
}

inline dhtidx::Key160 key_of(const std::bitset<160>& bits) {
    dhtidx::Key160 k;
    for (int i = 0; i < 160; ++i) {
        if (bits[i]) k.bytes()[i / 8] |= static_cast<std::uint8_t>(0x80 >> (i % 8));
    }
    return k;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("dhtidx-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
