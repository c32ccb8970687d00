#include "dhtidx/identity.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace dhtidx {

namespace {

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

}  // namespace

Key160::Key160(std::span<const std::uint8_t> bytes) {
    if (bytes.size() != kBytes) throw std::invalid_argument("Key160 needs exactly 20 bytes");
    std::copy(bytes.begin(), bytes.end(), bytes_.begin());
}

Key160 Key160::from_hex(std::string_view hex) {
    if (hex.size() != kBytes * 2) throw std::invalid_argument("key hex must be 40 characters");
    Key160 k;
    for (std::size_t i = 0; i < kBytes; ++i) {
        int hi = hex_value(hex[2 * i]);
        int lo = hex_value(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw std::invalid_argument("invalid hex digit in key");
        k.bytes_[i] = static_cast<std::uint8_t>(hi << 4 | lo);
    }
    return k;
}

Key160 Key160::from_bytes(std::string_view raw) {
    if (raw.size() != kBytes) throw std::invalid_argument("Key160 needs exactly 20 bytes");
    Key160 k;
    std::memcpy(k.bytes_.data(), raw.data(), kBytes);
    return k;
}

Key160 Key160::max() {
    Key160 k;
    k.bytes_.fill(0xff);
    return k;
}

std::string Key160::to_hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(kBytes * 2, '0');
    for (std::size_t i = 0; i < kBytes; ++i) {
        out[2 * i] = digits[bytes_[i] >> 4];
        out[2 * i + 1] = digits[bytes_[i] & 0xf];
    }
    return out;
}

std::string Key160::to_bytes() const {
    return std::string(reinterpret_cast<const char*>(bytes_.data()), kBytes);
}

bool Key160::bit(int i) const {
    return (bytes_[static_cast<std::size_t>(i / 8)] >> (7 - i % 8)) & 1;
}

void Key160::set_bit(int i, bool value) {
    auto& b = bytes_[static_cast<std::size_t>(i / 8)];
    const auto mask = static_cast<std::uint8_t>(1u << (7 - i % 8));
    b = value ? static_cast<std::uint8_t>(b | mask) : static_cast<std::uint8_t>(b & ~mask);
}

void Key160::flip_bit(int i) {
    bytes_[static_cast<std::size_t>(i / 8)] ^= static_cast<std::uint8_t>(1u << (7 - i % 8));
}

bool Key160::is_zero() const {
    return std::all_of(bytes_.begin(), bytes_.end(), [](std::uint8_t b) { return b == 0; });
}

int Key160::leading_zero_bits() const {
    for (std::size_t i = 0; i < kBytes; ++i) {
        if (bytes_[i] != 0) return static_cast<int>(i * 8) + std::countl_zero(bytes_[i]);
    }
    return kBits;
}

bool Key160::increment() {
    for (std::size_t i = kBytes; i-- > 0;) {
        if (++bytes_[i] != 0) return false;
    }
    return true;
}

Key160 operator^(const Key160& a, const Key160& b) {
    Key160 out;
    for (std::size_t i = 0; i < Key160::kBytes; ++i) out.bytes_[i] = a.bytes_[i] ^ b.bytes_[i];
    return out;
}

Key160 xor_distance(const Key160& a, const Key160& b) { return a ^ b; }

std::strong_ordering natural_compare(const Key160& a, const Key160& b) { return a <=> b; }

int common_prefix_bits(const Key160& a, const Key160& b) {
    const auto& x = a.bytes();
    const auto& y = b.bytes();
    for (std::size_t i = 0; i < Key160::kBytes; ++i) {
        const auto d = static_cast<std::uint8_t>(x[i] ^ y[i]);
        if (d != 0) return static_cast<int>(i * 8) + std::countl_zero(d);
    }
    return Key160::kBits;
}

bool closer_to(const Key160& target, const Key160& a, const Key160& b) {
    const auto& t = target.bytes();
    const auto& x = a.bytes();
    const auto& y = b.bytes();
    for (std::size_t i = 0; i < Key160::kBytes; ++i) {
        const auto da = static_cast<std::uint8_t>(x[i] ^ t[i]);
        const auto db = static_cast<std::uint8_t>(y[i] ^ t[i]);
        if (da != db) return da < db;
    }
    return false;
}

Key160 derive_node_id(const Key160& root, std::uint64_t socket_counter) {
    Key160 out = root;
    // Counter bit i (LSB first) lands on ID bit i (MSB first).
    for (int i = 0; socket_counter != 0; ++i, socket_counter >>= 1) {
        if (socket_counter & 1) out.flip_bit(i);
    }
    return out;
}

Key160 derive_node_id(const Key160& root, const Key160& socket_counter) {
    Key160 out = root;
    for (int i = 0; i < Key160::kBits; ++i) {
        if (socket_counter.bit(Key160::kBits - 1 - i)) out.flip_bit(i);
    }
    return out;
}

Prefix::Prefix(const Key160& key, int bit_count) : key_(key), bit_count_(bit_count) {
    if (bit_count < 0 || bit_count > Key160::kBits) throw std::invalid_argument("prefix bit count out of range");
    for (int i = bit_count; i < Key160::kBits; ++i) {
        if (i % 8 == 0) {
            key_.bytes()[static_cast<std::size_t>(i / 8)] = 0;
            i += 7;
        } else {
            key_.set_bit(i, false);
        }
    }
}

bool Prefix::covers(const Key160& k) const { return common_prefix_bits(key_, k) >= bit_count_; }

Prefix Prefix::child(bool bit_value) const {
    if (bit_count_ >= Key160::kBits) throw std::logic_error("cannot extend a full-width prefix");
    Key160 k = key_;
    k.set_bit(bit_count_, bit_value);
    return Prefix(k, bit_count_ + 1);
}

Key160 Prefix::last() const {
    Key160 k = key_;
    for (int i = bit_count_; i < Key160::kBits; ++i) k.set_bit(i, true);
    return k;
}

std::string Prefix::to_string() const { return key_.to_hex() + "/" + std::to_string(bit_count_); }

std::strong_ordering operator<=>(const Prefix& a, const Prefix& b) {
    if (auto c = a.key_ <=> b.key_; c != 0) return c;
    return a.bit_count_ <=> b.bit_count_;
}

}  // namespace dhtidx

std::size_t std::hash<dhtidx::Key160>::operator()(const dhtidx::Key160& k) const noexcept {
    const auto& b = k.bytes();
    return std::hash<std::string_view>{}(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}
