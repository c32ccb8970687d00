#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dhtidx {

/// 160-bit key used both as node ID and as infohash.
///
/// Byte 0 is the most significant byte. The default comparison operators
/// implement the natural order (unsigned big-endian integer order); XOR
/// closeness is always requested explicitly through xor_distance().
class Key160 {
public:
    static constexpr std::size_t kBytes = 20;
    static constexpr int kBits = 160;

    constexpr Key160() = default;
    explicit Key160(std::span<const std::uint8_t> bytes);

    static Key160 from_hex(std::string_view hex);
    /// Copies 20 raw bytes; throws if the input is not exactly 20 bytes.
    static Key160 from_bytes(std::string_view raw);
    static Key160 max();

    std::string to_hex() const;
    std::string to_bytes() const;

    const std::array<std::uint8_t, kBytes>& bytes() const { return bytes_; }
    std::array<std::uint8_t, kBytes>& bytes() { return bytes_; }

    /// Bit i counted from the most significant bit (i = 0 is the MSB).
    bool bit(int i) const;
    void set_bit(int i, bool value);
    void flip_bit(int i);

    bool is_zero() const;
    /// Number of leading zero bits (160 for the zero key).
    int leading_zero_bits() const;

    /// Adds one modulo 2^160; returns true when the addition wrapped.
    bool increment();

    friend constexpr auto operator<=>(const Key160&, const Key160&) = default;
    friend constexpr bool operator==(const Key160&, const Key160&) = default;

    friend Key160 operator^(const Key160& a, const Key160& b);

private:
    std::array<std::uint8_t, kBytes> bytes_{};
};

using NodeId = Key160;
using Infohash = Key160;

Key160 xor_distance(const Key160& a, const Key160& b);

/// Natural order comparison; identical to operator<=> but spelled out at
/// call sites where the choice of metric matters.
std::strong_ordering natural_compare(const Key160& a, const Key160& b);

/// 160 minus the bit length of a xor b.
int common_prefix_bits(const Key160& a, const Key160& b);

/// True when a is strictly closer to target than b under the XOR metric.
bool closer_to(const Key160& target, const Key160& a, const Key160& b);

/// Staggered node-ID derivation: the i-th least significant bit of the
/// socket counter is XORed into the i-th most significant bit of the root.
Key160 derive_node_id(const Key160& root, std::uint64_t socket_counter);
Key160 derive_node_id(const Key160& root, const Key160& socket_counter);

/// A keyspace block: all keys whose top `bit_count` bits equal those of `key`.
class Prefix {
public:
    Prefix() = default;
    /// Masks away bits below bit_count.
    Prefix(const Key160& key, int bit_count);

    const Key160& key() const { return key_; }
    int bit_count() const { return bit_count_; }

    bool covers(const Key160& k) const;
    /// Child extending this prefix by one bit with the given value.
    Prefix child(bool bit_value) const;
    /// Largest key covered by this prefix.
    Key160 last() const;

    std::string to_string() const;

    friend bool operator==(const Prefix&, const Prefix&) = default;
    /// Ordered by first covered key, then by width (wider first).
    friend std::strong_ordering operator<=>(const Prefix& a, const Prefix& b);

private:
    Key160 key_{};
    int bit_count_ = 0;
};

}  // namespace dhtidx

template <>
struct std::hash<dhtidx::Key160> {
    std::size_t operator()(const dhtidx::Key160& k) const noexcept;
};
