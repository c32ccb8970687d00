#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace dhtidx {

/// IPv4 address + port in host byte order.
struct Endpoint {
    std::uint32_t ip = 0;
    std::uint16_t port = 0;

    static Endpoint parse(std::string_view text);  // "a.b.c.d:port"
    static Endpoint from_octets(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d, std::uint16_t port);

    std::string ip_string() const;
    std::string to_string() const;
    bool valid() const { return ip != 0 && port != 0; }

    friend constexpr auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

/// 6-byte compact peer encoding (address then port, network byte order).
std::string encode_compact_endpoint(const Endpoint& ep);
/// Throws std::invalid_argument unless the input is exactly 6 bytes.
Endpoint decode_compact_endpoint(std::string_view raw);

}  // namespace dhtidx

template <>
struct std::hash<dhtidx::Endpoint> {
    std::size_t operator()(const dhtidx::Endpoint& e) const noexcept {
        return std::hash<std::uint64_t>{}(static_cast<std::uint64_t>(e.ip) << 16 | e.port);
    }
};
