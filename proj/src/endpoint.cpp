#include "dhtidx/endpoint.hpp"

#include <charconv>
#include <stdexcept>

namespace dhtidx {

Endpoint Endpoint::from_octets(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d, std::uint16_t port) {
    return Endpoint{static_cast<std::uint32_t>(a) << 24 | static_cast<std::uint32_t>(b) << 16 |
                        static_cast<std::uint32_t>(c) << 8 | d,
                    port};
}

Endpoint Endpoint::parse(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) throw std::invalid_argument("endpoint needs host:port: " + std::string(text));
    std::uint32_t ip = 0;
    std::string_view host = text.substr(0, colon);
    for (int octet = 0; octet < 4; ++octet) {
        const auto dot = host.find('.');
        const auto part = octet < 3 ? host.substr(0, dot) : host;
        if (part.empty() || (octet < 3 && dot == std::string_view::npos)) {
            throw std::invalid_argument("bad IPv4 address: " + std::string(text));
        }
        unsigned value = 0;
        auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
        if (ec != std::errc{} || p != part.data() + part.size() || value > 255) {
            throw std::invalid_argument("bad IPv4 address: " + std::string(text));
        }
        ip = ip << 8 | value;
        if (octet < 3) host.remove_prefix(dot + 1);
    }
    const auto port_text = text.substr(colon + 1);
    unsigned port = 0;
    auto [p, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || p != port_text.data() + port_text.size() || port > 65535) {
        throw std::invalid_argument("bad port: " + std::string(text));
    }
    return Endpoint{ip, static_cast<std::uint16_t>(port)};
}

std::string Endpoint::ip_string() const {
    return std::to_string(ip >> 24) + "." + std::to_string(ip >> 16 & 0xff) + "." + std::to_string(ip >> 8 & 0xff) +
           "." + std::to_string(ip & 0xff);
}

std::string Endpoint::to_string() const { return ip_string() + ":" + std::to_string(port); }

std::string encode_compact_endpoint(const Endpoint& ep) {
    std::string out(6, '\0');
    out[0] = static_cast<char>(ep.ip >> 24);
    out[1] = static_cast<char>(ep.ip >> 16);
    out[2] = static_cast<char>(ep.ip >> 8);
    out[3] = static_cast<char>(ep.ip);
    out[4] = static_cast<char>(ep.port >> 8);
    out[5] = static_cast<char>(ep.port);
    return out;
}

Endpoint decode_compact_endpoint(std::string_view raw) {
    if (raw.size() != 6) throw std::invalid_argument("compact endpoint must be 6 bytes");
    auto u = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[i])); };
    return Endpoint{u(0) << 24 | u(1) << 16 | u(2) << 8 | u(3), static_cast<std::uint16_t>(u(4) << 8 | u(5))};
}

}  // namespace dhtidx
