#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dhtidx/endpoint.hpp"
#include "dhtidx/identity.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx::krpc {

inline constexpr std::size_t kMaxDatagram = 1400;
inline constexpr std::size_t kCompactNodeBytes = 26;

enum class Kind { Query, Response, Error };
enum class Method { Ping, FindNode, GetPeers, AnnouncePeer };

const char* method_name(Method m);

/// KRPC error codes (BEP 5).
enum ErrorCode : int {
    kGenericError = 201,
    kServerError = 202,
    kProtocolError = 203,
    kMethodUnknown = 204,
};

struct CompactContact {
    NodeId id;
    Endpoint endpoint;
    friend bool operator==(const CompactContact&, const CompactContact&) = default;
};

/// One KRPC datagram. Which fields are meaningful depends on kind/method:
///  - Query: method, sender_id, plus target (find_node target, get_peers and
///    announce_peer info_hash), token/port/implied_port for announce_peer.
///  - Response: sender_id, nodes, values, token.
///  - Error: error_code, error_message.
struct Message {
    std::string transaction_id;
    Kind kind = Kind::Query;
    Method method = Method::Ping;
    NodeId sender_id;
    Key160 target;
    std::string token;
    std::uint16_t port = 0;
    bool implied_port = false;
    std::vector<Endpoint> values;
    std::vector<CompactContact> nodes;
    int error_code = 0;
    std::string error_message;

    friend bool operator==(const Message&, const Message&) = default;

    static Message query(Method m, std::string tid, const NodeId& sender);
    static Message response(std::string tid, const NodeId& sender);
    static Message error(std::string tid, int code, std::string text);
};

enum class Errc {
    NotBencoded,
    MissingField,
    UnknownMethod,
    BodyTooLarge,
};

const char* to_string(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, std::string transaction_id, const std::string& what)
        : std::runtime_error(what), code_(code), transaction_id_(std::move(transaction_id)) {}
    Errc code() const { return code_; }
    /// Transaction ID of the offending datagram when it could be recovered,
    /// so that a KRPC error reply can still be correlated.
    const std::string& transaction_id() const { return transaction_id_; }

private:
    Errc code_;
    std::string transaction_id_;
};

Message parse_message(std::string_view packet);
std::string serialize_message(const Message& msg);

std::string encode_compact_nodes(const std::vector<CompactContact>& nodes);
/// Throws Error(MissingField) when the length is not a multiple of 26.
std::vector<CompactContact> decode_compact_nodes(std::string_view raw);

/// Mints and verifies announce tokens. A token is the first 8 bytes of a
/// keyed hash over the requester's IP, keyed by a per-epoch secret derived
/// from a master secret; epochs advance every rotation period and tokens
/// from the current or previous epoch verify.
class TokenAuthority {
public:
    explicit TokenAuthority(std::uint64_t master_seed, Duration rotation = minutes(5));

    std::uint64_t epoch_at(TimePoint now) const;

    std::string mint_token(std::uint64_t epoch, const Endpoint& requester) const;
    bool verify_token(std::string_view token, const Endpoint& requester, std::uint64_t current_epoch) const;

    std::string mint(const Endpoint& requester, TimePoint now) const { return mint_token(epoch_at(now), requester); }
    bool verify(std::string_view token, const Endpoint& requester, TimePoint now) const {
        return verify_token(token, requester, epoch_at(now));
    }

private:
    std::string master_;
    Duration rotation_;
};

}  // namespace dhtidx::krpc
