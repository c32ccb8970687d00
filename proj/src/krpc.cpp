#include "dhtidx/krpc.hpp"

#include <openssl/hmac.h>

#include "dhtidx/bencode.hpp"

namespace dhtidx::krpc {

using bencode::Value;

const char* method_name(Method m) {
    switch (m) {
        case Method::Ping: return "ping";
        case Method::FindNode: return "find_node";
        case Method::GetPeers: return "get_peers";
        case Method::AnnouncePeer: return "announce_peer";
    }
    return "?";
}

const char* to_string(Errc code) {
    switch (code) {
        case Errc::NotBencoded: return "not bencoded";
        case Errc::MissingField: return "missing field";
        case Errc::UnknownMethod: return "unknown method";
        case Errc::BodyTooLarge: return "body too large";
    }
    return "?";
}

Message Message::query(Method m, std::string tid, const NodeId& sender) {
    Message msg;
    msg.kind = Kind::Query;
    msg.method = m;
    msg.transaction_id = std::move(tid);
    msg.sender_id = sender;
    return msg;
}

Message Message::response(std::string tid, const NodeId& sender) {
    Message msg;
    msg.kind = Kind::Response;
    msg.transaction_id = std::move(tid);
    msg.sender_id = sender;
    return msg;
}

Message Message::error(std::string tid, int code, std::string text) {
    Message msg;
    msg.kind = Kind::Error;
    msg.transaction_id = std::move(tid);
    msg.error_code = code;
    msg.error_message = std::move(text);
    return msg;
}

std::string encode_compact_nodes(const std::vector<CompactContact>& nodes) {
    std::string out;
    out.reserve(nodes.size() * kCompactNodeBytes);
    for (const auto& n : nodes) {
        out += n.id.to_bytes();
        out += encode_compact_endpoint(n.endpoint);
    }
    return out;
}

std::vector<CompactContact> decode_compact_nodes(std::string_view raw) {
    if (raw.size() % kCompactNodeBytes != 0) {
        throw Error(Errc::MissingField, {}, "krpc: compact node list length not a multiple of 26");
    }
    std::vector<CompactContact> out;
    out.reserve(raw.size() / kCompactNodeBytes);
    for (std::size_t off = 0; off < raw.size(); off += kCompactNodeBytes) {
        out.push_back({Key160::from_bytes(raw.substr(off, 20)), decode_compact_endpoint(raw.substr(off + 20, 6))});
    }
    return out;
}

namespace {

[[noreturn]] void missing(const std::string& tid, const std::string& what) {
    throw Error(Errc::MissingField, tid, "krpc: " + what);
}

NodeId require_key(const Value& dict, std::string_view key, const std::string& tid) {
    const auto* s = dict.find_string(key);
    if (!s || s->size() != Key160::kBytes) missing(tid, "missing or malformed '" + std::string(key) + "'");
    return Key160::from_bytes(*s);
}

}  // namespace

Message parse_message(std::string_view packet) {
    Value root;
    try {
        root = bencode::decode(packet);
    } catch (const bencode::Error& e) {
        throw Error(Errc::NotBencoded, {}, std::string("krpc: ") + e.what());
    }
    if (!root.is_dict()) missing({}, "datagram is not a dictionary");
    const auto* tid = root.find_string("t");
    if (!tid) missing({}, "missing 't'");
    const auto* y = root.find_string("y");
    if (!y || y->size() != 1) missing(*tid, "missing 'y'");

    Message msg;
    msg.transaction_id = *tid;
    switch ((*y)[0]) {
        case 'q': {
            msg.kind = Kind::Query;
            const auto* q = root.find_string("q");
            if (!q) missing(*tid, "missing 'q'");
            if (*q == "ping") msg.method = Method::Ping;
            else if (*q == "find_node") msg.method = Method::FindNode;
            else if (*q == "get_peers") msg.method = Method::GetPeers;
            else if (*q == "announce_peer") msg.method = Method::AnnouncePeer;
            else throw Error(Errc::UnknownMethod, *tid, "krpc: unknown method '" + *q + "'");
            const auto* a = root.find_dict("a");
            if (!a) missing(*tid, "missing 'a'");
            msg.sender_id = require_key(*a, "id", *tid);
            switch (msg.method) {
                case Method::Ping: break;
                case Method::FindNode: msg.target = require_key(*a, "target", *tid); break;
                case Method::GetPeers: msg.target = require_key(*a, "info_hash", *tid); break;
                case Method::AnnouncePeer: {
                    msg.target = require_key(*a, "info_hash", *tid);
                    const auto* token = a->find_string("token");
                    if (!token) missing(*tid, "missing 'token'");
                    msg.token = *token;
                    if (const auto* implied = a->find_int("implied_port")) msg.implied_port = *implied != 0;
                    const auto* port = a->find_int("port");
                    if (port && *port > 0 && *port <= 65535) msg.port = static_cast<std::uint16_t>(*port);
                    else if (!msg.implied_port) missing(*tid, "missing 'port'");
                    break;
                }
            }
            break;
        }
        case 'r': {
            msg.kind = Kind::Response;
            const auto* r = root.find_dict("r");
            if (!r) missing(*tid, "missing 'r'");
            msg.sender_id = require_key(*r, "id", *tid);
            if (const auto* nodes = r->find_string("nodes")) {
                try {
                    msg.nodes = decode_compact_nodes(*nodes);
                } catch (const Error&) {
                    missing(*tid, "malformed 'nodes'");
                }
            }
            if (const auto* values = r->find_list("values")) {
                for (const auto& v : *values) {
                    if (v.is_string() && v.as_string().size() == 6) msg.values.push_back(decode_compact_endpoint(v.as_string()));
                }
            }
            if (const auto* token = r->find_string("token")) msg.token = *token;
            break;
        }
        case 'e': {
            msg.kind = Kind::Error;
            const auto* e = root.find_list("e");
            if (!e || e->size() < 2 || !(*e)[0].is_int() || !(*e)[1].is_string()) missing(*tid, "malformed 'e'");
            msg.error_code = static_cast<int>((*e)[0].as_int());
            msg.error_message = (*e)[1].as_string();
            break;
        }
        default: missing(*tid, "unknown message type");
    }
    return msg;
}

std::string serialize_message(const Message& msg) {
    Value root;
    root.set("t", msg.transaction_id);
    switch (msg.kind) {
        case Kind::Query: {
            root.set("y", "q");
            root.set("q", method_name(msg.method));
            Value a;
            a.set("id", msg.sender_id.to_bytes());
            switch (msg.method) {
                case Method::Ping: break;
                case Method::FindNode: a.set("target", msg.target.to_bytes()); break;
                case Method::GetPeers: a.set("info_hash", msg.target.to_bytes()); break;
                case Method::AnnouncePeer:
                    a.set("info_hash", msg.target.to_bytes());
                    a.set("token", msg.token);
                    if (msg.port != 0) a.set("port", static_cast<Value::Integer>(msg.port));
                    if (msg.implied_port) a.set("implied_port", 1);
                    break;
            }
            root.set("a", std::move(a));
            break;
        }
        case Kind::Response: {
            root.set("y", "r");
            Value r;
            r.set("id", msg.sender_id.to_bytes());
            if (!msg.nodes.empty()) r.set("nodes", encode_compact_nodes(msg.nodes));
            if (!msg.values.empty()) {
                Value::List values;
                values.reserve(msg.values.size());
                for (const auto& ep : msg.values) values.emplace_back(encode_compact_endpoint(ep));
                r.set("values", Value(std::move(values)));
            }
            if (!msg.token.empty()) r.set("token", msg.token);
            root.set("r", std::move(r));
            break;
        }
        case Kind::Error:
            root.set("y", "e");
            root.set("e", Value::list({Value(static_cast<Value::Integer>(msg.error_code)), Value(msg.error_message)}));
            break;
    }
    std::string out = bencode::encode(root);
    if (out.size() > kMaxDatagram) {
        throw Error(Errc::BodyTooLarge, msg.transaction_id,
                    "krpc: datagram of " + std::to_string(out.size()) + " bytes exceeds 1400");
    }
    return out;
}

namespace {

std::string hmac_sha1(std::string_view key, std::string_view data) {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    HMAC(EVP_sha1(), key.data(), static_cast<int>(key.size()), reinterpret_cast<const unsigned char*>(data.data()),
         data.size(), out, &len);
    return std::string(reinterpret_cast<const char*>(out), len);
}

std::string be64(std::uint64_t v) {
    std::string s(8, '\0');
    for (int i = 7; i >= 0; --i, v >>= 8) s[static_cast<std::size_t>(i)] = static_cast<char>(v & 0xff);
    return s;
}

}  // namespace

TokenAuthority::TokenAuthority(std::uint64_t master_seed, Duration rotation)
    : master_(be64(master_seed)), rotation_(rotation) {}

std::uint64_t TokenAuthority::epoch_at(TimePoint now) const {
    return static_cast<std::uint64_t>(now.time_since_epoch() / rotation_);
}

std::string TokenAuthority::mint_token(std::uint64_t epoch, const Endpoint& requester) const {
    const std::string secret = hmac_sha1(master_, be64(epoch));
    const std::string addr = encode_compact_endpoint(Endpoint{requester.ip, 0}).substr(0, 4);
    return hmac_sha1(secret, addr).substr(0, 8);
}

bool TokenAuthority::verify_token(std::string_view token, const Endpoint& requester, std::uint64_t current_epoch) const {
    if (token.size() != 8) return false;
    if (token == mint_token(current_epoch, requester)) return true;
    return current_epoch > 0 && token == mint_token(current_epoch - 1, requester);
}

}  // namespace dhtidx::krpc
