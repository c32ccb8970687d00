#include "dhtidx/metadata_exchange.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <system_error>

#include "dhtidx/bencode.hpp"
#include "dhtidx/store.hpp"

namespace dhtidx::metadata {

namespace {

constexpr std::string_view kProtocol = "BitTorrent protocol";
// Anything longer than a full data message plus its header is abuse.
constexpr std::size_t kMaxMessage = kPieceSize + 1024;

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

std::uint32_t get_u32(std::string_view in) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(in[0])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(in[1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(in[2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(in[3]));
}

struct ParsedHandshake {
    Infohash infohash;
    bool extensions = false;
};

std::optional<ParsedHandshake> parse_handshake(std::string_view b) {
    if (b.size() < kHandshakeSize) return std::nullopt;
    if (static_cast<unsigned char>(b[0]) != kProtocol.size() || b.substr(1, kProtocol.size()) != kProtocol) {
        return std::nullopt;
    }
    ParsedHandshake h;
    h.extensions = (static_cast<unsigned char>(b[20 + 5]) & 0x10) != 0;
    h.infohash = Key160::from_bytes(b.substr(28, 20));
    return h;
}

std::string ext_handshake_payload(std::optional<std::size_t> metadata_size) {
    bencode::Value m = bencode::Value::dict({});
    m.set("ut_metadata", bencode::Value(static_cast<std::int64_t>(kLocalUtMetadataId)));
    bencode::Value d = bencode::Value::dict({});
    d.set("m", std::move(m));
    if (metadata_size) d.set("metadata_size", bencode::Value(static_cast<std::int64_t>(*metadata_size)));
    d.set("v", bencode::Value("dhtidx"));
    return bencode::encode(d);
}

// Splits complete length-prefixed messages off the front of `buffer`.
// Returns false on an oversized message.
template <typename F>
bool drain_messages(std::string& buffer, F&& on_message) {
    std::size_t pos = 0;
    while (buffer.size() - pos >= 4) {
        const std::uint32_t len = get_u32(std::string_view(buffer).substr(pos, 4));
        if (len > kMaxMessage) return false;
        if (buffer.size() - pos - 4 < len) break;
        if (len > 0 && !on_message(std::string_view(buffer).substr(pos + 4, len))) {
            buffer.erase(0, pos + 4 + len);
            return true;
        }
        pos += 4 + len;
    }
    buffer.erase(0, pos);
    return true;
}

}  // namespace

std::string sha1(std::string_view bytes) {
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
    return std::string(reinterpret_cast<const char*>(digest), SHA_DIGEST_LENGTH);
}

Key160 infohash_of(std::string_view info_dict) { return Key160::from_bytes(sha1(info_dict)); }

std::size_t piece_count(std::size_t metadata_size) { return (metadata_size + kPieceSize - 1) / kPieceSize; }

std::size_t piece_length(std::size_t metadata_size, std::size_t index) {
    const std::size_t start = index * kPieceSize;
    if (start >= metadata_size) return 0;
    return std::min(kPieceSize, metadata_size - start);
}

std::string build_handshake(const Infohash& infohash, const Key160& peer_id, bool extensions) {
    std::string out;
    out.reserve(kHandshakeSize);
    out.push_back(static_cast<char>(kProtocol.size()));
    out.append(kProtocol);
    std::string reserved(8, '\0');
    if (extensions) reserved[5] = 0x10;
    out += reserved;
    out += infohash.to_bytes();
    out += peer_id.to_bytes();
    return out;
}

std::string build_extended(std::uint8_t ext_id, std::string_view payload) {
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(payload.size() + 2));
    out.push_back(static_cast<char>(kExtendedMessageId));
    out.push_back(static_cast<char>(ext_id));
    out.append(payload);
    return out;
}

const char* to_string(FetchErrc e) {
    switch (e) {
        case FetchErrc::NoUsablePeers: return "no_usable_peers";
        case FetchErrc::SizeMismatch: return "size_mismatch";
        case FetchErrc::HashMismatch: return "hash_mismatch";
        case FetchErrc::Timeout: return "timeout";
    }
    return "unknown";
}

const char* to_string(SessionFailure f) {
    switch (f) {
        case SessionFailure::None: return "none";
        case SessionFailure::BadHandshake: return "bad_handshake";
        case SessionFailure::WrongInfohash: return "wrong_infohash";
        case SessionFailure::NoExtensions: return "no_extensions";
        case SessionFailure::NoMetadataSupport: return "no_ut_metadata";
        case SessionFailure::InvalidSize: return "invalid_size";
        case SessionFailure::SizeMismatch: return "size_mismatch";
        case SessionFailure::Rejected: return "rejected";
        case SessionFailure::ProtocolError: return "protocol_error";
        case SessionFailure::HashMismatch: return "hash_mismatch";
        case SessionFailure::Closed: return "closed";
        case SessionFailure::Timeout: return "timeout";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------

MetadataSession::MetadataSession(const Infohash& infohash, const Key160& peer_id, PartialMetadata partial)
    : role_(Role::Initiator), infohash_(infohash), peer_id_(peer_id), partial_(std::move(partial)) {}

MetadataSession::MetadataSession(const Key160& peer_id, InfohashFilter accept)
    : role_(Role::Acceptor), peer_id_(peer_id), accept_(std::move(accept)) {}

std::string MetadataSession::handshake_bytes() const {
    return build_handshake(*infohash_, peer_id_) + build_extended(0, ext_handshake_payload(std::nullopt));
}

std::string MetadataSession::start() {
    if (role_ == Role::Acceptor) return {};
    return handshake_bytes();
}

void MetadataSession::fail(SessionFailure f) {
    if (status_ == Status::Failed || status_ == Status::Complete) return;
    status_ = Status::Failed;
    failure_ = f;
}

std::string MetadataSession::feed(std::string_view bytes) {
    std::string out;
    if (status_ == Status::Failed || status_ == Status::Complete) return out;
    buffer_.append(bytes);

    if (status_ == Status::Handshaking) {
        if (buffer_.size() < kHandshakeSize) return out;
        auto hs = parse_handshake(buffer_);
        if (!hs) {
            fail(SessionFailure::BadHandshake);
            return out;
        }
        if (role_ == Role::Initiator) {
            if (hs->infohash != *infohash_) {
                fail(SessionFailure::WrongInfohash);
                return out;
            }
        } else {
            if (!accept_ || !accept_(hs->infohash)) {
                fail(SessionFailure::WrongInfohash);
                return out;
            }
            infohash_ = hs->infohash;
        }
        if (!hs->extensions) {
            fail(SessionFailure::NoExtensions);
            return out;
        }
        buffer_.erase(0, kHandshakeSize);
        if (role_ == Role::Acceptor) out += handshake_bytes();
        status_ = Status::AwaitingExtHandshake;
    }

    const bool ok = drain_messages(buffer_, [&](std::string_view msg) {
        handle_message(msg, out);
        return status_ != Status::Failed && status_ != Status::Complete;
    });
    if (!ok) fail(SessionFailure::ProtocolError);
    return out;
}

void MetadataSession::handle_message(std::string_view msg, std::string& out) {
    if (static_cast<std::uint8_t>(msg[0]) != kExtendedMessageId) return;
    if (msg.size() < 2) {
        fail(SessionFailure::ProtocolError);
        return;
    }
    handle_extended(static_cast<std::uint8_t>(msg[1]), msg.substr(2), out);
}

void MetadataSession::handle_extended(std::uint8_t ext_id, std::string_view payload, std::string& out) {
    if (ext_id == 0) {
        if (status_ != Status::AwaitingExtHandshake) return;
        bencode::Value hs;
        try {
            hs = bencode::decode(payload);
        } catch (const bencode::Error&) {
            fail(SessionFailure::ProtocolError);
            return;
        }
        const bencode::Value* m = hs.find_dict("m");
        const auto id = m ? m->find_int("ut_metadata") : nullptr;
        if (!id || *id <= 0 || *id > 255) {
            fail(SessionFailure::NoMetadataSupport);
            return;
        }
        remote_ut_metadata_ = static_cast<std::uint8_t>(*id);
        const auto size = hs.find_int("metadata_size");
        if (!size || *size <= 0 || static_cast<std::uint64_t>(*size) > kMaxMetadataSize) {
            fail(SessionFailure::InvalidSize);
            return;
        }
        const auto n = static_cast<std::size_t>(*size);
        if (partial_.size != 0 && partial_.size != n) {
            fail(SessionFailure::SizeMismatch);
            return;
        }
        partial_.size = n;
        status_ = Status::Downloading;
        for (std::size_t i = 0; i < piece_count(n); ++i) {
            if (partial_.pieces.count(i)) continue;
            bencode::Value req = bencode::Value::dict({});
            req.set("msg_type", bencode::Value(0));
            req.set("piece", bencode::Value(static_cast<std::int64_t>(i)));
            out += build_extended(remote_ut_metadata_, bencode::encode(req));
            ++pieces_requested_;
        }
        return;
    }
    if (ext_id != kLocalUtMetadataId || status_ != Status::Downloading) return;

    bencode::Value head;
    std::size_t consumed = 0;
    try {
        auto [v, used] = bencode::decode_prefix(payload);
        head = std::move(v);
        consumed = used;
    } catch (const bencode::Error&) {
        fail(SessionFailure::ProtocolError);
        return;
    }
    const auto type = head.find_int("msg_type");
    const auto piece = head.find_int("piece");
    if (!type || !piece || *piece < 0) {
        fail(SessionFailure::ProtocolError);
        return;
    }
    if (*type == 2) {
        fail(SessionFailure::Rejected);
        return;
    }
    if (*type != 1) return;
    const auto index = static_cast<std::size_t>(*piece);
    const std::string_view data = payload.substr(consumed);
    if (index >= piece_count(partial_.size) || data.size() != piece_length(partial_.size, index)) {
        fail(SessionFailure::ProtocolError);
        return;
    }
    partial_.pieces.emplace(index, std::string(data));
    if (partial_.pieces.size() < piece_count(partial_.size)) return;

    std::string assembled;
    assembled.reserve(partial_.size);
    for (const auto& [i, p] : partial_.pieces) assembled += p;
    if (infohash_of(assembled) != *infohash_) {
        // Keep nothing from this peer: any of its pieces may be the bad one.
        partial_ = PartialMetadata{};
        fail(SessionFailure::HashMismatch);
        return;
    }
    metadata_ = std::move(assembled);
    status_ = Status::Complete;
}

// ---------------------------------------------------------------------------

MetadataServer::MetadataServer(const Key160& peer_id, std::map<Infohash, std::string> torrents, Options options)
    : peer_id_(peer_id), torrents_(std::move(torrents)), options_(options) {}

std::string MetadataServer::preamble(const Infohash& infohash) const {
    std::string out = build_handshake(infohash, peer_id_, options_.extensions);
    if (options_.extensions) out += build_extended(0, ext_handshake_payload(torrents_.at(infohash).size()));
    return out;
}

std::string MetadataServer::start_initiator(const Infohash& infohash) {
    if (!torrents_.count(infohash)) throw std::invalid_argument("metadata server: unknown infohash");
    infohash_ = infohash;
    sent_preamble_ = true;
    return preamble(infohash);
}

std::string MetadataServer::feed(std::string_view bytes) {
    std::string out;
    if (failed_) return out;
    buffer_.append(bytes);
    if (!handshake_received_) {
        if (buffer_.size() < kHandshakeSize) return out;
        auto hs = parse_handshake(buffer_);
        if (!hs || !torrents_.count(hs->infohash) || (infohash_ && *infohash_ != hs->infohash)) {
            failed_ = true;
            return out;
        }
        infohash_ = hs->infohash;
        handshake_received_ = true;
        buffer_.erase(0, kHandshakeSize);
        if (!sent_preamble_) {
            out += preamble(*infohash_);
            sent_preamble_ = true;
        }
    }
    if (!drain_messages(buffer_, [&](std::string_view msg) {
            handle_message(msg, out);
            return !failed_;
        })) {
        failed_ = true;
    }
    return out;
}

void MetadataServer::handle_message(std::string_view msg, std::string& out) {
    if (!options_.extensions || static_cast<std::uint8_t>(msg[0]) != kExtendedMessageId || msg.size() < 2) return;
    const auto ext_id = static_cast<std::uint8_t>(msg[1]);
    const std::string_view payload = msg.substr(2);
    bencode::Value v;
    try {
        v = bencode::decode_prefix(payload).first;
    } catch (const bencode::Error&) {
        failed_ = true;
        return;
    }
    if (ext_id == 0) {
        const bencode::Value* m = v.find_dict("m");
        const auto id = m ? m->find_int("ut_metadata") : nullptr;
        if (id && *id > 0 && *id <= 255) remote_ut_metadata_ = static_cast<std::uint8_t>(*id);
        return;
    }
    if (ext_id != kLocalUtMetadataId || remote_ut_metadata_ == 0) return;
    const auto type = v.find_int("msg_type");
    const auto piece = v.find_int("piece");
    if (!type || *type != 0 || !piece) return;
    const std::string& info = torrents_.at(*infohash_);
    const auto index = static_cast<std::size_t>(*piece);
    bencode::Value reply = bencode::Value::dict({});
    reply.set("piece", bencode::Value(*piece));
    if (*piece < 0 || index >= piece_count(info.size())) {
        reply.set("msg_type", bencode::Value(2));
        out += build_extended(remote_ut_metadata_, bencode::encode(reply));
        return;
    }
    std::string data = info.substr(index * kPieceSize, piece_length(info.size(), index));
    if (options_.tamper && !data.empty()) data[0] = static_cast<char>(data[0] ^ 0x01);
    reply.set("msg_type", bencode::Value(1));
    reply.set("total_size", bencode::Value(static_cast<std::int64_t>(info.size())));
    out += build_extended(remote_ut_metadata_, bencode::encode(reply) + data);
    ++requests_served_;
}

// ---------------------------------------------------------------------------

struct MetadataFetcher::Job {
    Infohash infohash;
    std::vector<Endpoint> peers;
    FetchBudget budget;
    Completion done;
    std::size_t next = 0;
    PartialMetadata partial;
    FetchOutcome outcome;
    bool finished = false;
};

class MetadataFetcher::Connection : public StreamHandler, public std::enable_shared_from_this<Connection> {
public:
    Connection(MetadataFetcher& owner, std::shared_ptr<Job> job, std::weak_ptr<bool> alive)
        : owner_(owner), job_(std::move(job)), alive_(std::move(alive)),
          session_(job_->infohash, owner.peer_id_, job_->partial) {}

    void arm_timeout(Runtime& rt, Duration d) {
        std::weak_ptr<Connection> self = shared_from_this();
        timer_ = rt.schedule(d, [self] {
            if (auto c = self.lock()) c->end(SessionFailure::Timeout);
        });
    }

    void on_open(const std::shared_ptr<Stream>& stream) override {
        stream_ = stream;
        if (done_) {
            stream->close();
            return;
        }
        stream->send(session_.start());
    }

    void on_data(std::string_view bytes) override {
        if (done_) return;
        const std::string reply = session_.feed(bytes);
        if (!reply.empty() && stream_) stream_->send(reply);
        if (session_.status() == MetadataSession::Status::Complete) end(SessionFailure::None);
        else if (session_.status() == MetadataSession::Status::Failed) end(session_.failure());
    }

    void on_close(std::string_view) override { end(SessionFailure::Closed); }

    const MetadataSession& session() const { return session_; }
    SessionFailure result() const { return result_; }

private:
    void end(SessionFailure why) {
        if (done_) return;
        done_ = true;
        result_ = why;
        if (alive_.expired()) return;
        owner_.runtime_.cancel(timer_);
        auto keep = shared_from_this();
        if (stream_) {
            auto s = std::move(stream_);
            s->close();
        }
        owner_.conclude(job_, keep);
    }

    MetadataFetcher& owner_;
    std::shared_ptr<Job> job_;
    std::weak_ptr<bool> alive_;
    MetadataSession session_;
    std::shared_ptr<Stream> stream_;
    TimerId timer_ = 0;
    bool done_ = false;
    SessionFailure result_ = SessionFailure::None;
};

MetadataFetcher::MetadataFetcher(Runtime& runtime, const Endpoint& local, const Key160& peer_id)
    : runtime_(runtime), local_(local), peer_id_(peer_id), alive_(std::make_shared<bool>(true)) {}

MetadataFetcher::~MetadataFetcher() { alive_.reset(); }

std::size_t MetadataFetcher::active() const { return jobs_.size(); }

void MetadataFetcher::fetch(const Infohash& infohash, std::vector<Endpoint> peers, FetchBudget budget,
                            Completion done) {
    if (peers.empty()) throw std::invalid_argument("fetch_metadata: no peers");
    auto job = std::make_shared<Job>();
    job->infohash = infohash;
    job->peers = std::move(peers);
    job->budget = budget;
    job->done = std::move(done);
    job->outcome.infohash = infohash;
    jobs_.push_back(job);
    try_next(job);
}

void MetadataFetcher::try_next(const std::shared_ptr<Job>& job) {
    if (job->next >= job->peers.size() || job->outcome.peers_tried >= job->budget.max_peers) {
        job->finished = true;
        auto& o = job->outcome;
        auto has = [&](SessionFailure f) { return std::find(o.failures.begin(), o.failures.end(), f) != o.failures.end(); };
        if (has(SessionFailure::HashMismatch)) o.error = FetchErrc::HashMismatch;
        else if (has(SessionFailure::SizeMismatch)) o.error = FetchErrc::SizeMismatch;
        else if (has(SessionFailure::Timeout)) o.error = FetchErrc::Timeout;
        else o.error = FetchErrc::NoUsablePeers;
        jobs_.erase(std::remove(jobs_.begin(), jobs_.end(), job), jobs_.end());
        auto done = std::move(job->done);
        if (done) done(o);
        return;
    }
    const Endpoint peer = job->peers[job->next++];
    ++job->outcome.peers_tried;
    auto conn = std::make_shared<Connection>(*this, job, alive_);
    conn->arm_timeout(runtime_, job->budget.per_peer_timeout);
    runtime_.connect_stream(local_, peer, conn);
}

void MetadataFetcher::conclude(const std::shared_ptr<Job>& job, std::shared_ptr<Connection> conn) {
    if (job->finished) return;
    const MetadataSession& s = conn->session();
    job->outcome.pieces_requested += s.pieces_requested();
    if (conn->result() == SessionFailure::None) {
        job->finished = true;
        job->outcome.metadata = s.metadata();
        jobs_.erase(std::remove(jobs_.begin(), jobs_.end(), job), jobs_.end());
        // Deliver outside the stream callback that completed the session.
        auto j = job;
        std::weak_ptr<bool> alive = alive_;
        runtime_.schedule(Duration::zero(), [j, alive] {
            if (alive.expired()) return;
            auto done = std::move(j->done);
            if (done) done(j->outcome);
        });
        return;
    }
    const SessionFailure why = conn->result();
    job->outcome.failures.push_back(why);
    if (s.metadata_size() != 0 && why != SessionFailure::HashMismatch && why != SessionFailure::SizeMismatch) {
        job->partial = s.partial();
    }
    std::weak_ptr<bool> alive = alive_;
    runtime_.schedule(Duration::zero(), [this, job, alive] {
        if (alive.expired() || job->finished) return;
        try_next(job);
    });
}

// ---------------------------------------------------------------------------

FileMetadataSink::FileMetadataSink(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw PersistError(PersistErrc::Io, "cannot create " + dir_.string() + ": " + ec.message());
}

std::filesystem::path FileMetadataSink::path_for(const Infohash& infohash) const {
    return dir_ / (infohash.to_hex() + ".torrent");
}

void FileMetadataSink::put(const Infohash& infohash, std::string_view torrent_file) {
    const auto path = path_for(infohash);
    if (std::filesystem::exists(path)) return;
    const auto tmp = dir_ / (infohash.to_hex() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(torrent_file.data(), static_cast<std::streamsize>(torrent_file.size()));
        if (!out) throw PersistError(PersistErrc::Io, "cannot write " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw PersistError(PersistErrc::Io, "cannot rename to " + path.string() + ": " + ec.message());
}

std::optional<std::string> FileMetadataSink::get(const Infohash& infohash) const {
    std::ifstream in(path_for(infohash), std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void MemoryMetadataSink::put(const Infohash& infohash, std::string_view torrent_file) {
    blobs_.emplace(infohash, std::string(torrent_file));
}

std::optional<std::string> MemoryMetadataSink::get(const Infohash& infohash) const {
    auto it = blobs_.find(infohash);
    if (it == blobs_.end()) return std::nullopt;
    return it->second;
}

std::string wrap_torrent(std::string_view info_dict) {
    std::string out = "d4:info";
    out.append(info_dict);
    out.push_back('e');
    return out;
}

std::optional<std::string> unwrap_torrent(std::string_view torrent_file) {
    if (torrent_file.size() < 9 || torrent_file.substr(0, 7) != "d4:info" || torrent_file.back() != 'e') {
        return std::nullopt;
    }
    const std::string_view inner = torrent_file.substr(7, torrent_file.size() - 8);
    try {
        if (bencode::decode_prefix(inner).second != inner.size()) return std::nullopt;
    } catch (const bencode::Error&) {
        return std::nullopt;
    }
    return std::string(inner);
}

void verify_and_store(const Infohash& infohash, std::string_view metadata, MetadataSink& sink, Store& store,
                      TimePoint now) {
    if (infohash_of(metadata) != infohash) {
        throw PersistError(PersistErrc::VerificationFailed, "metadata does not hash to " + infohash.to_hex());
    }
    sink.put(infohash, wrap_torrent(metadata));

    auto record = store.get(infohash);
    if (!record) {
        store.ingest_batch(std::span(&infohash, 1), now);
        record = store.get(infohash);
    }
    using S = RecordState;
    // Walk the legal path from wherever the record is to INDEXED.
    for (int guard = 0; guard < 8 && record->state != S::Indexed; ++guard) {
        S next;
        switch (record->state) {
            case S::Discovered:
            case S::FailedRetryable: next = S::LookingUp; break;
            case S::LookingUp: next = S::PeersFound; break;
            case S::PeersFound: next = S::Fetching; break;
            case S::Fetching: next = S::Indexed; break;
            default:
                throw StoreError(StoreErrc::IllegalTransition,
                                 std::string("cannot index a record in state ") + to_string(record->state));
        }
        *record = store.transition(infohash, next, now);
    }
}

std::vector<Infohash> audit_index(const Store& store, const MetadataSink& sink) {
    std::vector<Infohash> bad;
    for (const auto& r : store.scan()) {
        if (r.state != RecordState::Indexed) continue;
        const auto blob = sink.get(r.infohash);
        const auto info = blob ? unwrap_torrent(*blob) : std::nullopt;
        if (!info || infohash_of(*info) != r.infohash) bad.push_back(r.infohash);
    }
    return bad;
}

}  // namespace dhtidx::metadata
