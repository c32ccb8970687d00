#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dhtidx/identity.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

class Store;

namespace metadata {

inline constexpr std::size_t kPieceSize = 16384;
inline constexpr std::size_t kMaxMetadataSize = 8 * 1024 * 1024;
inline constexpr std::size_t kHandshakeSize = 68;
inline constexpr std::uint8_t kExtendedMessageId = 20;
/// Extension id we advertise for ut_metadata.
inline constexpr std::uint8_t kLocalUtMetadataId = 3;

std::string sha1(std::string_view bytes);
Key160 infohash_of(std::string_view info_dict);

std::size_t piece_count(std::size_t metadata_size);
std::size_t piece_length(std::size_t metadata_size, std::size_t index);

/// 68-byte preamble with the extension-protocol bit set when `extensions`.
std::string build_handshake(const Infohash& infohash, const Key160& peer_id, bool extensions = true);
/// Length-prefixed extended message: <len><20><ext id><payload>.
std::string build_extended(std::uint8_t ext_id, std::string_view payload);

enum class FetchErrc {
    NoUsablePeers,
    SizeMismatch,
    HashMismatch,
    Timeout,
};

const char* to_string(FetchErrc e);

/// Why one peer session ended without metadata.
enum class SessionFailure {
    None,
    BadHandshake,
    WrongInfohash,
    NoExtensions,
    NoMetadataSupport,
    InvalidSize,
    SizeMismatch,
    Rejected,
    ProtocolError,
    HashMismatch,
    Closed,
    Timeout,
};

const char* to_string(SessionFailure f);

/// Pieces gathered so far for one infohash; carried between peers that
/// agree on the metadata size.
struct PartialMetadata {
    std::size_t size = 0;
    std::map<std::size_t, std::string> pieces;
};

/// Requesting side of a ut_metadata exchange, independent of any transport:
/// bytes in through feed(), bytes out through the return values.
class MetadataSession {
public:
    enum class Role { Initiator, Acceptor };
    enum class Status { Handshaking, AwaitingExtHandshake, Downloading, Complete, Failed };
    using InfohashFilter = std::function<bool(const Infohash&)>;

    /// Initiator: we connected to a peer for a known infohash.
    MetadataSession(const Infohash& infohash, const Key160& peer_id, PartialMetadata partial = {});
    /// Acceptor: a peer connected to us; its handshake names the infohash,
    /// which `accept` must approve.
    MetadataSession(const Key160& peer_id, InfohashFilter accept);

    /// Bytes to send when the stream opens (empty for acceptors).
    std::string start();
    /// Consumes received bytes; returns bytes to send.
    std::string feed(std::string_view bytes);

    Status status() const { return status_; }
    SessionFailure failure() const { return failure_; }
    const std::optional<Infohash>& infohash() const { return infohash_; }
    std::size_t metadata_size() const { return partial_.size; }
    std::size_t pieces_requested() const { return pieces_requested_; }
    bool handshake_completed() const { return status_ != Status::Handshaking; }
    /// Verified info dictionary; valid once status() == Complete.
    const std::string& metadata() const { return metadata_; }
    /// Pieces received so far (for resuming on another peer).
    const PartialMetadata& partial() const { return partial_; }

private:
    void fail(SessionFailure f);
    std::string handshake_bytes() const;
    void handle_message(std::string_view msg, std::string& out);
    void handle_extended(std::uint8_t ext_id, std::string_view payload, std::string& out);

    Role role_;
    std::optional<Infohash> infohash_;
    Key160 peer_id_;
    InfohashFilter accept_;
    Status status_ = Status::Handshaking;
    SessionFailure failure_ = SessionFailure::None;
    std::string buffer_;
    std::uint8_t remote_ut_metadata_ = 0;
    PartialMetadata partial_;
    std::size_t pieces_requested_ = 0;
    std::string metadata_;
};

/// Serving side: answers ut_metadata requests for one info dictionary.
/// Used by simulated seeders; `tamper` flips a byte in every served piece,
/// `extensions` = false omits the extension bit.
class MetadataServer {
public:
    struct Options {
        bool extensions = true;
        bool tamper = false;
    };

    MetadataServer(const Key160& peer_id, std::map<Infohash, std::string> torrents, Options options);
    MetadataServer(const Key160& peer_id, std::map<Infohash, std::string> torrents)
        : MetadataServer(peer_id, std::move(torrents), Options{}) {}

    /// Bytes to send when we initiated the stream for `infohash`.
    std::string start_initiator(const Infohash& infohash);
    std::string feed(std::string_view bytes);

    bool failed() const { return failed_; }
    std::size_t requests_served() const { return requests_served_; }

private:
    std::string preamble(const Infohash& infohash) const;
    void handle_message(std::string_view msg, std::string& out);

    Key160 peer_id_;
    std::map<Infohash, std::string> torrents_;
    Options options_;
    std::optional<Infohash> infohash_;
    bool handshake_received_ = false;
    bool sent_preamble_ = false;
    bool failed_ = false;
    std::uint8_t remote_ut_metadata_ = 0;
    std::string buffer_;
    std::size_t requests_served_ = 0;
};

struct FetchBudget {
    std::size_t max_peers = 8;
    Duration per_peer_timeout = seconds(15);
};

struct FetchOutcome {
    Infohash infohash;
    std::optional<std::string> metadata;
    FetchErrc error = FetchErrc::NoUsablePeers;
    std::size_t peers_tried = 0;
    std::size_t pieces_requested = 0;
    std::vector<SessionFailure> failures;
};

/// Drives MetadataSessions over the runtime's stream transport, trying
/// peers one after another until one yields verified metadata.
class MetadataFetcher {
public:
    using Completion = std::function<void(const FetchOutcome&)>;

    MetadataFetcher(Runtime& runtime, const Endpoint& local, const Key160& peer_id);
    ~MetadataFetcher();

    /// Throws std::invalid_argument when peers is empty.
    void fetch(const Infohash& infohash, std::vector<Endpoint> peers, FetchBudget budget, Completion done);

    std::size_t active() const;

private:
    struct Job;
    class Connection;
    void try_next(const std::shared_ptr<Job>& job);
    void conclude(const std::shared_ptr<Job>& job, std::shared_ptr<Connection> conn);

    Runtime& runtime_;
    Endpoint local_;
    Key160 peer_id_;
    std::vector<std::shared_ptr<Job>> jobs_;
    std::shared_ptr<bool> alive_;
};

enum class PersistErrc { VerificationFailed, Io };

class PersistError : public std::runtime_error {
public:
    PersistError(PersistErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    PersistErrc code() const { return code_; }

private:
    PersistErrc code_;
};

/// Where verified metadata goes. The file sink writes <hex>.torrent files;
/// the memory sink keeps blobs for simulations without an output directory.
class MetadataSink {
public:
    virtual ~MetadataSink() = default;
    /// Idempotent per infohash.
    virtual void put(const Infohash& infohash, std::string_view torrent_file) = 0;
    virtual std::optional<std::string> get(const Infohash& infohash) const = 0;
};

class FileMetadataSink : public MetadataSink {
public:
    explicit FileMetadataSink(std::filesystem::path dir);
    void put(const Infohash& infohash, std::string_view torrent_file) override;
    std::optional<std::string> get(const Infohash& infohash) const override;
    std::filesystem::path path_for(const Infohash& infohash) const;

private:
    std::filesystem::path dir_;
};

class MemoryMetadataSink : public MetadataSink {
public:
    void put(const Infohash& infohash, std::string_view torrent_file) override;
    std::optional<std::string> get(const Infohash& infohash) const override;
    std::size_t size() const { return blobs_.size(); }

private:
    std::map<Infohash, std::string> blobs_;
};

/// Minimal torrent envelope around a raw info dictionary: d4:info<info>e.
std::string wrap_torrent(std::string_view info_dict);
/// Extracts the raw info dictionary bytes from a wrapped torrent file.
std::optional<std::string> unwrap_torrent(std::string_view torrent_file);

/// Checks SHA1(metadata) == infohash, writes the torrent to the sink and
/// moves the store record FETCHING -> INDEXED (if it is not already).
void verify_and_store(const Infohash& infohash, std::string_view metadata, MetadataSink& sink, Store& store,
                      TimePoint now);

/// Infohashes recorded INDEXED whose torrent is missing from the sink or
/// does not hash to the key.
std::vector<Infohash> audit_index(const Store& store, const MetadataSink& sink);

}  // namespace metadata
}  // namespace dhtidx
