#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhtidx/identity.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

enum class RecordState : std::uint8_t {
    Discovered = 0,
    LookingUp = 1,
    PeersFound = 2,
    Fetching = 3,
    Indexed = 4,
    FailedRetryable = 5,
    Dead = 6,
};

const char* to_string(RecordState s);
std::optional<RecordState> parse_record_state(std::string_view text);

struct InfohashRecord {
    Infohash infohash;
    RecordState state = RecordState::Discovered;
    std::uint64_t hit_count = 1;
    std::uint32_t fail_count = 0;
    TimePoint first_seen{};
    TimePoint last_state_change{};

    friend bool operator==(const InfohashRecord&, const InfohashRecord&) = default;
};

enum class StoreErrc { StorageFull, IllegalTransition, UnknownHash, Corrupt, Io };

class StoreError : public std::runtime_error {
public:
    StoreError(StoreErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    StoreErrc code() const { return code_; }

private:
    StoreErrc code_;
};

enum class CursorPolicy { Natural, MostFrequent, MostRecent };

/// Traversal position; advances in natural order and wraps at the end of
/// the keyspace. The non-natural policies ignore the position.
struct Cursor {
    Key160 position;
    std::uint64_t wraps = 0;
    CursorPolicy policy = CursorPolicy::Natural;
};

struct StoreConfig {
    /// Directory holding the journal and snapshot; nullopt keeps the store
    /// purely in memory.
    std::optional<std::filesystem::path> dir;
    std::size_t max_records = 50'000'000;
    std::uint32_t max_failures = 5;
    /// LOOKING_UP records older than this become eligible again.
    Duration lease = minutes(15);
    Duration dead_retention = std::chrono::hours(24 * 7);
    /// Minimum time a FAILED_RETRYABLE record rests before it is eligible.
    Duration retry_delay = minutes(1);
    /// fsync the journal after each batch.
    bool sync = true;
};

struct IngestCounts {
    std::size_t inserted = 0;
    std::size_t incremented = 0;
};

struct StoreCounts {
    std::size_t total = 0;
    std::array<std::size_t, 7> by_state{};
};

/// Persistent infohash state machine.
///
/// Records live in memory in natural key order. Every mutating call appends
/// one checksummed batch frame of full record images to an append-only
/// journal; compact() writes a sorted snapshot and truncates the journal.
/// Reopening replays the journal and discards a torn trailing frame.
///
/// On-disk format (little endian, version 1):
///   record  (49 bytes): key[20] state:u8 hits:u64 fails:u32 first_seen:i64 last_change:i64
///                       (state 0xff marks a purged key)
///   journal frame:      "DIJB" version:u16 record_len:u16 count:u32 records crc32:u32
///   snapshot:           "DISN" version:u16 record_len:u16 count:u64 records crc32:u32
class Store {
public:
    static constexpr std::uint16_t kFormatVersion = 1;
    static constexpr std::size_t kRecordBytes = 49;

    explicit Store(StoreConfig config = {});
    ~Store();

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    /// Duplicates inside the batch are consolidated first. New keys start as
    /// DISCOVERED with one hit per sighting; known keys gain hits.
    IngestCounts ingest_batch(std::span<const Infohash> sightings, TimePoint now);

    /// Up to `limit` eligible records starting at the cursor, wrapping past
    /// the keyspace end; returned records move to LOOKING_UP.
    std::vector<InfohashRecord> next_batch(Cursor& cursor, std::size_t limit, TimePoint now);

    /// Applies a legal transition. Moving to FAILED_RETRYABLE counts a
    /// failure and turns into DEAD once max_failures is reached.
    InfohashRecord transition(const Infohash& h, RecordState next, TimePoint now);

    /// Removes DEAD records whose last change is older than the retention.
    std::size_t purge_dead(TimePoint now);

    std::optional<InfohashRecord> get(const Infohash& h) const;
    std::vector<InfohashRecord> scan() const;
    StoreCounts counts() const;
    std::size_t size() const;

    /// Writes a snapshot and truncates the journal (no-op in memory mode).
    void compact();
    /// Newline-delimited "<hex> <state> <hits>".
    void export_text(std::ostream& out) const;

    const StoreConfig& config() const { return config_; }

    static bool legal_transition(RecordState from, RecordState to);

private:
    bool eligible(const InfohashRecord& r, TimePoint now) const;
    void journal(std::span<const InfohashRecord> records, std::span<const Infohash> purged = {});
    void recover();
    void apply_image(const InfohashRecord& r);
    void index_pending(const InfohashRecord& r);

    StoreConfig config_;
    mutable std::shared_mutex mutex_;
    std::map<Infohash, InfohashRecord> records_;
    // Keys in DISCOVERED, LOOKING_UP or FAILED_RETRYABLE: the traversal pool.
    std::set<Infohash> pending_;
    int journal_fd_ = -1;
};

}  // namespace dhtidx
