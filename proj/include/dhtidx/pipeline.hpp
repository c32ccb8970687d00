#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhtidx/admission_filter.hpp"
#include "dhtidx/dht_node.hpp"
#include "dhtidx/krpc.hpp"
#include "dhtidx/lookup_cache.hpp"
#include "dhtidx/lookup_engine.hpp"
#include "dhtidx/metadata_exchange.hpp"
#include "dhtidx/routing_table.hpp"
#include "dhtidx/rpc.hpp"
#include "dhtidx/runtime.hpp"
#include "dhtidx/store.hpp"

namespace dhtidx {

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct IndexerConfig {
    Key160 root_id;
    Key160 traversal_root;
    std::vector<Endpoint> sockets;
    std::vector<Endpoint> bootstrap;

    /// Active lookup budget is this times the socket count.
    std::size_t lookups_per_socket = 3;
    LookupParams lookup;
    RoutingConfig routing;
    bool use_cache = true;
    LookupCacheConfig cache;

    AdmissionConfig admission;
    std::size_t harvest_queue_capacity = 8192;

    StoreConfig store;
    CursorPolicy cursor_policy = CursorPolicy::Natural;

    std::size_t failed_table_capacity = 4096;
    Duration failed_table_ttl = minutes(30);

    std::size_t fetch_concurrency = 64;
    metadata::FetchBudget fetch;
    /// Where verified torrents are written; nullopt keeps them in memory.
    std::optional<std::filesystem::path> torrent_dir;

    Duration ingest_interval = seconds(1);
    Duration prefetch_interval = seconds(10);
    Duration cleanup_interval = seconds(600);
    /// Zero disables periodic stats lines.
    Duration stats_interval = seconds(60);

    std::uint64_t token_seed = 0;

    std::size_t lookup_budget() const { return lookups_per_socket * sockets.size(); }
};

/// Parses the key = value config format. `env` holds overrides keyed by
/// the config key (the CLI maps DHTIDX_STORE_DIR to store.dir and so on).
/// Throws ConfigError naming the offending key.
IndexerConfig parse_indexer_config(std::istream& in, const std::map<std::string, std::string>& env = {});
IndexerConfig load_indexer_config(const std::filesystem::path& path, const std::map<std::string, std::string>& env = {});
/// Every key parse_indexer_config accepts.
const std::vector<std::string>& indexer_config_keys();

/// Root id for a numeric seed: SHA1 of "dhtidx-root:<seed>".
Key160 root_id_from_seed(std::uint64_t seed);

/// Bounded set of recently failed lookups whose hashes we advertise
/// ourselves for.
class FailedLookupTable {
public:
    FailedLookupTable(std::size_t capacity, Duration ttl);

    /// Inserts or refreshes; evicts the entry closest to expiry when full.
    void insert(const Infohash& h, TimePoint now);
    bool contains(const Infohash& h, TimePoint now) const;
    void erase(const Infohash& h);
    std::size_t expire(TimePoint now);
    std::size_t size() const { return expiry_.size(); }
    std::size_t capacity() const { return capacity_; }

private:
    std::size_t capacity_;
    Duration ttl_;
    std::map<Infohash, TimePoint> expiry_;
    std::set<std::pair<TimePoint, Infohash>> by_time_;
};

/// One socket of the multihomed indexer.
struct VirtualNode {
    std::size_t index = 0;
    NodeId id;
    std::unique_ptr<RpcSocket> socket;
    std::uint64_t get_peers_seen = 0;
    std::uint64_t injections = 0;
};

struct IndexerCounters {
    std::uint64_t queries = 0;
    std::uint64_t get_peers = 0;
    std::uint64_t announces_received = 0;
    std::uint64_t bad_tokens = 0;
    std::uint64_t harvest_admitted = 0;
    std::uint64_t harvest_filtered = 0;
    std::uint64_t harvest_dropped = 0;
    std::uint64_t injections = 0;
    std::uint64_t lookups_started = 0;
    std::uint64_t lookups_completed = 0;
    std::uint64_t lookup_queries = 0;
    std::uint64_t lookups_with_peers = 0;
    std::uint64_t fetches_started = 0;
    std::uint64_t fetches_succeeded = 0;
    std::uint64_t fetch_hash_mismatches = 0;
    std::uint64_t passive_sessions = 0;
    std::uint64_t passive_indexed = 0;
    std::uint64_t indexed = 0;
    std::uint64_t peak_active_lookups = 0;
    std::uint64_t budget_violations = 0;
};

/// The multihomed indexer: virtual-node sockets sharing one routing table,
/// lookup cache and store, passive harvesting, natural-order traversal,
/// metadata fetching and passive retrieval.
///
/// Receive paths only parse, answer and enqueue; store batches, lookups and
/// fetches run from timers on the same runtime.
class Indexer : public QueryResponder, public QueryTransport, public StreamAcceptor {
public:
    using StatsSink = std::function<void(const std::string&)>;

    /// `sink` overrides where verified torrents go.
    Indexer(Runtime& runtime, IndexerConfig config, std::shared_ptr<metadata::MetadataSink> sink = nullptr);
    ~Indexer() override;

    Indexer(const Indexer&) = delete;
    Indexer& operator=(const Indexer&) = delete;

    /// Binds sockets, schedules periodic tasks and bootstraps.
    void start();
    /// Cancels timers, ingests what is queued and compacts the store.
    void stop();

    void set_stats_sink(StatsSink sink) { stats_sink_ = std::move(sink); }

    std::optional<krpc::Message> handle_query(RpcSocket& socket, const Endpoint& from,
                                              const krpc::Message& query) override;
    void send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) override;
    void send_announce(const Contact& to, const Key160& target, const std::string& token) override;
    std::shared_ptr<StreamHandler> on_accept(const Endpoint& local, const Endpoint& remote) override;

    /// Tops active lookups up to the budget from the traversal cursors.
    std::size_t traversal_tick();
    void on_lookup_complete(const LookupResult& result);
    /// Moves queued harvest into the store.
    std::size_t ingest_tick();
    void cleanup_tick();

    /// "stats v=1 key=value ..." line.
    std::string stats_line() const;

    const IndexerConfig& config() const { return config_; }
    Store& store() { return *store_; }
    const Store& store() const { return *store_; }
    RoutingTable& table() { return table_; }
    LookupCache* cache() { return cache_.get(); }
    const LookupCache* cache() const { return cache_.get(); }
    AdmissionFilter& filter() { return filter_; }
    LookupEngine& engine() { return *engine_; }
    const LookupEngine& engine() const { return *engine_; }
    FailedLookupTable& failed_table() { return failed_; }
    const std::vector<VirtualNode>& virtual_nodes() const { return nodes_; }
    const std::vector<Cursor>& cursors() const { return cursors_; }
    const IndexerCounters& counters() const { return counters_; }
    std::size_t harvest_queue_size() const { return harvest_.size(); }
    metadata::MetadataSink& sink() { return *sink_; }
    std::size_t active_fetches() const { return active_fetches_; }

private:
    class PassiveSession;

    void schedule_periodic(Duration interval, std::function<void()> fn);
    void harvest(const Infohash& h, TimePoint now);
    void advance(const Infohash& h, RecordState next);
    void pump_fetches();
    void on_fetch_done(const metadata::FetchOutcome& outcome);
    void mark_failed(const Infohash& h);
    void on_passive_metadata(const Infohash& h, const std::string& metadata);
    void refresh_own_ids();
    VirtualNode& node_for(const RpcSocket& socket);

    Runtime& runtime_;
    IndexerConfig config_;
    std::vector<NodeId> local_ids_;
    RoutingTable table_;
    std::unique_ptr<LookupCache> cache_;
    AdmissionFilter filter_;
    std::unique_ptr<Store> store_;
    std::shared_ptr<metadata::MetadataSink> sink_;
    FailedLookupTable failed_;
    PeerStore peer_store_;
    krpc::TokenAuthority tokens_;
    std::vector<VirtualNode> nodes_;
    std::unique_ptr<LookupEngine> engine_;
    std::vector<std::unique_ptr<metadata::MetadataFetcher>> fetchers_;
    std::vector<Cursor> cursors_;
    std::size_t next_cursor_ = 0;
    std::size_t next_socket_ = 0;
    std::deque<Infohash> harvest_;
    std::deque<std::pair<Infohash, std::vector<Endpoint>>> fetch_queue_;
    std::size_t active_fetches_ = 0;
    std::vector<TimerId> timers_;
    std::vector<std::shared_ptr<std::function<void()>>> periodic_;
    StatsSink stats_sink_;
    IndexerCounters counters_;
    std::uint64_t last_datagrams_in_ = 0;
    std::uint64_t last_datagrams_out_ = 0;
    TimePoint last_stats_{};
    bool started_ = false;
    std::shared_ptr<bool> alive_;
};

}  // namespace dhtidx
