#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dhtidx/dht_node.hpp"
#include "dhtidx/lookup_cache.hpp"
#include "dhtidx/lookup_engine.hpp"
#include "dhtidx/metadata_exchange.hpp"
#include "dhtidx/pipeline.hpp"
#include "dhtidx/routing_table.hpp"
#include "dhtidx/rpc.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx::sim {

class InvalidScenario : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LatencyModel {
    /// One-way delay per link: log-normal with this median and sigma. Each
    /// link draws its delay once from the seed.
    double median_ms = 80;
    double sigma = 0.6;
};

/// Simulation parameters. Text form is "key = value" per line, '#' starts a
/// comment; see parse_scenario for the key names.
struct SimScenario {
    std::uint64_t seed = 1;
    std::size_t node_count = 1000;
    LatencyModel latency;
    double loss = 0.02;
    /// Fraction of nodes behind NAT: they never answer unsolicited traffic.
    double nat_fraction = 0.5;
    /// Mean online session length; zero disables churn.
    Duration churn_session = Duration::zero();
    Duration churn_downtime = minutes(10);
    /// Nodes whose answers arrive slow_delay late.
    double slow_fraction = 0;
    Duration slow_delay = seconds(3);

    std::size_t torrent_count = 500;
    double zipf_exponent = 1.0;
    double peers_per_torrent = 3.0;
    std::size_t metadata_min_bytes = 2000;
    std::size_t metadata_max_bytes = 40000;
    /// Fraction of peers serving corrupted pieces / lacking ut_metadata.
    double tamper_fraction = 0;
    double no_extension_fraction = 0;
    /// First announce uniformly within the window, then every interval.
    Duration announce_window = seconds(120);
    Duration announce_interval = seconds(300);

    Duration duration = minutes(10);
    Duration metrics_interval = seconds(10);

    /// Indexer sockets; zero runs the overlay without an indexer.
    std::size_t indexer_sockets = 64;
    std::uint64_t indexer_seed = 7;
    bool indexer_cache = true;
    std::optional<std::filesystem::path> torrent_dir;
    std::optional<std::filesystem::path> store_dir;
};

SimScenario parse_scenario(std::istream& in);
SimScenario load_scenario(const std::filesystem::path& path);
std::string format_scenario(const SimScenario& s);

/// Deterministic virtual-time Runtime: an event heap ordered by
/// (time, insertion sequence), datagrams and byte streams delivered with
/// per-link latency, random loss, NAT filtering and host downtime.
class Simulator : public Runtime {
public:
    struct HostProfile {
        bool nat = false;
        bool online = true;
        Duration extra_delay = Duration::zero();
    };

    struct Counters {
        std::uint64_t datagrams_sent = 0;
        std::uint64_t datagrams_delivered = 0;
        std::uint64_t datagrams_lost = 0;
        std::uint64_t datagrams_filtered = 0;
        std::uint64_t streams_opened = 0;
        std::uint64_t streams_refused = 0;
        std::uint64_t events = 0;
    };

    Simulator(std::uint64_t seed, LatencyModel latency, double loss);
    ~Simulator() override;

    TimePoint now() const override { return now_; }
    TimerId schedule(Duration delay, std::function<void()> fn) override;
    void cancel(TimerId id) override;
    void bind_datagram(const Endpoint& local, DatagramHandler* handler) override;
    void send_datagram(const Endpoint& local, const Endpoint& to, std::string payload) override;
    void listen_stream(const Endpoint& local, StreamAcceptor* acceptor) override;
    void connect_stream(const Endpoint& local, const Endpoint& to, std::shared_ptr<StreamHandler> handler) override;

    /// Runs events up to and including `until`; returns events processed.
    std::uint64_t run_until(TimePoint until);
    /// Runs until `done` holds or no events remain before `limit`.
    bool run_while(const std::function<bool()>& keep_going, TimePoint limit);
    bool idle() const { return timers_.empty(); }

    void set_profile(std::uint32_t ip, HostProfile p) { profiles_[ip] = p; }
    HostProfile profile(std::uint32_t ip) const;
    void set_online(std::uint32_t ip, bool online) { profiles_[ip].online = online; }

    /// One-way delay between two hosts (symmetric, fixed per link).
    Duration link_delay(std::uint32_t a, std::uint32_t b) const;

    std::mt19937_64& rng() { return rng_; }
    const Counters& counters() const { return counters_; }

private:
    class Pipe;
    class PipeEnd;
    struct Event {
        TimePoint at;
        std::uint64_t seq;
        TimerId id;
        bool operator>(const Event& o) const { return at != o.at ? at > o.at : seq > o.seq; }
    };

    bool lost();
    bool nat_blocks(const Endpoint& from, const Endpoint& to) const;
    void open_pinhole(const Endpoint& from, const Endpoint& to);

    TimePoint now_{};
    std::uint64_t seq_ = 0;
    TimerId next_id_ = 1;
    std::priority_queue<Event, std::vector<Event>, std::greater<Event>> heap_;
    std::unordered_map<TimerId, std::function<void()>> timers_;
    std::unordered_map<Endpoint, DatagramHandler*> datagram_;
    std::unordered_map<Endpoint, StreamAcceptor*> acceptors_;
    std::unordered_map<std::uint32_t, HostProfile> profiles_;
    std::vector<std::weak_ptr<Pipe>> pipes_;
    // NAT mappings: (inside endpoint, remote endpoint) -> expiry.
    std::map<std::pair<Endpoint, Endpoint>, TimePoint> pinholes_;
    std::uint64_t seed_;
    LatencyModel latency_;
    double loss_;
    std::mt19937_64 rng_;
    Counters counters_;
};

struct Torrent {
    Infohash infohash;
    std::string info;
    std::vector<std::size_t> peers;  // node indices
};

struct SimPeer {
    bool tamper = false;
    bool extensions = true;
};

struct MetricsRow {
    double t = 0;
    std::uint64_t datagrams = 0;
    double pps = 0;
    std::uint64_t harvested = 0;
    std::uint64_t indexed = 0;
    std::uint64_t failed = 0;
    std::uint64_t dead = 0;
    std::uint64_t lookups_active = 0;
    std::uint64_t lookups_done = 0;
    double mean_queries = 0;
    double cache_hit_rate = 0;
    std::uint64_t queue = 0;
    std::uint64_t filter_capacity = 0;
    std::uint64_t failed_table = 0;
    std::uint64_t injections = 0;
    std::uint64_t passive_indexed = 0;
    std::uint64_t announces = 0;
};

struct SimMetrics {
    std::vector<MetricsRow> rows;
    std::size_t torrents = 0;
    /// Torrents with at least one seeder outside NAT.
    std::size_t reachable_torrents = 0;
    std::size_t reachable_indexed = 0;
    std::size_t indexed = 0;
    std::size_t harvested = 0;
    std::uint64_t hash_mismatches = 0;
    std::uint64_t budget_violations = 0;
    std::uint64_t peak_active_lookups = 0;
    std::uint64_t injections = 0;
    std::uint64_t get_peers_seen = 0;
    std::uint64_t whitelisted_get_peers = 0;
    std::uint64_t passive_indexed = 0;
    std::vector<Infohash> audit_failures;

    std::string csv() const;
};

/// Simulated overlay: nodes with converged routing tables, torrents and
/// their peers, and optionally an indexer running inside the simulator.
class SimWorld {
public:
    static std::unique_ptr<SimWorld> build(const SimScenario& scenario);
    ~SimWorld();

    Simulator& simulator() { return *sim_; }
    const SimScenario& scenario() const { return scenario_; }
    std::size_t size() const { return nodes_.size(); }
    DhtNode& node(std::size_t i) { return *nodes_[i]; }
    bool nat(std::size_t i) const { return nat_[i]; }
    const std::vector<Torrent>& torrents() const { return torrents_; }

    /// Brute-force k XOR-closest ids among online, reachable overlay nodes.
    std::vector<NodeId> oracle_closest(const Key160& target, std::size_t k) const;

    /// Fills `table` from ground truth as a long-running node would have:
    /// up to K random members of every subtree next to each local id.
    void seed_table(RoutingTable& table, std::uint64_t salt) const;

    /// Indexer config derived from the scenario (sockets, seeds, dirs).
    IndexerConfig indexer_config() const;
    /// Creates (once) and starts the indexer.
    Indexer& indexer();
    bool has_indexer() const { return indexer_ != nullptr; }

    /// Schedules peer announces and runs the scenario to its end.
    SimMetrics run();

private:
    explicit SimWorld(const SimScenario& scenario);
    void build_overlay();
    void build_torrents();
    void start_peers();
    void announce(std::size_t node, std::size_t torrent);
    void connect_to_peers(std::size_t node, std::size_t torrent, const std::vector<Endpoint>& peers);
    void schedule_churn(std::size_t node);
    MetricsRow sample(std::uint64_t& last_datagrams, TimePoint& last_t) const;
    SimMetrics summarize() const;

    class PeerListener;

    SimScenario scenario_;
    std::unique_ptr<Simulator> sim_;
    std::vector<std::unique_ptr<DhtNode>> nodes_;
    std::vector<bool> nat_;
    // Reachable members in natural order (ids with node index; indexer
    // virtual nodes carry index SIZE_MAX).
    std::vector<std::pair<NodeId, std::size_t>> members_;
    std::vector<Endpoint> indexer_endpoints_;
    std::vector<NodeId> indexer_ids_;
    std::vector<Torrent> torrents_;
    std::map<std::size_t, std::map<Infohash, std::string>> seeded_;  // node -> torrents it serves
    std::vector<SimPeer> peer_profile_;
    std::vector<std::unique_ptr<PeerListener>> listeners_;
    std::unique_ptr<Indexer> indexer_;
    std::uint64_t announces_ = 0;
    std::shared_ptr<bool> alive_;
};

/// Stand-alone lookup client attached to a world: its own socket(s),
/// routing table seeded from ground truth and optional lookup cache. Used
/// to measure lookups in isolation from the indexer pipeline.
class Probe : public QueryResponder, public QueryTransport {
public:
    Probe(SimWorld& world, std::size_t sockets, bool use_cache, LookupParams params = {}, std::uint64_t salt = 99);
    ~Probe() override;

    /// Runs one lookup to completion in virtual time.
    LookupResult lookup(const Key160& target);

    RoutingTable& table() { return *table_; }
    LookupCache* cache() { return cache_.get(); }
    std::vector<RpcSocket*> sockets();

    std::optional<krpc::Message> handle_query(RpcSocket&, const Endpoint&, const krpc::Message&) override {
        return std::nullopt;
    }
    void send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) override;
    void send_announce(const Contact&, const Key160&, const std::string&) override {}

private:
    SimWorld& world_;
    std::vector<NodeId> ids_;
    std::unique_ptr<RoutingTable> table_;
    std::unique_ptr<LookupCache> cache_;
    std::vector<std::unique_ptr<RpcSocket>> sockets_;
    std::unique_ptr<LookupEngine> engine_;
    std::size_t next_ = 0;
};

}  // namespace dhtidx::sim
