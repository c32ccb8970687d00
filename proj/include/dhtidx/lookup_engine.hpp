#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dhtidx/krpc.hpp"
#include "dhtidx/lookup_cache.hpp"
#include "dhtidx/routing_table.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

enum class LookupMode { PeersOnly, Announce };

enum class CandidateState { New, InFlight, Stalled, Replied, Failed };

struct LookupParams {
    /// N: non-stalled queries in flight per lookup.
    std::size_t concurrency = 10;
    /// K: size of the closest set and of the announce set.
    std::size_t closest = 8;
    /// Seeds drawn from each of routing table and cache.
    std::size_t seed_size = 30;
};

struct LookupStats {
    std::uint32_t queries = 0;
    std::uint32_t replies = 0;
    std::uint32_t stalls = 0;
    std::uint32_t timeouts = 0;
    /// Replies that arrived after their call had been classified stalled.
    std::uint32_t late_replies = 0;
    std::uint32_t cache_seeds = 0;
    std::uint32_t announces = 0;
    Duration duration{};
};

struct LookupResult {
    Key160 target;
    LookupMode mode = LookupMode::PeersOnly;
    std::vector<Endpoint> peers;
    std::vector<Contact> closest;
    LookupStats stats;
};

/// Per-lookup state: candidates ordered by XOR distance to the target.
/// Pure state machine; the engine feeds it events and performs the I/O.
class LookupTask {
public:
    LookupTask(const Key160& target, LookupMode mode, LookupParams params);

    const Key160& target() const { return target_; }
    LookupMode mode() const { return mode_; }

    /// Adds unseen candidates; ids already known are ignored.
    void add_candidates(std::span<const Contact> contacts);
    void add_candidates(std::span<const krpc::CompactContact> contacts, TimePoint now);

    /// Candidates to query now; they move to IN_FLIGHT.
    std::vector<Contact> take_dispatches();

    /// Returns false when the id is not an outstanding call of this task.
    bool on_reply(const NodeId& id, std::span<const krpc::CompactContact> nodes, std::span<const Endpoint> values,
                  std::string token, TimePoint now);
    bool on_stall(const NodeId& id);
    bool on_timeout(const NodeId& id);

    /// No pending calls and no unqueried candidate ahead of the K closest
    /// replied nodes.
    bool finished() const;

    std::size_t in_flight() const { return in_flight_; }
    std::size_t stalled() const { return stalled_; }
    std::size_t candidate_count() const { return candidates_.size(); }
    CandidateState state_of(const NodeId& id) const;

    /// Up to K replied contacts, closest first.
    std::vector<Contact> closest_set() const;
    /// Closest-set members paired with the tokens they handed out.
    std::vector<std::pair<Contact, std::string>> announce_targets() const;

    const std::vector<Endpoint>& peers() const { return peers_; }
    LookupStats& stats() { return stats_; }
    const LookupStats& stats() const { return stats_; }

private:
    struct Candidate {
        Contact contact;
        CandidateState state = CandidateState::New;
        std::string token;
    };

    Candidate* find(const NodeId& id);

    Key160 target_;
    LookupMode mode_;
    LookupParams params_;
    // Keyed by XOR distance to target, so iteration is closest-first.
    std::map<Key160, Candidate> candidates_;
    std::size_t in_flight_ = 0;  // non-stalled outstanding calls
    std::size_t stalled_ = 0;
    std::vector<Endpoint> peers_;
    std::set<Endpoint> peer_set_;
    LookupStats stats_;
};

class LookupBudgetExhausted : public std::runtime_error {
public:
    LookupBudgetExhausted() : std::runtime_error("lookup budget exhausted") {}
};

/// Callbacks for one outstanding query.
struct CallHandlers {
    std::function<void(const krpc::Message&)> on_reply;
    std::function<void()> on_stall;
    std::function<void()> on_timeout;
};

/// Outbound side of the DHT used by lookups.
class QueryTransport {
public:
    virtual ~QueryTransport() = default;
    /// Sends get_peers for `target` to `to`, choosing a local socket.
    virtual void send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) = 0;
    virtual void send_announce(const Contact& to, const Key160& target, const std::string& token) = 0;
};

struct LookupEngineConfig {
    LookupParams params;
    /// Concurrent lookups allowed (3 x sockets for the indexer).
    std::size_t budget = 3;
};

/// Runs iterative lookups against the shared routing table and cache.
class LookupEngine {
public:
    using Completion = std::function<void(const LookupResult&)>;

    LookupEngine(Runtime& runtime, RoutingTable& table, LookupCache* cache, QueryTransport& transport,
                 LookupEngineConfig config);
    ~LookupEngine();

    LookupEngine(const LookupEngine&) = delete;
    LookupEngine& operator=(const LookupEngine&) = delete;

    /// Seeds from table and cache, registers the anchor and dispatches the
    /// first wave. Completion is always invoked asynchronously. Throws
    /// LookupBudgetExhausted when the budget is in use.
    std::uint64_t start_lookup(const Key160& target, LookupMode mode, Completion done);

    bool has_capacity() const { return tasks_.size() < config_.budget; }
    std::size_t active() const { return tasks_.size(); }
    std::size_t budget() const { return config_.budget; }
    /// Highest number of simultaneously active lookups observed.
    std::size_t peak_active() const { return peak_active_; }
    const LookupTask* task(std::uint64_t id) const;

private:
    struct Running {
        LookupTask task;
        Completion done;
        TimePoint started;
    };

    void pump(std::uint64_t id);
    void dispatch(std::uint64_t id, const Contact& c);
    void handle_reply(std::uint64_t id, const Contact& c, const krpc::Message& msg);
    void handle_stall(std::uint64_t id, const Contact& c);
    void handle_timeout(std::uint64_t id, const Contact& c);
    void finish(std::uint64_t id);

    Runtime& runtime_;
    RoutingTable& table_;
    LookupCache* cache_;
    QueryTransport& transport_;
    LookupEngineConfig config_;
    std::unordered_map<std::uint64_t, std::unique_ptr<Running>> tasks_;
    std::uint64_t next_id_ = 1;
    std::size_t peak_active_ = 0;
    std::shared_ptr<bool> alive_;
};

}  // namespace dhtidx
