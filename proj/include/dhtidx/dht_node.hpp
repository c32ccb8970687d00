#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "dhtidx/krpc.hpp"
#include "dhtidx/lookup_engine.hpp"
#include "dhtidx/routing_table.hpp"
#include "dhtidx/rpc.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

/// Peers announced for each infohash, with expiry.
class PeerStore {
public:
    struct Config {
        std::size_t max_hashes = 100000;
        std::size_t max_peers_per_hash = 64;
        Duration ttl = minutes(30);
    };

    PeerStore() : PeerStore(Config{}) {}
    explicit PeerStore(Config config) : config_(config) {}

    void add(const Infohash& h, const Endpoint& peer, TimePoint now);
    /// Live peers for h, newest first, at most `limit`.
    std::vector<Endpoint> get(const Infohash& h, TimePoint now, std::size_t limit = 50) const;
    void expire(TimePoint now);
    std::size_t hash_count() const { return peers_.size(); }

private:
    Config config_;
    std::map<Infohash, std::vector<std::pair<Endpoint, TimePoint>>> peers_;
};

/// Standard answers shared by every KRPC responder in the project.
krpc::Message find_node_response(const krpc::Message& query, const NodeId& self, const RoutingTable& table,
                                 std::size_t k);

struct DhtNodeConfig {
    NodeId id;
    Endpoint endpoint;
    RoutingConfig routing;
    LookupParams lookup;
    std::size_t lookup_budget = 4;
    std::uint64_t token_seed = 0;
};

/// A plain Mainline DHT participant: answers the four RPCs from its own
/// routing table and peer store and runs lookups/announces on request.
class DhtNode : public QueryResponder, public QueryTransport {
public:
    DhtNode(Runtime& runtime, DhtNodeConfig config);
    ~DhtNode() override;

    DhtNode(const DhtNode&) = delete;
    DhtNode& operator=(const DhtNode&) = delete;

    const NodeId& id() const { return config_.id; }
    const Endpoint& endpoint() const { return config_.endpoint; }
    RoutingTable& table() { return table_; }
    const RoutingTable& table() const { return table_; }
    RpcSocket& socket() { return *socket_; }
    PeerStore& peers() { return peers_; }

    /// Runs the lookup now or queues it until a slot frees up.
    void lookup(const Key160& target, LookupMode mode, LookupEngine::Completion done);
    std::size_t queued_lookups() const { return waiting_.size(); }

    /// Sends find_node for our own id to each endpoint and adds responders.
    void bootstrap(const std::vector<Endpoint>& endpoints);

    std::optional<krpc::Message> handle_query(RpcSocket& socket, const Endpoint& from,
                                              const krpc::Message& query) override;
    void send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) override;
    void send_announce(const Contact& to, const Key160& target, const std::string& token) override;

private:
    LookupEngine& engine();
    void drain_waiting();

    Runtime& runtime_;
    DhtNodeConfig config_;
    RoutingTable table_;
    PeerStore peers_;
    krpc::TokenAuthority tokens_;
    std::unique_ptr<RpcSocket> socket_;
    std::unique_ptr<LookupEngine> engine_;
    std::deque<std::tuple<Key160, LookupMode, LookupEngine::Completion>> waiting_;
    std::shared_ptr<bool> alive_;
};

}  // namespace dhtidx
