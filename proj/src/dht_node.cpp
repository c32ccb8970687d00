#include "dhtidx/dht_node.hpp"

#include <algorithm>

namespace dhtidx {

void PeerStore::add(const Infohash& h, const Endpoint& peer, TimePoint now) {
    auto it = peers_.find(h);
    if (it == peers_.end()) {
        if (peers_.size() >= config_.max_hashes) return;
        it = peers_.emplace(h, std::vector<std::pair<Endpoint, TimePoint>>{}).first;
    }
    auto& list = it->second;
    auto same = std::find_if(list.begin(), list.end(), [&](const auto& p) { return p.first == peer; });
    if (same != list.end()) {
        same->second = now;
        return;
    }
    if (list.size() >= config_.max_peers_per_hash) {
        auto oldest = std::min_element(list.begin(), list.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
        *oldest = {peer, now};
        return;
    }
    list.emplace_back(peer, now);
}

std::vector<Endpoint> PeerStore::get(const Infohash& h, TimePoint now, std::size_t limit) const {
    std::vector<Endpoint> out;
    auto it = peers_.find(h);
    if (it == peers_.end()) return out;
    auto list = it->second;
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [ep, seen] : list) {
        if (out.size() >= limit) break;
        if (now - seen < config_.ttl) out.push_back(ep);
    }
    return out;
}

void PeerStore::expire(TimePoint now) {
    for (auto it = peers_.begin(); it != peers_.end();) {
        std::erase_if(it->second, [&](const auto& p) { return now - p.second >= config_.ttl; });
        it = it->second.empty() ? peers_.erase(it) : std::next(it);
    }
}

krpc::Message find_node_response(const krpc::Message& query, const NodeId& self, const RoutingTable& table,
                                 std::size_t k) {
    auto reply = krpc::Message::response(query.transaction_id, self);
    for (const auto& c : table.closest_contacts(query.target, k)) {
        if (c.id == query.sender_id) continue;
        reply.nodes.push_back(krpc::CompactContact{c.id, c.endpoint});
    }
    return reply;
}

DhtNode::DhtNode(Runtime& runtime, DhtNodeConfig config)
    : runtime_(runtime),
      config_(config),
      table_({config.id}, config.routing),
      tokens_(config.token_seed),
      alive_(std::make_shared<bool>(true)) {
    socket_ = std::make_unique<RpcSocket>(runtime_, config_.endpoint, config_.id, this);
}

DhtNode::~DhtNode() {
    *alive_ = false;
    engine_.reset();
    socket_.reset();
}

LookupEngine& DhtNode::engine() {
    if (!engine_) {
        engine_ = std::make_unique<LookupEngine>(runtime_, table_, nullptr, *this,
                                                 LookupEngineConfig{config_.lookup, config_.lookup_budget});
    }
    return *engine_;
}

void DhtNode::lookup(const Key160& target, LookupMode mode, LookupEngine::Completion done) {
    waiting_.emplace_back(target, mode, std::move(done));
    drain_waiting();
}

void DhtNode::drain_waiting() {
    auto& e = engine();
    while (!waiting_.empty() && e.has_capacity()) {
        auto [target, mode, done] = std::move(waiting_.front());
        waiting_.pop_front();
        std::weak_ptr<bool> alive = alive_;
        e.start_lookup(target, mode, [this, alive, done = std::move(done)](const LookupResult& r) {
            if (done) done(r);
            if (auto a = alive.lock(); a && *a) drain_waiting();
        });
    }
}

void DhtNode::bootstrap(const std::vector<Endpoint>& endpoints) {
    for (const auto& ep : endpoints) {
        auto q = krpc::Message::query(krpc::Method::FindNode, "", config_.id);
        q.target = config_.id;
        std::weak_ptr<bool> alive = alive_;
        CallHandlers h;
        h.on_reply = [this, alive, ep](const krpc::Message& msg) {
            auto a = alive.lock();
            if (!a || !*a || msg.kind != krpc::Kind::Response) return;
            const auto now = runtime_.now();
            table_.insert_contact(msg.sender_id, ep, now);
            table_.record_result(ep, msg.sender_id, CallOutcome::Success, now);
            for (const auto& n : msg.nodes) {
                if (n.id != config_.id) table_.insert_contact(n.id, n.endpoint, now);
            }
        };
        socket_->call(ep, std::move(q), std::move(h));
    }
}

std::optional<krpc::Message> DhtNode::handle_query(RpcSocket&, const Endpoint& from, const krpc::Message& query) {
    const auto now = runtime_.now();
    const auto k = config_.routing.bucket_size;
    switch (query.method) {
        case krpc::Method::Ping:
            return krpc::Message::response(query.transaction_id, config_.id);
        case krpc::Method::FindNode:
            return find_node_response(query, config_.id, table_, k);
        case krpc::Method::GetPeers: {
            auto reply = krpc::Message::response(query.transaction_id, config_.id);
            reply.token = tokens_.mint(from, now);
            reply.values = peers_.get(query.target, now);
            if (reply.values.empty()) reply.nodes = find_node_response(query, config_.id, table_, k).nodes;
            return reply;
        }
        case krpc::Method::AnnouncePeer: {
            if (!tokens_.verify(query.token, from, now)) {
                return krpc::Message::error(query.transaction_id, krpc::kProtocolError, "bad token");
            }
            const Endpoint peer{from.ip, query.implied_port ? from.port : query.port};
            peers_.add(query.target, peer, now);
            return krpc::Message::response(query.transaction_id, config_.id);
        }
    }
    return std::nullopt;
}

void DhtNode::send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) {
    auto q = krpc::Message::query(krpc::Method::GetPeers, "", config_.id);
    q.target = target;
    socket_->call(to.endpoint, std::move(q), std::move(handlers));
}

void DhtNode::send_announce(const Contact& to, const Key160& target, const std::string& token) {
    auto q = krpc::Message::query(krpc::Method::AnnouncePeer, "", config_.id);
    q.target = target;
    q.token = token;
    q.implied_port = true;
    q.port = config_.endpoint.port;
    socket_->call(to.endpoint, std::move(q), CallHandlers{});
}

}  // namespace dhtidx
