#include "dhtidx/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dhtidx {

Key160 root_id_from_seed(std::uint64_t seed) {
    return metadata::infohash_of("dhtidx-root:" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
    throw ConfigError(key, "invalid value for '" + key + "': '" + value + "' (" + why + ")");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') bad_value(key, v, "expected a non-negative integer");
        const auto x = std::stoull(v, &used, 10);
        if (used != v.size()) bad_value(key, v, "expected a non-negative integer");
        return x;
    } catch (const std::logic_error&) {
        bad_value(key, v, "expected a non-negative integer");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) bad_value(key, v, "expected a number");
        return x;
    } catch (const std::logic_error&) {
        bad_value(key, v, "expected a number");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, v, "expected true or false");
}

Key160 to_key(const std::string& key, const std::string& v) {
    try {
        return Key160::from_hex(v);
    } catch (const std::exception&) {
        bad_value(key, v, "expected 40 hex digits");
    }
}

Endpoint to_endpoint(const std::string& key, const std::string& v) {
    try {
        const auto ep = Endpoint::parse(v);
        if (!ep.valid()) bad_value(key, v, "expected a.b.c.d:port");
        return ep;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, v, "expected a.b.c.d:port");
    }
}

using Setter = std::function<void(IndexerConfig&, const std::string& key, const std::string& value)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
    static const std::vector<std::pair<std::string, Setter>> table = {
        {"root_id", [](auto& c, auto& k, auto& v) { c.root_id = to_key(k, v); }},
        {"root_seed", [](auto& c, auto& k, auto& v) { c.root_id = root_id_from_seed(to_u64(k, v)); }},
        {"traversal_root", [](auto& c, auto& k, auto& v) { c.traversal_root = to_key(k, v); }},
        {"socket",
         [](auto& c, auto& k, auto& v) {
             for (const auto& s : split_list(v)) c.sockets.push_back(to_endpoint(k, s));
         }},
        {"bootstrap",
         [](auto& c, auto& k, auto& v) {
             for (const auto& s : split_list(v)) c.bootstrap.push_back(to_endpoint(k, s));
         }},
        {"lookups_per_socket", [](auto& c, auto& k, auto& v) { c.lookups_per_socket = to_u64(k, v); }},
        {"lookup.concurrency", [](auto& c, auto& k, auto& v) { c.lookup.concurrency = to_u64(k, v); }},
        {"lookup.closest", [](auto& c, auto& k, auto& v) { c.lookup.closest = to_u64(k, v); }},
        {"lookup.seed_size", [](auto& c, auto& k, auto& v) { c.lookup.seed_size = to_u64(k, v); }},
        {"routing.bucket_size", [](auto& c, auto& k, auto& v) { c.routing.bucket_size = to_u64(k, v); }},
        {"routing.eviction_failures",
         [](auto& c, auto& k, auto& v) { c.routing.eviction_failures = static_cast<std::uint32_t>(to_u64(k, v)); }},
        {"cache.enabled", [](auto& c, auto& k, auto& v) { c.use_cache = to_bool(k, v); }},
        {"cache.closest_set", [](auto& c, auto& k, auto& v) { c.cache.closest_set = to_u64(k, v); }},
        {"cache.ttl_s",
         [](auto& c, auto& k, auto& v) {
             c.cache.anchor_ttl = c.cache.entry_ttl = seconds(static_cast<std::int64_t>(to_u64(k, v)));
         }},
        {"filter.min_capacity", [](auto& c, auto& k, auto& v) { c.admission.min_capacity = to_u64(k, v); }},
        {"filter.max_capacity", [](auto& c, auto& k, auto& v) { c.admission.max_capacity = to_u64(k, v); }},
        {"filter.increment", [](auto& c, auto& k, auto& v) { c.admission.increment = to_double(k, v); }},
        {"filter.decrement", [](auto& c, auto& k, auto& v) { c.admission.decrement = to_double(k, v); }},
        {"filter.freeze_ms",
         [](auto& c, auto& k, auto& v) { c.admission.freeze = milliseconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"queue.capacity", [](auto& c, auto& k, auto& v) { c.harvest_queue_capacity = to_u64(k, v); }},
        {"store.dir", [](auto& c, auto&, auto& v) { c.store.dir = std::filesystem::path(v); }},
        {"store.max_records", [](auto& c, auto& k, auto& v) { c.store.max_records = to_u64(k, v); }},
        {"store.max_failures",
         [](auto& c, auto& k, auto& v) { c.store.max_failures = static_cast<std::uint32_t>(to_u64(k, v)); }},
        {"store.lease_s",
         [](auto& c, auto& k, auto& v) { c.store.lease = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"store.retry_delay_s",
         [](auto& c, auto& k, auto& v) { c.store.retry_delay = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"store.dead_retention_s",
         [](auto& c, auto& k, auto& v) { c.store.dead_retention = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"store.sync", [](auto& c, auto& k, auto& v) { c.store.sync = to_bool(k, v); }},
        {"cursor.policy",
         [](auto& c, auto& k, auto& v) {
             if (v == "natural") c.cursor_policy = CursorPolicy::Natural;
             else if (v == "most_frequent") c.cursor_policy = CursorPolicy::MostFrequent;
             else if (v == "most_recent") c.cursor_policy = CursorPolicy::MostRecent;
             else bad_value(k, v, "expected natural, most_frequent or most_recent");
         }},
        {"failed.capacity", [](auto& c, auto& k, auto& v) { c.failed_table_capacity = to_u64(k, v); }},
        {"failed.ttl_s",
         [](auto& c, auto& k, auto& v) { c.failed_table_ttl = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"fetch.concurrency", [](auto& c, auto& k, auto& v) { c.fetch_concurrency = to_u64(k, v); }},
        {"fetch.max_peers", [](auto& c, auto& k, auto& v) { c.fetch.max_peers = to_u64(k, v); }},
        {"fetch.peer_timeout_s",
         [](auto& c, auto& k, auto& v) { c.fetch.per_peer_timeout = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"torrent_dir", [](auto& c, auto&, auto& v) { c.torrent_dir = std::filesystem::path(v); }},
        {"interval.ingest_ms",
         [](auto& c, auto& k, auto& v) { c.ingest_interval = milliseconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"interval.prefetch_ms",
         [](auto& c, auto& k, auto& v) { c.prefetch_interval = milliseconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"interval.cleanup_s",
         [](auto& c, auto& k, auto& v) { c.cleanup_interval = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"stats.interval_s",
         [](auto& c, auto& k, auto& v) { c.stats_interval = seconds(static_cast<std::int64_t>(to_u64(k, v))); }},
        {"token_seed", [](auto& c, auto& k, auto& v) { c.token_seed = to_u64(k, v); }},
    };
    return table;
}

const Setter* find_setter(const std::string& key) {
    for (const auto& [name, fn] : setters()) {
        if (name == key) return &fn;
    }
    return nullptr;
}

void validate(const IndexerConfig& c) {
    if (c.sockets.empty()) throw ConfigError("socket", "config needs at least one 'socket'");
    if (c.lookups_per_socket == 0) throw ConfigError("lookups_per_socket", "'lookups_per_socket' must be positive");
    if (c.lookup.concurrency == 0) throw ConfigError("lookup.concurrency", "'lookup.concurrency' must be positive");
    if (c.lookup.closest == 0) throw ConfigError("lookup.closest", "'lookup.closest' must be positive");
    if (c.routing.bucket_size == 0) throw ConfigError("routing.bucket_size", "'routing.bucket_size' must be positive");
    if (c.admission.min_capacity == 0 || c.admission.max_capacity < c.admission.min_capacity) {
        throw ConfigError("filter.max_capacity", "'filter.min_capacity' must be positive and <= 'filter.max_capacity'");
    }
    if (c.harvest_queue_capacity == 0) throw ConfigError("queue.capacity", "'queue.capacity' must be positive");
    if (c.fetch_concurrency == 0) throw ConfigError("fetch.concurrency", "'fetch.concurrency' must be positive");
    if (c.ingest_interval <= Duration::zero()) {
        throw ConfigError("interval.ingest_ms", "'interval.ingest_ms' must be positive");
    }
    if (c.prefetch_interval <= Duration::zero()) {
        throw ConfigError("interval.prefetch_ms", "'interval.prefetch_ms' must be positive");
    }
    if (c.cleanup_interval <= Duration::zero()) {
        throw ConfigError("interval.cleanup_s", "'interval.cleanup_s' must be positive");
    }
}

}  // namespace

const std::vector<std::string>& indexer_config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [name, fn] : setters()) k.push_back(name);
        return k;
    }();
    return keys;
}

IndexerConfig parse_indexer_config(std::istream& in, const std::map<std::string, std::string>& env) {
    IndexerConfig c;
    c.root_id = root_id_from_seed(0);
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(line, "line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        }
        entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& [key, value] : env) {
        if (key == "socket" || key == "bootstrap") {
            std::erase_if(entries, [&](const auto& e) { return e.first == key; });
        }
        entries.emplace_back(key, value);
    }
    for (const auto& [key, value] : entries) {
        const Setter* set = find_setter(key);
        if (!set) throw ConfigError(key, "unknown config key '" + key + "'");
        (*set)(c, key, value);
    }
    validate(c);
    return c;
}

IndexerConfig load_indexer_config(const std::filesystem::path& path, const std::map<std::string, std::string>& env) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file " + path.string());
    return parse_indexer_config(in, env);
}

// ---------------------------------------------------------------------------
// FailedLookupTable

FailedLookupTable::FailedLookupTable(std::size_t capacity, Duration ttl) : capacity_(capacity), ttl_(ttl) {
    if (capacity == 0) throw std::invalid_argument("failed lookup table capacity must be positive");
}

void FailedLookupTable::insert(const Infohash& h, TimePoint now) {
    const TimePoint until = now + ttl_;
    auto it = expiry_.find(h);
    if (it != expiry_.end()) {
        by_time_.erase({it->second, h});
        it->second = until;
        by_time_.insert({until, h});
        return;
    }
    if (expiry_.size() >= capacity_) {
        const auto victim = *by_time_.begin();
        by_time_.erase(by_time_.begin());
        expiry_.erase(victim.second);
    }
    expiry_.emplace(h, until);
    by_time_.insert({until, h});
}

bool FailedLookupTable::contains(const Infohash& h, TimePoint now) const {
    auto it = expiry_.find(h);
    return it != expiry_.end() && now < it->second;
}

void FailedLookupTable::erase(const Infohash& h) {
    auto it = expiry_.find(h);
    if (it == expiry_.end()) return;
    by_time_.erase({it->second, h});
    expiry_.erase(it);
}

std::size_t FailedLookupTable::expire(TimePoint now) {
    std::size_t n = 0;
    while (!by_time_.empty() && by_time_.begin()->first <= now) {
        expiry_.erase(by_time_.begin()->second);
        by_time_.erase(by_time_.begin());
        ++n;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Passive retrieval: a peer that found our address in a get_peers answer
// connects and names a whitelisted infohash; we fetch the metadata from it.

class Indexer::PassiveSession : public StreamHandler, public std::enable_shared_from_this<PassiveSession> {
public:
    PassiveSession(Indexer& owner, std::weak_ptr<bool> alive, const NodeId& peer_id)
        : owner_(owner),
          alive_(std::move(alive)),
          session_(peer_id, [this](const Infohash& h) {
              return !alive_.expired() && owner_.failed_.contains(h, owner_.runtime_.now());
          }) {}

    void on_open(const std::shared_ptr<Stream>& stream) override {
        stream_ = stream;
        if (alive_.expired()) return;
        std::weak_ptr<PassiveSession> self = shared_from_this();
        timer_ = owner_.runtime_.schedule(seconds(60), [self] {
            if (auto s = self.lock()) s->finish();
        });
    }

    void on_data(std::string_view bytes) override {
        if (done_ || alive_.expired()) return;
        const std::string reply = session_.feed(bytes);
        if (!reply.empty() && stream_) stream_->send(reply);
        if (session_.status() == metadata::MetadataSession::Status::Complete) {
            owner_.on_passive_metadata(*session_.infohash(), session_.metadata());
            finish();
        } else if (session_.status() == metadata::MetadataSession::Status::Failed) {
            finish();
        }
    }

    void on_close(std::string_view) override {
        done_ = true;
        if (!alive_.expired()) owner_.runtime_.cancel(timer_);
        stream_.reset();
    }

private:
    void finish() {
        if (done_) return;
        done_ = true;
        if (!alive_.expired()) owner_.runtime_.cancel(timer_);
        if (auto s = std::move(stream_)) s->close();
    }

    Indexer& owner_;
    std::weak_ptr<bool> alive_;
    metadata::MetadataSession session_;
    std::shared_ptr<Stream> stream_;
    TimerId timer_ = 0;
    bool done_ = false;
};

// ---------------------------------------------------------------------------
// Indexer

namespace {

std::vector<NodeId> derive_ids(const IndexerConfig& c) {
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < c.sockets.size(); ++i) ids.push_back(derive_node_id(c.root_id, i));
    return ids;
}

}  // namespace

Indexer::Indexer(Runtime& runtime, IndexerConfig config, std::shared_ptr<metadata::MetadataSink> sink)
    : runtime_(runtime),
      config_(std::move(config)),
      local_ids_(derive_ids(config_)),
      table_(local_ids_, config_.routing),
      filter_(config_.admission),
      store_(std::make_unique<Store>(config_.store)),
      sink_(std::move(sink)),
      failed_(config_.failed_table_capacity, config_.failed_table_ttl),
      tokens_(config_.token_seed),
      alive_(std::make_shared<bool>(true)) {
    if (config_.sockets.empty()) throw ConfigError("socket", "indexer needs at least one socket");
    if (config_.use_cache) cache_ = std::make_unique<LookupCache>(config_.cache);
    if (!sink_) {
        if (config_.torrent_dir) sink_ = std::make_shared<metadata::FileMetadataSink>(*config_.torrent_dir);
        else sink_ = std::make_shared<metadata::MemoryMetadataSink>();
    }
    engine_ = std::make_unique<LookupEngine>(runtime_, table_, cache_.get(), *this,
                                             LookupEngineConfig{config_.lookup, config_.lookup_budget()});
    for (std::size_t i = 0; i < config_.sockets.size(); ++i) {
        cursors_.push_back(Cursor{derive_node_id(config_.traversal_root, i), 0, config_.cursor_policy});
    }
}

Indexer::~Indexer() {
    if (started_) {
        try {
            stop();
        } catch (...) {
            // Destructors must not throw; the journal keeps what was written.
        }
    }
    *alive_ = false;
    engine_.reset();
    fetchers_.clear();
    nodes_.clear();
}

void Indexer::schedule_periodic(Duration interval, std::function<void()> fn) {
    const std::size_t slot = timers_.size();
    timers_.push_back(0);
    auto tick = std::make_shared<std::function<void()>>();
    std::weak_ptr<bool> alive = alive_;
    std::weak_ptr<std::function<void()>> weak_tick = tick;
    *tick = [this, alive, slot, interval, fn = std::move(fn), weak_tick] {
        auto a = alive.lock();
        if (!a || !*a || !started_) return;
        fn();
        if (auto t = weak_tick.lock()) timers_[slot] = runtime_.schedule(interval, *t);
    };
    periodic_.push_back(tick);
    timers_[slot] = runtime_.schedule(interval, *tick);
}

void Indexer::start() {
    if (started_) return;
    started_ = true;
    for (std::size_t i = 0; i < config_.sockets.size(); ++i) {
        VirtualNode vn;
        vn.index = i;
        vn.id = local_ids_[i];
        vn.socket = std::make_unique<RpcSocket>(runtime_, config_.sockets[i], vn.id, this);
        runtime_.listen_stream(config_.sockets[i], this);
        fetchers_.push_back(std::make_unique<metadata::MetadataFetcher>(runtime_, config_.sockets[i], vn.id));
        nodes_.push_back(std::move(vn));
    }
    last_stats_ = runtime_.now();
    schedule_periodic(config_.ingest_interval, [this] { ingest_tick(); });
    schedule_periodic(config_.prefetch_interval, [this] { traversal_tick(); });
    schedule_periodic(config_.cleanup_interval, [this] { cleanup_tick(); });
    if (config_.stats_interval > Duration::zero()) {
        schedule_periodic(config_.stats_interval, [this] {
            const std::string line = stats_line();
            const auto now = runtime_.now();
            last_stats_ = now;
            last_datagrams_in_ = last_datagrams_out_ = 0;
            for (const auto& n : nodes_) {
                last_datagrams_in_ += n.socket->counters().datagrams_received;
                last_datagrams_out_ += n.socket->counters().datagrams_sent;
            }
            if (stats_sink_) stats_sink_(line);
        });
    }

    if (!config_.bootstrap.empty()) {
        for (auto& vn : nodes_) {
            for (const auto& ep : config_.bootstrap) {
                auto q = krpc::Message::query(krpc::Method::FindNode, "", vn.id);
                q.target = vn.id;
                std::weak_ptr<bool> alive = alive_;
                CallHandlers h;
                h.on_reply = [this, alive, ep](const krpc::Message& msg) {
                    auto a = alive.lock();
                    if (!a || !*a || msg.kind != krpc::Kind::Response) return;
                    const auto now = runtime_.now();
                    table_.insert_contact(msg.sender_id, ep, now);
                    table_.record_result(ep, msg.sender_id, CallOutcome::Success, now);
                    for (const auto& n : msg.nodes) table_.insert_contact(n.id, n.endpoint, now);
                };
                vn.socket->call(ep, std::move(q), std::move(h));
            }
        }
        std::weak_ptr<bool> alive = alive_;
        runtime_.schedule(seconds(2), [this, alive] {
            auto a = alive.lock();
            if (a && *a && started_) refresh_own_ids();
        });
    }
}

void Indexer::refresh_own_ids() {
    for (const auto& id : local_ids_) {
        if (!engine_->has_capacity()) break;
        engine_->start_lookup(id, LookupMode::PeersOnly, nullptr);
    }
}

void Indexer::stop() {
    if (!started_) return;
    started_ = false;
    for (auto id : timers_) runtime_.cancel(id);
    timers_.clear();
    periodic_.clear();
    for (const auto& ep : config_.sockets) runtime_.listen_stream(ep, nullptr);
    ingest_tick();
    store_->compact();
}

VirtualNode& Indexer::node_for(const RpcSocket& socket) {
    for (auto& n : nodes_) {
        if (n.socket.get() == &socket) return n;
    }
    return nodes_.front();
}

void Indexer::harvest(const Infohash& h, TimePoint now) {
    if (harvest_.size() >= config_.harvest_queue_capacity) {
        filter_.on_queue_feedback(QueueFeedback::Overflow, now);
        ++counters_.harvest_dropped;
        return;
    }
    if (!filter_.admit(h, now)) {
        ++counters_.harvest_filtered;
        return;
    }
    harvest_.push_back(h);
    ++counters_.harvest_admitted;
}

std::optional<krpc::Message> Indexer::handle_query(RpcSocket& socket, const Endpoint& from,
                                                   const krpc::Message& query) {
    const auto now = runtime_.now();
    VirtualNode& vn = node_for(socket);
    const std::size_t k = config_.routing.bucket_size;
    ++counters_.queries;
    switch (query.method) {
        case krpc::Method::Ping:
            return krpc::Message::response(query.transaction_id, vn.id);
        case krpc::Method::FindNode:
            return find_node_response(query, vn.id, table_, k);
        case krpc::Method::GetPeers: {
            ++counters_.get_peers;
            ++vn.get_peers_seen;
            harvest(query.target, now);
            auto reply = find_node_response(query, vn.id, table_, k);
            reply.token = tokens_.mint(from, now);
            reply.values = peer_store_.get(query.target, now);
            if (failed_.contains(query.target, now)) {
                reply.values.push_back(socket.local());
                ++vn.injections;
                ++counters_.injections;
            }
            return reply;
        }
        case krpc::Method::AnnouncePeer: {
            if (!tokens_.verify(query.token, from, now)) {
                ++counters_.bad_tokens;
                return krpc::Message::error(query.transaction_id, krpc::kProtocolError, "bad token");
            }
            ++counters_.announces_received;
            peer_store_.add(query.target, Endpoint{from.ip, query.implied_port ? from.port : query.port}, now);
            return krpc::Message::response(query.transaction_id, vn.id);
        }
    }
    return std::nullopt;
}

void Indexer::send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) {
    auto& vn = nodes_[next_socket_++ % nodes_.size()];
    auto q = krpc::Message::query(krpc::Method::GetPeers, "", vn.id);
    q.target = target;
    vn.socket->call(to.endpoint, std::move(q), std::move(handlers));
}

void Indexer::send_announce(const Contact& to, const Key160& target, const std::string& token) {
    auto& vn = nodes_[next_socket_++ % nodes_.size()];
    auto q = krpc::Message::query(krpc::Method::AnnouncePeer, "", vn.id);
    q.target = target;
    q.token = token;
    q.implied_port = true;
    q.port = vn.socket->local().port;
    vn.socket->call(to.endpoint, std::move(q), CallHandlers{});
}

std::size_t Indexer::ingest_tick() {
    const auto now = runtime_.now();
    if (harvest_.empty()) {
        filter_.on_queue_feedback(QueueFeedback::Underflow, now);
        return 0;
    }
    std::vector<Infohash> batch(harvest_.begin(), harvest_.end());
    try {
        store_->ingest_batch(batch, now);
        harvest_.clear();
    } catch (const StoreError& e) {
        if (e.code() != StoreErrc::StorageFull) throw;
        // Keep the queue; overflow feedback makes the filter stricter.
        filter_.on_queue_feedback(QueueFeedback::Overflow, now);
        return 0;
    }
    return batch.size();
}

std::size_t Indexer::traversal_tick() {
    if (nodes_.empty()) return 0;
    const auto now = runtime_.now();
    std::size_t dispatched = 0;
    std::size_t empty_in_a_row = 0;
    while (engine_->has_capacity() && empty_in_a_row < cursors_.size()) {
        Cursor& cursor = cursors_[next_cursor_];
        next_cursor_ = (next_cursor_ + 1) % cursors_.size();
        auto batch = store_->next_batch(cursor, 1, now);
        if (batch.empty()) {
            ++empty_in_a_row;
            continue;
        }
        empty_in_a_row = 0;
        std::weak_ptr<bool> alive = alive_;
        engine_->start_lookup(batch.front().infohash, LookupMode::PeersOnly, [this, alive](const LookupResult& r) {
            auto a = alive.lock();
            if (a && *a) on_lookup_complete(r);
        });
        ++counters_.lookups_started;
        ++dispatched;
        counters_.peak_active_lookups = std::max<std::uint64_t>(counters_.peak_active_lookups, engine_->active());
        if (engine_->active() > engine_->budget()) ++counters_.budget_violations;
    }
    return dispatched;
}

void Indexer::advance(const Infohash& h, RecordState next) {
    const auto r = store_->get(h);
    if (r && Store::legal_transition(r->state, next)) store_->transition(h, next, runtime_.now());
}

void Indexer::mark_failed(const Infohash& h) {
    const auto r = store_->get(h);
    if (!r || !Store::legal_transition(r->state, RecordState::FailedRetryable)) return;
    const auto after = store_->transition(h, RecordState::FailedRetryable, runtime_.now());
    if (after.state != RecordState::Dead) failed_.insert(h, runtime_.now());
}

void Indexer::on_lookup_complete(const LookupResult& result) {
    ++counters_.lookups_completed;
    counters_.lookup_queries += result.stats.queries;
    const auto r = store_->get(result.target);
    if (r && r->state == RecordState::LookingUp) {
        if (!result.peers.empty()) {
            ++counters_.lookups_with_peers;
            store_->transition(result.target, RecordState::PeersFound, runtime_.now());
            fetch_queue_.emplace_back(result.target, result.peers);
            pump_fetches();
        } else {
            mark_failed(result.target);
        }
    }
    std::weak_ptr<bool> alive = alive_;
    runtime_.schedule(Duration::zero(), [this, alive] {
        auto a = alive.lock();
        if (a && *a && started_) traversal_tick();
    });
}

void Indexer::pump_fetches() {
    while (active_fetches_ < config_.fetch_concurrency && !fetch_queue_.empty() && !fetchers_.empty()) {
        auto [h, peers] = std::move(fetch_queue_.front());
        fetch_queue_.pop_front();
        const auto r = store_->get(h);
        if (!r || r->state != RecordState::PeersFound) continue;
        store_->transition(h, RecordState::Fetching, runtime_.now());
        ++active_fetches_;
        ++counters_.fetches_started;
        auto& fetcher = *fetchers_[counters_.fetches_started % fetchers_.size()];
        std::weak_ptr<bool> alive = alive_;
        fetcher.fetch(h, std::move(peers), config_.fetch, [this, alive](const metadata::FetchOutcome& o) {
            auto a = alive.lock();
            if (a && *a) on_fetch_done(o);
        });
    }
}

void Indexer::on_fetch_done(const metadata::FetchOutcome& outcome) {
    --active_fetches_;
    const Infohash& h = outcome.infohash;
    if (outcome.metadata) {
        const auto before = store_->get(h);
        try {
            metadata::verify_and_store(h, *outcome.metadata, *sink_, *store_, runtime_.now());
            ++counters_.fetches_succeeded;
            if (before && before->state != RecordState::Indexed) ++counters_.indexed;
            failed_.erase(h);
        } catch (const std::exception&) {
            mark_failed(h);
        }
    } else {
        if (outcome.error == metadata::FetchErrc::HashMismatch) ++counters_.fetch_hash_mismatches;
        const auto r = store_->get(h);
        if (r && r->state == RecordState::Fetching) mark_failed(h);
    }
    pump_fetches();
}

std::shared_ptr<StreamHandler> Indexer::on_accept(const Endpoint& local, const Endpoint&) {
    if (!started_) return nullptr;
    ++counters_.passive_sessions;
    NodeId id = local_ids_.front();
    for (std::size_t i = 0; i < config_.sockets.size(); ++i) {
        if (config_.sockets[i] == local) id = local_ids_[i];
    }
    return std::make_shared<PassiveSession>(*this, alive_, id);
}

void Indexer::on_passive_metadata(const Infohash& h, const std::string& md) {
    const auto before = store_->get(h);
    if (before && before->state == RecordState::Indexed) return;
    try {
        metadata::verify_and_store(h, md, *sink_, *store_, runtime_.now());
        ++counters_.passive_indexed;
        ++counters_.indexed;
        failed_.erase(h);
    } catch (const std::exception&) {
        // Dead records or I/O trouble: leave the record as it is.
    }
}

void Indexer::cleanup_tick() {
    const auto now = runtime_.now();
    if (cache_) cache_->cleanup(now);
    store_->purge_dead(now);
    failed_.expire(now);
    peer_store_.expire(now);
}

std::string Indexer::stats_line() const {
    const auto now = runtime_.now();
    std::uint64_t in = 0, out = 0;
    for (const auto& n : nodes_) {
        in += n.socket->counters().datagrams_received;
        out += n.socket->counters().datagrams_sent;
    }
    const double elapsed = std::max(1e-9, to_seconds(now - last_stats_));
    const auto counts = store_->counts();
    const auto cs = cache_ ? cache_->stats() : LookupCacheStats{};
    const double hit_rate =
        cs.hits + cs.misses == 0 ? 0.0 : static_cast<double>(cs.hits) / static_cast<double>(cs.hits + cs.misses);
    char buf[1024];
    std::snprintf(buf, sizeof buf,
                  "stats v=1 t=%.3f pps_in=%.1f pps_out=%.1f lookups_active=%zu lookups_done=%llu "
                  "store_total=%zu discovered=%zu looking_up=%zu peers_found=%zu fetching=%zu indexed=%zu "
                  "failed_retryable=%zu dead=%zu queue=%zu filter_capacity=%zu filter_pressure=%.3f "
                  "cache_anchors=%zu cache_entries=%zu cache_hit_rate=%.3f failed_table=%zu routing=%zu",
                  to_seconds(now.time_since_epoch()), static_cast<double>(in - last_datagrams_in_) / elapsed,
                  static_cast<double>(out - last_datagrams_out_) / elapsed, engine_->active(),
                  static_cast<unsigned long long>(counters_.lookups_completed), counts.total, counts.by_state[0],
                  counts.by_state[1], counts.by_state[2], counts.by_state[3], counts.by_state[4], counts.by_state[5],
                  counts.by_state[6], harvest_.size(), filter_.capacity(), filter_.pressure(),
                  cache_ ? cache_->anchor_count() : 0, cache_ ? cache_->entry_count() : 0, hit_rate, failed_.size(),
                  table_.size());
    return buf;
}

}  // namespace dhtidx
