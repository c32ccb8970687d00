#include "dhtidx/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "dhtidx/bencode.hpp"

namespace dhtidx::sim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double unit(std::uint64_t x) { return (static_cast<double>(x >> 11) + 0.5) * (1.0 / 9007199254740992.0); }

Key160 random_key(std::mt19937_64& rng) {
    Key160 k;
    for (auto& b : k.bytes()) b = static_cast<std::uint8_t>(rng());
    return k;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

}  // namespace

// ---------------------------------------------------------------------------
// Scenario files

namespace {

struct ScenarioKey {
    const char* name;
    std::function<void(SimScenario&, const std::string&)> set;
    std::function<std::string(const SimScenario&)> get;
};

[[noreturn]] void bad(const std::string& key, const std::string& v, const char* why) {
    throw InvalidScenario("scenario key '" + key + "': invalid value '" + v + "' (" + why + ")");
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    std::uint64_t x = 0;
    try {
        if (v.empty() || v[0] == '-') bad(key, v, "expected a non-negative integer");
        x = std::stoull(v, &used);
    } catch (const std::logic_error&) {
        bad(key, v, "expected a non-negative integer");
    }
    if (used != v.size()) bad(key, v, "expected a non-negative integer");
    return x;
}

double as_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::logic_error&) {
        bad(key, v, "expected a number");
    }
    if (used != v.size() || !std::isfinite(x)) bad(key, v, "expected a number");
    return x;
}

bool as_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad(key, v, "expected true or false");
}

std::string num(double x) {
    std::ostringstream ss;
    ss << x;
    return ss.str();
}

Duration secs(double s) { return std::chrono::duration_cast<Duration>(std::chrono::duration<double>(s)); }

const std::vector<ScenarioKey>& scenario_keys() {
    static const std::vector<ScenarioKey> keys = {
        {"seed", [](auto& s, auto& v) { s.seed = as_u64("seed", v); }, [](auto& s) { return std::to_string(s.seed); }},
        {"node_count", [](auto& s, auto& v) { s.node_count = as_u64("node_count", v); },
         [](auto& s) { return std::to_string(s.node_count); }},
        {"latency.median_ms", [](auto& s, auto& v) { s.latency.median_ms = as_double("latency.median_ms", v); },
         [](auto& s) { return num(s.latency.median_ms); }},
        {"latency.sigma", [](auto& s, auto& v) { s.latency.sigma = as_double("latency.sigma", v); },
         [](auto& s) { return num(s.latency.sigma); }},
        {"loss", [](auto& s, auto& v) { s.loss = as_double("loss", v); }, [](auto& s) { return num(s.loss); }},
        {"nat_fraction", [](auto& s, auto& v) { s.nat_fraction = as_double("nat_fraction", v); },
         [](auto& s) { return num(s.nat_fraction); }},
        {"churn.session_s", [](auto& s, auto& v) { s.churn_session = secs(as_double("churn.session_s", v)); },
         [](auto& s) { return num(to_seconds(s.churn_session)); }},
        {"churn.downtime_s", [](auto& s, auto& v) { s.churn_downtime = secs(as_double("churn.downtime_s", v)); },
         [](auto& s) { return num(to_seconds(s.churn_downtime)); }},
        {"slow_fraction", [](auto& s, auto& v) { s.slow_fraction = as_double("slow_fraction", v); },
         [](auto& s) { return num(s.slow_fraction); }},
        {"slow_delay_ms", [](auto& s, auto& v) { s.slow_delay = milliseconds(as_u64("slow_delay_ms", v)); },
         [](auto& s) { return std::to_string(to_millis(s.slow_delay)); }},
        {"torrent_count", [](auto& s, auto& v) { s.torrent_count = as_u64("torrent_count", v); },
         [](auto& s) { return std::to_string(s.torrent_count); }},
        {"zipf_exponent", [](auto& s, auto& v) { s.zipf_exponent = as_double("zipf_exponent", v); },
         [](auto& s) { return num(s.zipf_exponent); }},
        {"peers_per_torrent", [](auto& s, auto& v) { s.peers_per_torrent = as_double("peers_per_torrent", v); },
         [](auto& s) { return num(s.peers_per_torrent); }},
        {"metadata.min_bytes", [](auto& s, auto& v) { s.metadata_min_bytes = as_u64("metadata.min_bytes", v); },
         [](auto& s) { return std::to_string(s.metadata_min_bytes); }},
        {"metadata.max_bytes", [](auto& s, auto& v) { s.metadata_max_bytes = as_u64("metadata.max_bytes", v); },
         [](auto& s) { return std::to_string(s.metadata_max_bytes); }},
        {"tamper_fraction", [](auto& s, auto& v) { s.tamper_fraction = as_double("tamper_fraction", v); },
         [](auto& s) { return num(s.tamper_fraction); }},
        {"no_extension_fraction",
         [](auto& s, auto& v) { s.no_extension_fraction = as_double("no_extension_fraction", v); },
         [](auto& s) { return num(s.no_extension_fraction); }},
        {"announce.window_s", [](auto& s, auto& v) { s.announce_window = secs(as_double("announce.window_s", v)); },
         [](auto& s) { return num(to_seconds(s.announce_window)); }},
        {"announce.interval_s",
         [](auto& s, auto& v) { s.announce_interval = secs(as_double("announce.interval_s", v)); },
         [](auto& s) { return num(to_seconds(s.announce_interval)); }},
        {"duration_s", [](auto& s, auto& v) { s.duration = secs(as_double("duration_s", v)); },
         [](auto& s) { return num(to_seconds(s.duration)); }},
        {"metrics.interval_s", [](auto& s, auto& v) { s.metrics_interval = secs(as_double("metrics.interval_s", v)); },
         [](auto& s) { return num(to_seconds(s.metrics_interval)); }},
        {"indexer.sockets", [](auto& s, auto& v) { s.indexer_sockets = as_u64("indexer.sockets", v); },
         [](auto& s) { return std::to_string(s.indexer_sockets); }},
        {"indexer.seed", [](auto& s, auto& v) { s.indexer_seed = as_u64("indexer.seed", v); },
         [](auto& s) { return std::to_string(s.indexer_seed); }},
        {"indexer.cache", [](auto& s, auto& v) { s.indexer_cache = as_bool("indexer.cache", v); },
         [](auto& s) { return std::string(s.indexer_cache ? "true" : "false"); }},
        {"indexer.torrent_dir", [](auto& s, auto& v) { s.torrent_dir = std::filesystem::path(v); },
         [](auto& s) { return s.torrent_dir ? s.torrent_dir->string() : std::string(); }},
        {"indexer.store_dir", [](auto& s, auto& v) { s.store_dir = std::filesystem::path(v); },
         [](auto& s) { return s.store_dir ? s.store_dir->string() : std::string(); }},
    };
    return keys;
}

void validate(const SimScenario& s) {
    auto fraction = [](const char* key, double x) {
        if (!(x >= 0.0 && x <= 1.0)) throw InvalidScenario(std::string("scenario key '") + key + "' must be in [0, 1]");
    };
    if (s.node_count < 2) throw InvalidScenario("scenario key 'node_count' must be at least 2");
    fraction("loss", s.loss);
    fraction("nat_fraction", s.nat_fraction);
    fraction("slow_fraction", s.slow_fraction);
    fraction("tamper_fraction", s.tamper_fraction);
    fraction("no_extension_fraction", s.no_extension_fraction);
    if (s.latency.median_ms <= 0 || s.latency.sigma < 0) {
        throw InvalidScenario("scenario latency needs median_ms > 0 and sigma >= 0");
    }
    if (s.peers_per_torrent < 1) throw InvalidScenario("scenario key 'peers_per_torrent' must be at least 1");
    if (s.metadata_min_bytes < 64 || s.metadata_min_bytes > s.metadata_max_bytes ||
        s.metadata_max_bytes > metadata::kMaxMetadataSize) {
        throw InvalidScenario("scenario metadata sizes must satisfy 64 <= min_bytes <= max_bytes <= 8 MiB");
    }
    if (s.duration <= Duration::zero()) throw InvalidScenario("scenario key 'duration_s' must be positive");
    if (s.metrics_interval <= Duration::zero()) {
        throw InvalidScenario("scenario key 'metrics.interval_s' must be positive");
    }
    if (s.announce_interval <= Duration::zero()) {
        throw InvalidScenario("scenario key 'announce.interval_s' must be positive");
    }
    if (s.node_count > 0xFFFFFF || s.indexer_sockets > 0xFFFF) {
        throw InvalidScenario("scenario too large for the simulated address plan");
    }
}

}  // namespace

SimScenario parse_scenario(std::istream& in) {
    SimScenario s;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidScenario("scenario line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto& keys = scenario_keys();
        auto it = std::find_if(keys.begin(), keys.end(), [&](const ScenarioKey& k) { return key == k.name; });
        if (it == keys.end()) throw InvalidScenario("unknown scenario key '" + key + "'");
        it->set(s, value);
    }
    validate(s);
    return s;
}

SimScenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidScenario("cannot read scenario file " + path.string());
    return parse_scenario(in);
}

std::string format_scenario(const SimScenario& s) {
    std::string out;
    for (const auto& k : scenario_keys()) {
        const std::string v = k.get(s);
        if (!v.empty()) out += std::string(k.name) + " = " + v + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Simulator

class Simulator::Pipe : public std::enable_shared_from_this<Pipe> {
public:
    Pipe(Simulator& sim, Endpoint a, Endpoint b, std::shared_ptr<StreamHandler> ha, std::shared_ptr<StreamHandler> hb)
        : sim_(sim), ep_{a, b}, handler_{std::move(ha), std::move(hb)} {}

    void deliver(int from, std::string bytes) {
        if (closed_[from] || closed_[1 - from]) return;
        Duration delay = sim_.link_delay(ep_[0].ip, ep_[1].ip) + sim_.profile(ep_[from].ip).extra_delay;
        if (sim_.lost()) delay += 3 * delay + milliseconds(200);
        TimePoint at = std::max(sim_.now() + delay, last_[from]);
        last_[from] = at;
        auto self = shared_from_this();
        const int to = 1 - from;
        sim_.schedule(at - sim_.now(), [self, to, bytes = std::move(bytes)] {
            if (self->closed_[to] || !self->handler_[to]) return;
            auto h = self->handler_[to];
            h->on_data(bytes);
        });
    }

    void close(int from) {
        if (closed_[from]) return;
        closed_[from] = true;
        const Duration delay = sim_.link_delay(ep_[0].ip, ep_[1].ip);
        const TimePoint at = std::max(sim_.now() + delay, last_[from]);
        auto self = shared_from_this();
        const int to = 1 - from;
        sim_.schedule(at - sim_.now(), [self, to] {
            auto h = std::move(self->handler_[to]);
            self->handler_[0].reset();
            self->handler_[1].reset();
            if (!self->closed_[to] && h) {
                self->closed_[to] = true;
                h->on_close("");
            }
        });
    }

    void open(const std::shared_ptr<Stream>& a_end, const std::shared_ptr<Stream>& b_end) {
        auto hb = handler_[1];
        auto ha = handler_[0];
        if (hb) hb->on_open(b_end);
        if (ha && !closed_[0]) ha->on_open(a_end);
    }

    void drop() {
        handler_[0].reset();
        handler_[1].reset();
    }

    Endpoint endpoint(int side) const { return ep_[side]; }

private:
    Simulator& sim_;
    Endpoint ep_[2];
    std::shared_ptr<StreamHandler> handler_[2];
    bool closed_[2] = {false, false};
    TimePoint last_[2] = {};
};

class Simulator::PipeEnd : public Stream {
public:
    PipeEnd(std::shared_ptr<Pipe> pipe, int side) : pipe_(std::move(pipe)), side_(side) {}
    void send(std::string_view bytes) override { pipe_->deliver(side_, std::string(bytes)); }
    void close() override { pipe_->close(side_); }
    Endpoint remote() const override { return pipe_->endpoint(1 - side_); }

private:
    std::shared_ptr<Pipe> pipe_;
    int side_;
};

Simulator::Simulator(std::uint64_t seed, LatencyModel latency, double loss)
    : seed_(seed), latency_(latency), loss_(loss), rng_(splitmix64(seed ^ 0x51u)) {}

Simulator::~Simulator() {
    // Break handler <-> stream cycles of connections nobody closed.
    timers_.clear();
    for (auto& w : pipes_) {
        if (auto p = w.lock()) p->drop();
    }
}

TimerId Simulator::schedule(Duration delay, std::function<void()> fn) {
    if (delay < Duration::zero()) delay = Duration::zero();
    const TimerId id = next_id_++;
    timers_.emplace(id, std::move(fn));
    heap_.push(Event{now_ + delay, seq_++, id});
    return id;
}

void Simulator::cancel(TimerId id) {
    if (id != 0) timers_.erase(id);
}

void Simulator::bind_datagram(const Endpoint& local, DatagramHandler* handler) {
    if (handler) datagram_[local] = handler;
    else datagram_.erase(local);
}

Simulator::HostProfile Simulator::profile(std::uint32_t ip) const {
    auto it = profiles_.find(ip);
    return it == profiles_.end() ? HostProfile{} : it->second;
}

Duration Simulator::link_delay(std::uint32_t a, std::uint32_t b) const {
    const std::uint64_t lo = std::min(a, b), hi = std::max(a, b);
    const std::uint64_t h1 = splitmix64(seed_ ^ (lo << 32 | hi));
    const std::uint64_t h2 = splitmix64(h1);
    const double z = std::sqrt(-2.0 * std::log(unit(h1))) * std::cos(2.0 * M_PI * unit(h2));
    double ms = latency_.median_ms * std::exp(latency_.sigma * z);
    ms = std::clamp(ms, 1.0, 2000.0);
    return std::chrono::duration_cast<Duration>(std::chrono::duration<double, std::milli>(ms));
}

bool Simulator::lost() {
    if (loss_ <= 0) return false;
    return unit(rng_()) < loss_;
}

bool Simulator::nat_blocks(const Endpoint& from, const Endpoint& to) const {
    if (!profile(to.ip).nat) return false;
    auto it = pinholes_.find({to, from});
    return it == pinholes_.end() || it->second < now_;
}

void Simulator::open_pinhole(const Endpoint& from, const Endpoint& to) {
    pinholes_[{from, to}] = now_ + seconds(120);
}

void Simulator::send_datagram(const Endpoint& local, const Endpoint& to, std::string payload) {
    ++counters_.datagrams_sent;
    const HostProfile src = profile(local.ip);
    if (!src.online) {
        ++counters_.datagrams_lost;
        return;
    }
    if (src.nat) open_pinhole(local, to);
    if (lost()) {
        ++counters_.datagrams_lost;
        return;
    }
    const Duration delay = link_delay(local.ip, to.ip) + src.extra_delay;
    schedule(delay, [this, local, to, payload = std::move(payload)] {
        if (!profile(to.ip).online || nat_blocks(local, to)) {
            ++counters_.datagrams_filtered;
            return;
        }
        auto it = datagram_.find(to);
        if (it == datagram_.end()) {
            ++counters_.datagrams_filtered;
            return;
        }
        ++counters_.datagrams_delivered;
        it->second->on_datagram(to, local, payload);
    });
}

void Simulator::listen_stream(const Endpoint& local, StreamAcceptor* acceptor) {
    if (acceptor) acceptors_[local] = acceptor;
    else acceptors_.erase(local);
}

void Simulator::connect_stream(const Endpoint& local, const Endpoint& to, std::shared_ptr<StreamHandler> handler) {
    const Duration rtt = 2 * link_delay(local.ip, to.ip);
    const HostProfile dst = profile(to.ip);
    Duration syn_delay = rtt;
    if (lost()) syn_delay += seconds(1);
    if (!profile(local.ip).online || !dst.online || nat_blocks(local, to)) {
        schedule(seconds(21), [handler] { handler->on_close("connection timed out"); });
        return;
    }
    schedule(syn_delay, [this, local, to, handler] {
        auto it = acceptors_.find(to);
        std::shared_ptr<StreamHandler> server;
        if (it != acceptors_.end() && profile(to.ip).online) server = it->second->on_accept(to, local);
        if (!server) {
            ++counters_.streams_refused;
            handler->on_close("connection refused");
            return;
        }
        ++counters_.streams_opened;
        auto pipe = std::make_shared<Pipe>(*this, local, to, handler, server);
        pipes_.push_back(pipe);
        if (pipes_.size() > 4096 && pipes_.size() % 4096 == 0) {
            std::erase_if(pipes_, [](const std::weak_ptr<Pipe>& w) { return w.expired(); });
        }
        pipe->open(std::make_shared<PipeEnd>(pipe, 0), std::make_shared<PipeEnd>(pipe, 1));
    });
}

std::uint64_t Simulator::run_until(TimePoint until) {
    std::uint64_t n = 0;
    while (!heap_.empty() && heap_.top().at <= until) {
        const Event e = heap_.top();
        heap_.pop();
        auto it = timers_.find(e.id);
        if (it == timers_.end()) continue;
        auto fn = std::move(it->second);
        timers_.erase(it);
        now_ = e.at;
        ++counters_.events;
        ++n;
        fn();
    }
    if (now_ < until) now_ = until;
    return n;
}

bool Simulator::run_while(const std::function<bool()>& keep_going, TimePoint limit) {
    while (keep_going()) {
        if (heap_.empty() || heap_.top().at > limit) return false;
        const Event e = heap_.top();
        heap_.pop();
        auto it = timers_.find(e.id);
        if (it == timers_.end()) continue;
        auto fn = std::move(it->second);
        timers_.erase(it);
        now_ = e.at;
        ++counters_.events;
        fn();
    }
    return true;
}

// ---------------------------------------------------------------------------
// Metrics

std::string SimMetrics::csv() const {
    std::string out =
        "t,datagrams,pps,harvested,indexed,failed_retryable,dead,lookups_active,lookups_done,mean_queries,"
        "cache_hit_rate,queue,filter_capacity,failed_table,injections,passive_indexed,announces\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.3f,%llu,%.3f,%llu,%llu,%llu,%llu,%llu,%llu,%.4f,%.4f,%llu,%llu,%llu,%llu,%llu,%llu\n",
                      r.t, static_cast<unsigned long long>(r.datagrams), r.pps,
                      static_cast<unsigned long long>(r.harvested), static_cast<unsigned long long>(r.indexed),
                      static_cast<unsigned long long>(r.failed), static_cast<unsigned long long>(r.dead),
                      static_cast<unsigned long long>(r.lookups_active),
                      static_cast<unsigned long long>(r.lookups_done), r.mean_queries, r.cache_hit_rate,
                      static_cast<unsigned long long>(r.queue), static_cast<unsigned long long>(r.filter_capacity),
                      static_cast<unsigned long long>(r.failed_table), static_cast<unsigned long long>(r.injections),
                      static_cast<unsigned long long>(r.passive_indexed),
                      static_cast<unsigned long long>(r.announces));
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Peers: serve metadata on inbound streams, connect out after announces.

namespace {

class PeerConnection : public StreamHandler, public std::enable_shared_from_this<PeerConnection> {
public:
    PeerConnection(Runtime& rt, std::unique_ptr<metadata::MetadataServer> server,
                   std::optional<Infohash> initiate)
        : rt_(rt), server_(std::move(server)), initiate_(initiate) {}

    void on_open(const std::shared_ptr<Stream>& stream) override {
        stream_ = stream;
        if (initiate_) stream->send(server_->start_initiator(*initiate_));
        std::weak_ptr<PeerConnection> self = shared_from_this();
        timer_ = rt_.schedule(seconds(60), [self] {
            if (auto s = self.lock()) s->shutdown();
        });
    }

    void on_data(std::string_view bytes) override {
        if (!stream_) return;
        const std::string out = server_->feed(bytes);
        if (!out.empty()) stream_->send(out);
        if (server_->failed()) shutdown();
    }

    void on_close(std::string_view) override {
        rt_.cancel(timer_);
        stream_.reset();
    }

private:
    void shutdown() {
        rt_.cancel(timer_);
        if (auto s = std::move(stream_)) s->close();
    }

    Runtime& rt_;
    std::unique_ptr<metadata::MetadataServer> server_;
    std::optional<Infohash> initiate_;
    std::shared_ptr<Stream> stream_;
    TimerId timer_ = 0;
};

metadata::MetadataServer::Options options_for(const SimPeer& p) {
    return metadata::MetadataServer::Options{p.extensions, p.tamper};
}

}  // namespace

class SimWorld::PeerListener : public StreamAcceptor {
public:
    PeerListener(SimWorld& world, std::size_t node) : world_(world), node_(node) {}

    std::shared_ptr<StreamHandler> on_accept(const Endpoint&, const Endpoint&) override {
        const auto& torrents = world_.seeded_.at(node_);
        auto server = std::make_unique<metadata::MetadataServer>(world_.node(node_).id(), torrents,
                                                                   options_for(world_.peer_profile_[node_]));
        return std::make_shared<PeerConnection>(world_.simulator(), std::move(server), std::nullopt);
    }

private:
    SimWorld& world_;
    std::size_t node_;
};

// ---------------------------------------------------------------------------
// World

namespace {

Endpoint node_endpoint(std::size_t i) {
    return Endpoint{static_cast<std::uint32_t>((10u << 24) | static_cast<std::uint32_t>(i + 1)), 6881};
}

Endpoint indexer_endpoint(std::size_t i) {
    return Endpoint{static_cast<std::uint32_t>((11u << 24) | static_cast<std::uint32_t>(i + 1)), 6881};
}

std::string make_info(std::size_t index, std::size_t target_size, std::mt19937_64& rng) {
    const std::string name = "sim-torrent-" + std::to_string(index);
    auto encoded = [&](std::size_t pieces_len) {
        std::string pieces(pieces_len, '\0');
        for (auto& c : pieces) c = static_cast<char>(rng());
        bencode::Value d = bencode::Value::dict({});
        d.set("length", bencode::Value(static_cast<std::int64_t>(pieces_len / 20) * 262144));
        d.set("name", bencode::Value(name));
        d.set("piece length", bencode::Value(262144));
        d.set("pieces", bencode::Value(std::move(pieces)));
        return bencode::encode(d);
    };
    const std::size_t overhead = encoded(0).size() + 8;
    const std::size_t pieces_len = target_size > overhead + 20 ? (target_size - overhead) / 20 * 20 : 20;
    return encoded(pieces_len);
}

}  // namespace

SimWorld::SimWorld(const SimScenario& scenario)
    : scenario_(scenario),
      sim_(std::make_unique<Simulator>(scenario.seed, scenario.latency, scenario.loss)),
      alive_(std::make_shared<bool>(true)) {}

SimWorld::~SimWorld() {
    *alive_ = false;
    indexer_.reset();
    for (std::size_t i = 0; i < nodes_.size(); ++i) sim_->listen_stream(node_endpoint(i), nullptr);
    listeners_.clear();
    nodes_.clear();
    sim_.reset();
}

std::unique_ptr<SimWorld> SimWorld::build(const SimScenario& scenario) {
    validate(scenario);
    std::unique_ptr<SimWorld> w(new SimWorld(scenario));
    w->build_overlay();
    w->build_torrents();
    return w;
}

IndexerConfig SimWorld::indexer_config() const {
    IndexerConfig c;
    c.root_id = root_id_from_seed(scenario_.indexer_seed);
    c.traversal_root = root_id_from_seed(scenario_.indexer_seed + 1);
    for (std::size_t i = 0; i < scenario_.indexer_sockets; ++i) c.sockets.push_back(indexer_endpoint(i));
    c.use_cache = scenario_.indexer_cache;
    c.token_seed = splitmix64(scenario_.seed ^ 0x70u);
    c.store.dir = scenario_.store_dir;
    c.store.sync = false;
    c.torrent_dir = scenario_.torrent_dir;
    c.stats_interval = Duration::zero();
    return c;
}

void SimWorld::build_overlay() {
    std::mt19937_64 rng(splitmix64(scenario_.seed));
    const std::size_t n = scenario_.node_count;
    nat_.assign(n, false);
    nodes_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        DhtNodeConfig cfg;
        cfg.id = random_key(rng);
        cfg.endpoint = node_endpoint(i);
        cfg.token_seed = splitmix64(scenario_.seed ^ (i * 0x9e37u));
        nat_[i] = unit(rng()) < scenario_.nat_fraction;
        Simulator::HostProfile p;
        p.nat = nat_[i];
        if (unit(rng()) < scenario_.slow_fraction) p.extra_delay = scenario_.slow_delay;
        sim_->set_profile(cfg.endpoint.ip, p);
        nodes_.push_back(std::make_unique<DhtNode>(*sim_, cfg));
        if (!nat_[i]) members_.emplace_back(cfg.id, i);
    }
    if (scenario_.indexer_sockets > 0) {
        const auto cfg = indexer_config();
        for (std::size_t i = 0; i < cfg.sockets.size(); ++i) {
            indexer_ids_.push_back(derive_node_id(cfg.root_id, i));
            indexer_endpoints_.push_back(cfg.sockets[i]);
            members_.emplace_back(indexer_ids_.back(), kNoNode - i);
        }
    }
    std::sort(members_.begin(), members_.end());
    for (std::size_t i = 0; i < n; ++i) seed_table(nodes_[i]->table(), i);
    if (scenario_.churn_session > Duration::zero()) {
        for (std::size_t i = 0; i < n; ++i) schedule_churn(i);
    }
}

void SimWorld::seed_table(RoutingTable& table, std::uint64_t salt) const {
    std::mt19937_64 rng(splitmix64(scenario_.seed ^ splitmix64(salt + 0x5eed)));
    const std::size_t k = table.config().bucket_size;
    const auto& locals = table.local_ids();
    auto endpoint_of = [&](const std::pair<NodeId, std::size_t>& m) {
        if (m.second >= nodes_.size()) return indexer_endpoints_[kNoNode - m.second];
        return node_endpoint(m.second);
    };
    auto range = [&](const Prefix& p) {
        auto lo = std::lower_bound(members_.begin(), members_.end(), std::make_pair(p.key(), std::size_t{0}));
        auto hi = std::upper_bound(members_.begin(), members_.end(), std::make_pair(p.last(), kNoNode));
        return std::make_pair(lo, hi);
    };
    for (const auto& local : locals) {
        for (int d = 0; d < Key160::kBits; ++d) {
            Key160 sibling = local;
            sibling.flip_bit(d);
            auto [lo, hi] = range(Prefix(sibling, d + 1));
            std::vector<std::size_t> picks(static_cast<std::size_t>(hi - lo));
            for (std::size_t j = 0; j < picks.size(); ++j) picks[j] = j;
            if (picks.size() > k) {
                for (std::size_t j = 0; j < k; ++j) {
                    std::uniform_int_distribution<std::size_t> pick(j, picks.size() - 1);
                    std::swap(picks[j], picks[pick(rng)]);
                }
                picks.resize(k);
            }
            for (auto j : picks) {
                const auto& m = *(lo + static_cast<std::ptrdiff_t>(j));
                if (std::find(locals.begin(), locals.end(), m.first) != locals.end()) continue;
                table.insert_contact(m.first, endpoint_of(m), TimePoint{});
            }
            // Deeper siblings all lie inside our own half; stop once it is empty.
            auto [olo, ohi] = range(Prefix(local, d + 1));
            std::size_t others = static_cast<std::size_t>(ohi - olo);
            for (auto it = olo; it != ohi; ++it) {
                if (it->first == local) --others;
            }
            if (others == 0) break;
        }
    }
}

void SimWorld::build_torrents() {
    std::mt19937_64 rng(splitmix64(scenario_.seed ^ 0x7077u));
    const std::size_t t = scenario_.torrent_count;
    torrents_.resize(t);
    peer_profile_.resize(nodes_.size());
    for (auto& p : peer_profile_) {
        p.tamper = unit(rng()) < scenario_.tamper_fraction;
        p.extensions = unit(rng()) >= scenario_.no_extension_fraction;
    }
    std::uniform_int_distribution<std::size_t> size_dist(scenario_.metadata_min_bytes, scenario_.metadata_max_bytes);
    std::uniform_int_distribution<std::size_t> node_dist(0, nodes_.size() - 1);
    for (std::size_t i = 0; i < t; ++i) {
        torrents_[i].info = make_info(i, size_dist(rng), rng);
        torrents_[i].infohash = metadata::infohash_of(torrents_[i].info);
        torrents_[i].peers.push_back(node_dist(rng));
    }
    if (t > 0) {
        std::vector<double> cdf(t);
        double acc = 0;
        for (std::size_t i = 0; i < t; ++i) {
            acc += 1.0 / std::pow(static_cast<double>(i + 1), scenario_.zipf_exponent);
            cdf[i] = acc;
        }
        const auto extra = static_cast<std::size_t>(std::llround(static_cast<double>(t) * (scenario_.peers_per_torrent - 1)));
        for (std::size_t e = 0; e < extra; ++e) {
            const double u = unit(rng()) * acc;
            const std::size_t ti = std::min<std::size_t>(t - 1, std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            const std::size_t node = node_dist(rng);
            auto& peers = torrents_[ti].peers;
            if (std::find(peers.begin(), peers.end(), node) == peers.end()) peers.push_back(node);
        }
    }
    for (const auto& tor : torrents_) {
        for (auto node : tor.peers) seeded_[node].emplace(tor.infohash, tor.info);
    }
    for (const auto& [node, torrents] : seeded_) {
        listeners_.push_back(std::make_unique<PeerListener>(*this, node));
        sim_->listen_stream(node_endpoint(node), listeners_.back().get());
    }
}

void SimWorld::schedule_churn(std::size_t node) {
    const std::uint32_t ip = node_endpoint(node).ip;
    std::exponential_distribution<double> up(1.0 / to_seconds(scenario_.churn_session));
    const auto next = secs(up(sim_->rng()));
    std::weak_ptr<bool> alive = alive_;
    sim_->schedule(next, [this, alive, node, ip] {
        if (alive.expired()) return;
        sim_->set_online(ip, false);
        std::exponential_distribution<double> down(1.0 / std::max(1.0, to_seconds(scenario_.churn_downtime)));
        sim_->schedule(secs(down(sim_->rng())), [this, alive, node, ip] {
            if (alive.expired()) return;
            sim_->set_online(ip, true);
            schedule_churn(node);
        });
    });
}

std::vector<NodeId> SimWorld::oracle_closest(const Key160& target, std::size_t k) const {
    std::vector<std::pair<Key160, NodeId>> all;
    for (const auto& [id, idx] : members_) {
        if (idx >= nodes_.size()) continue;
        if (!sim_->profile(node_endpoint(idx).ip).online) continue;
        all.emplace_back(xor_distance(id, target), id);
    }
    k = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
    return out;
}

Indexer& SimWorld::indexer() {
    if (!indexer_) {
        if (scenario_.indexer_sockets == 0) throw InvalidScenario("scenario has no indexer sockets");
        indexer_ = std::make_unique<Indexer>(*sim_, indexer_config());
        seed_table(indexer_->table(), 0xFEED);
        indexer_->start();
    }
    return *indexer_;
}

void SimWorld::announce(std::size_t node, std::size_t torrent) {
    if (!sim_->profile(node_endpoint(node).ip).online) return;
    const Infohash h = torrents_[torrent].infohash;
    std::weak_ptr<bool> alive = alive_;
    nodes_[node]->lookup(h, LookupMode::Announce, [this, alive, node, torrent](const LookupResult& r) {
        if (alive.expired()) return;
        ++announces_;
        connect_to_peers(node, torrent, r.peers);
    });
}

void SimWorld::connect_to_peers(std::size_t node, std::size_t torrent, const std::vector<Endpoint>& peers) {
    const Endpoint self = node_endpoint(node);
    const Infohash h = torrents_[torrent].infohash;
    std::size_t opened = 0;
    for (const auto& ep : peers) {
        if (ep == self || opened >= 8) continue;
        ++opened;
        auto server = std::make_unique<metadata::MetadataServer>(nodes_[node]->id(), seeded_.at(node),
                                                                   options_for(peer_profile_[node]));
        sim_->connect_stream(self, ep, std::make_shared<PeerConnection>(*sim_, std::move(server), h));
    }
}

void SimWorld::start_peers() {
    std::mt19937_64 rng(splitmix64(scenario_.seed ^ 0xA11Cu));
    const auto end = TimePoint{} + scenario_.duration;
    for (std::size_t t = 0; t < torrents_.size(); ++t) {
        for (auto node : torrents_[t].peers) {
            const double first = unit(rng()) * to_seconds(scenario_.announce_window);
            for (TimePoint at = sim_->now() + secs(first); at < end; at += scenario_.announce_interval) {
                std::weak_ptr<bool> alive = alive_;
                sim_->schedule(at - sim_->now(), [this, alive, node, t] {
                    if (!alive.expired()) announce(node, t);
                });
            }
        }
    }
}

MetricsRow SimWorld::sample(std::uint64_t& last_datagrams, TimePoint& last_t) const {
    MetricsRow r;
    const auto now = sim_->now();
    r.t = to_seconds(now.time_since_epoch());
    r.datagrams = sim_->counters().datagrams_sent;
    const double dt = to_seconds(now - last_t);
    r.pps = dt > 0 ? static_cast<double>(r.datagrams - last_datagrams) / dt : 0.0;
    last_datagrams = r.datagrams;
    last_t = now;
    r.announces = announces_;
    if (indexer_) {
        const auto counts = indexer_->store().counts();
        const auto& c = indexer_->counters();
        r.harvested = counts.total;
        r.indexed = counts.by_state[static_cast<std::size_t>(RecordState::Indexed)];
        r.failed = counts.by_state[static_cast<std::size_t>(RecordState::FailedRetryable)];
        r.dead = counts.by_state[static_cast<std::size_t>(RecordState::Dead)];
        r.lookups_active = indexer_->engine().active();
        r.lookups_done = c.lookups_completed;
        r.mean_queries = c.lookups_completed ? static_cast<double>(c.lookup_queries) / static_cast<double>(c.lookups_completed) : 0.0;
        if (const auto* cache = indexer_->cache()) {
            const auto s = cache->stats();
            r.cache_hit_rate = s.hits + s.misses ? static_cast<double>(s.hits) / static_cast<double>(s.hits + s.misses) : 0.0;
        }
        r.queue = indexer_->harvest_queue_size();
        r.filter_capacity = indexer_->filter().capacity();
        r.failed_table = indexer_->failed_table().size();
        r.injections = c.injections;
        r.passive_indexed = c.passive_indexed;
    }
    return r;
}

SimMetrics SimWorld::run() {
    if (scenario_.indexer_sockets > 0) indexer();
    start_peers();
    SimMetrics m;
    std::uint64_t last_datagrams = sim_->counters().datagrams_sent;
    TimePoint last_t = sim_->now();
    const TimePoint end = sim_->now() + scenario_.duration;
    for (TimePoint t = sim_->now() + scenario_.metrics_interval; t <= end; t += scenario_.metrics_interval) {
        sim_->run_until(t);
        m.rows.push_back(sample(last_datagrams, last_t));
    }
    if (sim_->now() < end) {
        sim_->run_until(end);
        m.rows.push_back(sample(last_datagrams, last_t));
    }
    if (indexer_) indexer_->stop();
    SimMetrics s = summarize();
    s.rows = std::move(m.rows);
    return s;
}

SimMetrics SimWorld::summarize() const {
    SimMetrics m;
    m.torrents = torrents_.size();
    for (const auto& t : torrents_) {
        const bool reachable = std::any_of(t.peers.begin(), t.peers.end(), [&](std::size_t p) { return !nat_[p]; });
        if (reachable) ++m.reachable_torrents;
        if (!indexer_) continue;
        const auto r = indexer_->store().get(t.infohash);
        if (r) ++m.harvested;
        if (r && r->state == RecordState::Indexed) {
            ++m.indexed;
            if (reachable) ++m.reachable_indexed;
        }
    }
    if (indexer_) {
        const auto& c = indexer_->counters();
        m.hash_mismatches = c.fetch_hash_mismatches;
        m.budget_violations = c.budget_violations;
        m.peak_active_lookups = c.peak_active_lookups;
        m.injections = c.injections;
        m.get_peers_seen = c.get_peers;
        m.passive_indexed = c.passive_indexed;
        m.audit_failures = metadata::audit_index(indexer_->store(), indexer_->sink());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Probe

Probe::Probe(SimWorld& world, std::size_t sockets, bool use_cache, LookupParams params, std::uint64_t salt)
    : world_(world) {
    const Key160 root = root_id_from_seed(salt + 1000);
    for (std::size_t i = 0; i < sockets; ++i) ids_.push_back(derive_node_id(root, i));
    table_ = std::make_unique<RoutingTable>(ids_);
    world_.seed_table(*table_, salt);
    if (use_cache) cache_ = std::make_unique<LookupCache>();
    for (std::size_t i = 0; i < sockets; ++i) {
        const Endpoint ep{static_cast<std::uint32_t>((12u << 24) | ((salt & 0xff) << 16) | (i + 1)), 6881};
        sockets_.push_back(std::make_unique<RpcSocket>(world_.simulator(), ep, ids_[i], this));
    }
    engine_ = std::make_unique<LookupEngine>(world_.simulator(), *table_, cache_.get(), *this,
                                             LookupEngineConfig{params, 1});
}

Probe::~Probe() {
    engine_.reset();
    sockets_.clear();
}

std::vector<RpcSocket*> Probe::sockets() {
    std::vector<RpcSocket*> out;
    for (auto& s : sockets_) out.push_back(s.get());
    return out;
}

void Probe::send_get_peers(const Contact& to, const Key160& target, CallHandlers handlers) {
    auto& s = *sockets_[next_++ % sockets_.size()];
    auto q = krpc::Message::query(krpc::Method::GetPeers, "", s.id());
    q.target = target;
    s.call(to.endpoint, std::move(q), std::move(handlers));
}

LookupResult Probe::lookup(const Key160& target) {
    std::optional<LookupResult> out;
    engine_->start_lookup(target, LookupMode::PeersOnly, [&out](const LookupResult& r) { out = r; });
    auto& sim = world_.simulator();
    sim.run_while([&] { return !out.has_value(); }, sim.now() + minutes(10));
    if (!out) throw std::runtime_error("probe lookup did not finish");
    return *out;
}

}  // namespace dhtidx::sim
