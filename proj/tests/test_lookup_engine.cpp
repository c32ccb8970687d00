#include "doctest.h"

#include <numeric>

#include "dhtidx/lookup_engine.hpp"
#include "dhtidx/simnet.hpp"
#include "sim_helpers.hpp"
#include "test_util.hpp"

using namespace dhtidx;
using testutil::random_key;

namespace {

Contact contact_at(const Key160& target, std::mt19937_64& rng, int shared_bits, std::uint32_t n) {
    auto id = random_key(rng);
    for (int i = 0; i < shared_bits; ++i) id.set_bit(i, target.bit(i));
    return Contact{id, Endpoint{0x0a000000u + n, 6881}, {}, {}, 0};
}

krpc::CompactContact compact(const Contact& c) { return {c.id, c.endpoint}; }

class NullTransport : public QueryTransport {
public:
    void send_get_peers(const Contact&, const Key160&, CallHandlers) override { ++sent; }
    void send_announce(const Contact&, const Key160&, const std::string&) override {}
    int sent = 0;
};

}  // namespace

TEST_CASE("task dispatches at most N and finishes when the closest set replied") {
    std::mt19937_64 rng(1);
    const auto target = random_key(rng);
    LookupParams p;
    LookupTask task(target, LookupMode::PeersOnly, p);
    CHECK(task.finished());

    std::vector<Contact> seeds;
    for (std::uint32_t i = 0; i < 30; ++i) seeds.push_back(contact_at(target, rng, 4, i + 1));
    task.add_candidates(seeds);
    task.add_candidates(seeds);
    CHECK(task.candidate_count() == 30);
    auto wave = task.take_dispatches();
    CHECK(wave.size() == p.concurrency);
    CHECK(task.take_dispatches().empty());
    CHECK_FALSE(task.finished());

    // The wave goes to the closest seeds.
    std::vector<Contact> sorted = seeds;
    std::sort(sorted.begin(), sorted.end(), [&](const Contact& a, const Contact& b) { return closer_to(target, a.id, b.id); });
    CHECK(testutil::ids_of(wave) == testutil::ids_of(std::vector<Contact>(sorted.begin(), sorted.begin() + 10)));

    // A reply with much closer contacts moves the head toward the target.
    const auto closer = contact_at(target, rng, 40, 100);
    const std::vector<krpc::CompactContact> nodes{compact(closer)};
    CHECK(task.on_reply(wave[0].id, nodes, {}, "tok", TimePoint{}));
    auto next = task.take_dispatches();
    REQUIRE(next.size() == 1);
    CHECK(next[0].id == closer.id);
    CHECK_FALSE(task.on_reply(random_key(rng), {}, {}, "", TimePoint{}));
}

TEST_CASE("stalled calls free their slot and late replies still count") {
    std::mt19937_64 rng(2);
    const auto target = random_key(rng);
    LookupTask task(target, LookupMode::PeersOnly, LookupParams{});
    std::vector<Contact> seeds;
    for (std::uint32_t i = 0; i < 12; ++i) seeds.push_back(contact_at(target, rng, 4, i + 1));
    task.add_candidates(seeds);
    auto wave = task.take_dispatches();
    REQUIRE(wave.size() == 10);
    CHECK(task.on_stall(wave[0].id));
    CHECK(task.state_of(wave[0].id) == CandidateState::Stalled);
    CHECK(task.in_flight() == 9);
    CHECK(task.stalled() == 1);
    CHECK(task.take_dispatches().size() == 1);

    const auto fresh = contact_at(target, rng, 60, 50);
    const std::vector<krpc::CompactContact> nodes{compact(fresh)};
    CHECK(task.on_reply(wave[0].id, nodes, {}, "", TimePoint{}));
    CHECK(task.state_of(wave[0].id) == CandidateState::Replied);
    CHECK(task.stats().late_replies == 1);
    CHECK(task.state_of(fresh.id) == CandidateState::New);
    CHECK(task.on_timeout(wave[1].id));
    CHECK(task.state_of(wave[1].id) == CandidateState::Failed);
}

TEST_CASE("peers are deduplicated") {
    std::mt19937_64 rng(3);
    const auto target = random_key(rng);
    LookupTask task(target, LookupMode::PeersOnly, LookupParams{});
    const std::vector<Contact> seeds{contact_at(target, rng, 2, 1), contact_at(target, rng, 2, 2)};
    task.add_candidates(seeds);
    auto wave = task.take_dispatches();
    const std::vector<Endpoint> peers{Endpoint{1, 1}, Endpoint{2, 2}};
    task.on_reply(wave[0].id, {}, peers, "", TimePoint{});
    task.on_reply(wave[1].id, {}, peers, "", TimePoint{});
    CHECK(task.peers() == peers);
    CHECK(task.finished());
    CHECK(task.closest_set().size() == 2);
}

TEST_CASE("engine with nothing to query completes asynchronously and empty") {
    sim::Simulator simulator(1, sim::LatencyModel{}, 0);
    RoutingTable table({Key160{}});
    LookupCache cache;
    NullTransport transport;
    LookupEngine engine(simulator, table, &cache, transport, LookupEngineConfig{{}, 2});
    std::optional<LookupResult> out;
    engine.start_lookup(Key160::max(), LookupMode::PeersOnly, [&](const LookupResult& r) { out = r; });
    CHECK_FALSE(out.has_value());
    CHECK(engine.active() == 1);
    simulator.run_until(simulator.now() + seconds(1));
    REQUIRE(out.has_value());
    CHECK(out->peers.empty());
    CHECK(out->closest.empty());
    CHECK(out->stats.queries == 0);
    CHECK(engine.active() == 0);
    CHECK(transport.sent == 0);
}

TEST_CASE("budget is enforced") {
    sim::Simulator simulator(1, sim::LatencyModel{}, 0);
    RoutingTable table({Key160{}});
    NullTransport transport;
    std::mt19937_64 rng(4);
    for (std::uint32_t i = 0; i < 20; ++i) table.insert_contact(random_key(rng), Endpoint{0x0b000000u + i, 1}, TimePoint{});
    LookupEngine engine(simulator, table, nullptr, transport, LookupEngineConfig{{}, 2});
    engine.start_lookup(random_key(rng), LookupMode::PeersOnly, nullptr);
    engine.start_lookup(random_key(rng), LookupMode::PeersOnly, nullptr);
    CHECK_FALSE(engine.has_capacity());
    CHECK_THROWS_AS(engine.start_lookup(random_key(rng), LookupMode::PeersOnly, nullptr), LookupBudgetExhausted);
    CHECK(engine.peak_active() == 2);
}

TEST_CASE("simnet lookups find the oracle's closest nodes") {
    auto world = sim::SimWorld::build(testutil::overlay_scenario(1000, 5));
    sim::Probe probe(*world, 1, false);
    std::mt19937_64 rng(5);
    std::uint32_t total_queries = 0;
    for (int i = 0; i < 20; ++i) {
        const auto target = random_key(rng);
        const auto r = probe.lookup(target);
        CHECK(testutil::ids_of(r.closest) == world->oracle_closest(target, 8));
        CHECK(r.stats.timeouts == 0);
        total_queries += r.stats.queries;
    }
    // More than a single wave: lookups walk several hops.
    CHECK(total_queries / 20 > 10);
}

TEST_CASE("warm cache sends the first wave straight to the closest nodes") {
    auto world = sim::SimWorld::build(testutil::overlay_scenario(1000, 6));
    sim::Probe probe(*world, 1, true);
    std::mt19937_64 rng(6);
    const auto target = random_key(rng);
    const auto cold = probe.lookup(target);
    const auto warm = probe.lookup(target);
    CHECK(testutil::ids_of(warm.closest) == world->oracle_closest(target, 8));
    CHECK(warm.stats.cache_seeds > 0);
    CHECK(warm.stats.queries < cold.stats.queries);
    CHECK(warm.stats.queries <= 20);
}

TEST_CASE("adjacent lookups share cache discoveries") {
    auto world = sim::SimWorld::build(testutil::overlay_scenario(2000, 7));
    std::mt19937_64 rng(7);
    auto t = random_key(rng);
    std::vector<Key160> targets;
    for (int i = 0; i < 3; ++i) {
        targets.push_back(t);
        t.increment();
    }
    std::uint32_t solo = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        sim::Probe fresh(*world, 1, true, {}, 200 + i);
        solo += fresh.lookup(targets[i]).stats.queries;
    }
    sim::Probe shared(*world, 1, true, {}, 300);
    std::uint32_t together = 0;
    for (const auto& target : targets) together += shared.lookup(target).stats.queries;
    CHECK(together < solo);
}

TEST_CASE("peers stored at the closest nodes come back") {
    auto world = sim::SimWorld::build(testutil::overlay_scenario(1000, 8));
    std::mt19937_64 rng(8);
    const auto target = random_key(rng);
    const auto closest = world->oracle_closest(target, 5);
    std::vector<Endpoint> expected;
    for (std::size_t i = 0; i < closest.size(); ++i) {
        const auto idx = testutil::node_index(*world, closest[i]);
        REQUIRE(idx.has_value());
        const Endpoint peer{0x0c000000u + static_cast<std::uint32_t>(i), 51413};
        world->node(*idx).peers().add(target, peer, world->simulator().now());
        expected.push_back(peer);
    }
    sim::Probe probe(*world, 1, false);
    auto peers = probe.lookup(target).peers;
    std::sort(peers.begin(), peers.end());
    CHECK(peers == expected);

    const auto none = probe.lookup(random_key(rng));
    CHECK(none.peers.empty());
    CHECK_FALSE(none.closest.empty());
}

TEST_CASE("announce stores the announcer at the K closest nodes") {
    auto world = sim::SimWorld::build(testutil::overlay_scenario(1000, 9));
    std::mt19937_64 rng(9);
    const auto target = random_key(rng);
    auto& announcer = world->node(0);
    bool done = false;
    announcer.lookup(target, LookupMode::Announce, [&](const LookupResult& r) {
        CHECK(r.stats.announces == 8);
        done = true;
    });
    auto& simulator = world->simulator();
    simulator.run_until(simulator.now() + seconds(60));
    REQUIRE(done);
    const auto self = announcer.socket().local();
    for (const auto& id : world->oracle_closest(target, 8)) {
        if (id == announcer.id()) continue;
        const auto idx = testutil::node_index(*world, id);
        REQUIRE(idx.has_value());
        const auto stored = world->node(*idx).peers().get(target, simulator.now());
        CHECK(std::find(stored.begin(), stored.end(), self) != stored.end());
    }
}

TEST_CASE("slow nodes stall but their late replies are used") {
    auto scenario = testutil::overlay_scenario(2000, 10);
    scenario.slow_fraction = 0.06;
    scenario.slow_delay = seconds(3);
    auto world = sim::SimWorld::build(scenario);
    sim::Probe probe(*world, 1, false);
    std::mt19937_64 rng(10);
    // Warm the adaptive timeout well below the slow nodes' delay.
    for (int i = 0; i < 10; ++i) probe.lookup(random_key(rng));
    REQUIRE(probe.sockets()[0]->rtt_window().adaptive_timeout() < 3000);
    std::uint32_t stalls = 0, late = 0;
    for (int i = 0; i < 10; ++i) {
        const auto target = random_key(rng);
        const auto r = probe.lookup(target);
        stalls += r.stats.stalls;
        late += r.stats.late_replies;
        CHECK(testutil::ids_of(r.closest) == world->oracle_closest(target, 8));
    }
    CHECK(stalls > 0);
    CHECK(late > 0);
}
