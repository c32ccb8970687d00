#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dhtidx/simnet.hpp"
#include "routing_oracle.hpp"
#include "sim_helpers.hpp"
#include "test_util.hpp"

using namespace dhtidx;
using namespace dhtidx::sim;
using testutil::overlay_scenario;
using testutil::random_key;

namespace {

SimScenario parse(const std::string& text) {
    std::istringstream in(text);
    return parse_scenario(in);
}

std::string scenario_error(const std::string& text) {
    try {
        parse(text);
    } catch (const InvalidScenario& e) {
        return e.what();
    }
    return "<none>";
}

class Recorder : public DatagramHandler {
public:
    void on_datagram(const Endpoint&, const Endpoint& from, std::string_view payload) override {
        got.emplace_back(from, std::string(payload));
    }
    std::vector<std::pair<Endpoint, std::string>> got;
};

std::vector<NodeId> reachable_ids(SimWorld& w) {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!w.nat(i)) out.push_back(w.node(i).id());
    }
    return out;
}

}  // namespace

TEST_CASE("scenario text format") {
    const auto s = parse(
        "# comment\n"
        "seed = 9\n"
        "node_count = 50   # trailing\n"
        "latency.median_ms = 20\n"
        "loss = 0.1\n"
        "torrent_count = 3\n"
        "duration_s = 30\n"
        "indexer.sockets = 2\n");
    CHECK(s.seed == 9);
    CHECK(s.node_count == 50);
    CHECK(s.latency.median_ms == 20);
    CHECK(s.loss == doctest::Approx(0.1));
    CHECK(s.torrent_count == 3);
    CHECK(s.duration == seconds(30));
    CHECK(s.indexer_sockets == 2);

    const auto again = parse(format_scenario(s));
    CHECK(format_scenario(again) == format_scenario(s));

    CHECK(scenario_error("bogus = 1\n").find("'bogus'") != std::string::npos);
    CHECK(scenario_error("node_count = 1\n").find("node_count") != std::string::npos);
    CHECK(scenario_error("loss = 1.5\n").find("loss") != std::string::npos);
    CHECK(scenario_error("seed = banana\n").find("seed") != std::string::npos);
    CHECK(scenario_error("just words\n").find("line 1") != std::string::npos);
    CHECK_THROWS_AS(load_scenario("/nonexistent/x.scenario"), InvalidScenario);
}

TEST_CASE("simulator event order, timers and links") {
    Simulator sim(1, LatencyModel{80, 0.6}, 0.0);
    std::vector<int> order;
    sim.schedule(milliseconds(5), [&] { order.push_back(2); });
    sim.schedule(milliseconds(1), [&] { order.push_back(1); });
    sim.schedule(milliseconds(5), [&] { order.push_back(3); });
    const auto cancelled = sim.schedule(milliseconds(2), [&] { order.push_back(99); });
    sim.cancel(cancelled);
    sim.run_until(TimePoint{} + milliseconds(10));
    CHECK(order == std::vector<int>{1, 2, 3});
    CHECK(sim.now() == TimePoint{} + milliseconds(10));
    CHECK(sim.idle());

    // Per-link delay: symmetric, fixed, log-normal around the median.
    std::vector<double> delays;
    for (std::uint32_t a = 1; a <= 60; ++a) {
        for (std::uint32_t b = a + 1; b <= 60; ++b) {
            const auto d = sim.link_delay(a, b);
            CHECK(d == sim.link_delay(b, a));
            CHECK(d == sim.link_delay(a, b));
            delays.push_back(std::chrono::duration<double, std::milli>(d).count());
        }
    }
    std::sort(delays.begin(), delays.end());
    const double median = delays[delays.size() / 2];
    CHECK(median == doctest::Approx(80).epsilon(0.1));
    std::vector<double> logs;
    for (double d : delays) logs.push_back(std::log(d));
    double mean = 0, var = 0;
    for (double l : logs) mean += l;
    mean /= double(logs.size());
    for (double l : logs) var += (l - mean) * (l - mean);
    CHECK(std::sqrt(var / double(logs.size() - 1)) == doctest::Approx(0.6).epsilon(0.1));
}

TEST_CASE("datagram loss and NAT filtering") {
    Simulator sim(2, LatencyModel{10, 0.1}, 0.2);
    const auto a = Endpoint::from_octets(10, 0, 0, 1, 1000), b = Endpoint::from_octets(10, 0, 0, 2, 1000);
    Recorder ra, rb;
    sim.bind_datagram(a, &ra);
    sim.bind_datagram(b, &rb);
    const int n = 20000;
    for (int i = 0; i < n; ++i) sim.send_datagram(a, b, "x");
    sim.run_until(sim.now() + seconds(5));
    // Binomial(20000, 0.8): sd ~ 57.
    CHECK(std::abs(double(rb.got.size()) - 0.8 * n) < 6 * 57);
    CHECK(rb.got.front().first == a);

    Simulator nat_sim(3, LatencyModel{10, 0.1}, 0.0);
    Recorder inside, outside;
    const auto in_ep = Endpoint::from_octets(10, 0, 1, 1, 1000), out_ep = Endpoint::from_octets(10, 0, 1, 2, 1000);
    nat_sim.bind_datagram(in_ep, &inside);
    nat_sim.bind_datagram(out_ep, &outside);
    nat_sim.set_profile(in_ep.ip, Simulator::HostProfile{true, true, Duration::zero()});
    nat_sim.send_datagram(out_ep, in_ep, "unsolicited");
    nat_sim.run_until(nat_sim.now() + seconds(1));
    CHECK(inside.got.empty());
    nat_sim.send_datagram(in_ep, out_ep, "hello");
    nat_sim.run_until(nat_sim.now() + seconds(1));
    nat_sim.send_datagram(out_ep, in_ep, "reply");
    nat_sim.run_until(nat_sim.now() + seconds(1));
    REQUIRE(inside.got.size() == 1);
    CHECK(inside.got[0].second == "reply");
    // Pinholes close after a while.
    nat_sim.run_until(nat_sim.now() + minutes(5));
    nat_sim.send_datagram(out_ep, in_ep, "late");
    nat_sim.run_until(nat_sim.now() + seconds(1));
    CHECK(inside.got.size() == 1);

    nat_sim.set_online(out_ep.ip, false);
    nat_sim.send_datagram(in_ep, out_ep, "to offline");
    nat_sim.run_until(nat_sim.now() + seconds(1));
    CHECK(outside.got.size() == 1);
}

TEST_CASE("two-node world") {
    auto w = SimWorld::build(overlay_scenario(2, 1));
    REQUIRE(w->size() == 2);
    const auto a = oracle::all_entries(w->node(0).table());
    const auto b = oracle::all_entries(w->node(1).table());
    REQUIRE(a.size() == 1);
    REQUIRE(b.size() == 1);
    CHECK(a[0].id == w->node(1).id());
    CHECK(a[0].endpoint == w->node(1).endpoint());
    CHECK(b[0].id == w->node(0).id());
}

TEST_CASE("1000-node overlay tables satisfy the partition invariant") {
    auto w = SimWorld::build(overlay_scenario(1000, 2));
    std::size_t total = 0;
    for (std::size_t i = 0; i < w->size(); ++i) {
        const auto err = oracle::check_partition(w->node(i).table());
        REQUIRE_MESSAGE(err.empty(), "node " << i << ": " << err);
        total += w->node(i).table().size();
    }
    // log2(1000) ~ 10 populated levels of up to 8 contacts each.
    CHECK(double(total) / 1000.0 > 40);
}

TEST_CASE("building is deterministic per seed") {
    auto a = SimWorld::build(overlay_scenario(300, 7));
    auto b = SimWorld::build(overlay_scenario(300, 7));
    auto c = SimWorld::build(overlay_scenario(300, 8));
    bool any_difference = false;
    for (std::size_t i = 0; i < 300; ++i) {
        const auto ea = oracle::all_entries(a->node(i).table());
        const auto eb = oracle::all_entries(b->node(i).table());
        REQUIRE(ea.size() == eb.size());
        for (std::size_t j = 0; j < ea.size(); ++j) {
            REQUIRE(ea[j].id == eb[j].id);
            REQUIRE(ea[j].endpoint == eb[j].endpoint);
        }
        any_difference |= a->node(i).id() != c->node(i).id();
    }
    CHECK(any_difference);
}

TEST_CASE("oracle_closest") {
    auto scenario = overlay_scenario(500, 3);
    scenario.nat_fraction = 0.3;
    auto w = SimWorld::build(scenario);
    const auto ids = reachable_ids(*w);
    REQUIRE(ids.size() < 500);

    const auto one = w->oracle_closest(ids[17], 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == ids[17]);

    const auto all = w->oracle_closest(Key160{}, 10000);
    CHECK(all.size() == ids.size());
    // Distance to zero is the id itself.
    CHECK(std::is_sorted(all.begin(), all.end()));

    std::mt19937_64 rng(4);
    for (int q = 0; q < 50; ++q) {
        const auto target = random_key(rng);
        std::vector<std::pair<std::string, NodeId>> by_distance;
        for (const auto& id : ids) by_distance.emplace_back((id ^ target).to_hex(), id);
        std::sort(by_distance.begin(), by_distance.end());
        const auto got = w->oracle_closest(target, 8);
        REQUIRE(got.size() == 8);
        for (std::size_t i = 0; i < 8; ++i) CHECK(got[i] == by_distance[i].second);
    }
}

TEST_CASE("cold lookup cost grows logarithmically with size") {
    std::vector<double> means;
    const std::vector<std::size_t> sizes{1000, 2000, 4000};
    for (std::size_t n : sizes) {
        auto w = SimWorld::build(overlay_scenario(n, 5));
        Probe probe(*w, 1, false);
        std::mt19937_64 rng(n);
        double total = 0;
        const int lookups = 40;
        for (int i = 0; i < lookups; ++i) total += probe.lookup(random_key(rng)).stats.queries;
        means.push_back(total / lookups);
    }
    MESSAGE("mean cold queries 1k/2k/4k: " << means[0] << " " << means[1] << " " << means[2]);
    // More nodes cost more queries, but far less than proportionally.
    CHECK(means[2] > means[0]);
    CHECK(means[2] < 2.0 * means[0]);
    const double per_doubling = (means[2] - means[0]) / 2.0;
    CHECK(per_doubling > 0);
    CHECK(per_doubling < 0.5 * means[0]);
}

TEST_CASE("scenario run with indexer") {
    auto scenario = overlay_scenario(400, 6);
    scenario.loss = 0.01;
    scenario.nat_fraction = 0.3;
    scenario.torrent_count = 40;
    scenario.duration = minutes(4);
    scenario.metrics_interval = seconds(20);
    scenario.indexer_sockets = 8;

    auto run = [&] {
        auto w = SimWorld::build(scenario);
        return w->run();
    };
    const auto m = run();
    CHECK(m.torrents == 40);
    CHECK(m.harvested > 0);
    CHECK(m.indexed > 0);
    CHECK(m.audit_failures.empty());
    CHECK(m.budget_violations == 0);
    REQUIRE(m.rows.size() == 12);
    for (std::size_t i = 1; i < m.rows.size(); ++i) {
        const auto &p = m.rows[i - 1], &r = m.rows[i];
        CHECK(r.t > p.t);
        CHECK(r.datagrams >= p.datagrams);
        CHECK(r.harvested >= p.harvested);
        CHECK(r.indexed >= p.indexed);
        CHECK(r.lookups_done >= p.lookups_done);
        CHECK(r.injections >= p.injections);
        CHECK(r.announces >= p.announces);
    }
    const std::string csv = m.csv();
    CHECK(csv.rfind("t,datagrams,pps,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
    CHECK(run().csv() == csv);
}
