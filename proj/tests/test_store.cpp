#include "doctest.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "dhtidx/store.hpp"
#include "test_util.hpp"

using namespace dhtidx;
using testutil::random_key;
using testutil::TempDir;

namespace {

const TimePoint t0 = TimePoint{} + seconds(1000);

Key160 hex_key(const std::string& lead) {
    std::string hex = lead;
    hex.resize(40, '0');
    return Key160::from_hex(hex);
}

std::vector<InfohashRecord> drain(Store& s, Cursor& c, std::size_t limit, TimePoint now) {
    return s.next_batch(c, limit, now);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::uint64_t le(const std::string& s, std::size_t off, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(std::uint8_t(s[off + i])) << (8 * i);
    return v;
}

}  // namespace

TEST_CASE("ingest consolidates duplicates and counts hits") {
    Store s;
    const auto h1 = hex_key("11"), h2 = hex_key("22");
    std::vector<Infohash> batch{h1, h1, h2};
    auto c = s.ingest_batch(batch, t0);
    CHECK(c.inserted == 2);
    CHECK(c.incremented == 0);
    CHECK(s.get(h1)->hit_count == 2);
    CHECK(s.get(h2)->hit_count == 1);
    CHECK(s.get(h1)->state == RecordState::Discovered);

    std::vector<Infohash> again{h1};
    c = s.ingest_batch(again, t0 + seconds(5));
    CHECK(c.inserted == 0);
    CHECK(c.incremented == 1);
    CHECK(s.get(h1)->hit_count == 3);
    CHECK(s.get(h1)->first_seen == t0);
}

TEST_CASE("full scan returns natural key order") {
    std::mt19937_64 rng(1);
    std::vector<Infohash> keys;
    for (int i = 0; i < 10000; ++i) keys.push_back(random_key(rng));
    Store s;
    s.ingest_batch(keys, t0);
    // Lower-case hex strings sort exactly like the unsigned big-endian value.
    std::vector<std::string> expected;
    for (const auto& k : keys) expected.push_back(k.to_hex());
    std::sort(expected.begin(), expected.end());
    expected.erase(std::unique(expected.begin(), expected.end()), expected.end());
    const auto scan = s.scan();
    REQUIRE(scan.size() == expected.size());
    for (std::size_t i = 0; i < scan.size(); ++i) REQUIRE(scan[i].infohash.to_hex() == expected[i]);
}

TEST_CASE("next_batch walks in natural order and wraps") {
    Store s;
    Cursor c;
    CHECK(drain(s, c, 10, t0).empty());
    CHECK(c.position == Key160{});
    CHECK(c.wraps == 0);

    std::vector<Infohash> keys{hex_key("01"), hex_key("02"), hex_key("80"), hex_key("fe")};
    s.ingest_batch(keys, t0);
    c.position = hex_key("f0");
    auto b = drain(s, c, 3, t0);
    REQUIRE(b.size() == 3);
    CHECK(b[0].infohash == hex_key("fe"));
    CHECK(b[1].infohash == hex_key("01"));
    CHECK(b[2].infohash == hex_key("02"));
    CHECK(c.wraps == 1);
    for (const auto& r : b) CHECK(s.get(r.infohash)->state == RecordState::LookingUp);
    auto rest = drain(s, c, 3, t0);
    REQUIRE(rest.size() == 1);
    CHECK(rest[0].infohash == hex_key("80"));
    CHECK(drain(s, c, 3, t0).empty());
}

TEST_CASE("batches within one wrap are strictly increasing") {
    std::mt19937_64 rng(2);
    std::vector<Infohash> keys;
    for (int i = 0; i < 3000; ++i) keys.push_back(random_key(rng));
    Store s;
    s.ingest_batch(keys, t0);
    Cursor c;
    std::vector<Key160> seen;
    while (true) {
        auto b = drain(s, c, 64, t0);
        if (b.empty()) break;
        for (const auto& r : b) seen.push_back(r.infohash);
    }
    CHECK(seen.size() == 3000);
    CHECK(std::is_sorted(seen.begin(), seen.end()));
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST_CASE("staggered cursors never hand out the same record") {
    std::mt19937_64 rng(3);
    std::vector<Infohash> keys;
    for (int i = 0; i < 5000; ++i) keys.push_back(random_key(rng));
    Store s;
    s.ingest_batch(keys, t0);
    Cursor a, b;
    b.position = hex_key("8");
    std::set<Key160> handed;
    std::size_t total = 0;
    for (int round = 0; round < 200; ++round) {
        for (Cursor* c : {&a, &b}) {
            for (const auto& r : drain(s, *c, 17, t0 + seconds(round))) {
                REQUIRE(handed.insert(r.infohash).second);
                ++total;
            }
        }
    }
    CHECK(total == 5000);
}

TEST_CASE("expired LOOKING_UP leases return to the pool") {
    StoreConfig cfg;
    cfg.lease = minutes(15);
    Store s(cfg);
    std::vector<Infohash> keys{hex_key("aa")};
    s.ingest_batch(keys, t0);
    Cursor c;
    CHECK(drain(s, c, 1, t0).size() == 1);
    CHECK(drain(s, c, 1, t0 + minutes(14)).empty());
    auto again = drain(s, c, 1, t0 + minutes(15));
    REQUIRE(again.size() == 1);
    CHECK(again[0].last_state_change == t0 + minutes(15));
}

TEST_CASE("transition table") {
    using S = RecordState;
    const std::set<std::pair<S, S>> edges{
        {S::Discovered, S::LookingUp},  {S::LookingUp, S::PeersFound},      {S::LookingUp, S::FailedRetryable},
        {S::PeersFound, S::Fetching},   {S::Fetching, S::Indexed},          {S::Fetching, S::FailedRetryable},
        {S::FailedRetryable, S::LookingUp},
    };
    for (int from = 0; from <= 6; ++from) {
        for (int to = 0; to <= 6; ++to) {
            CAPTURE(from);
            CAPTURE(to);
            CHECK(Store::legal_transition(S(from), S(to)) == edges.count({S(from), S(to)}) > 0);
        }
    }
}

TEST_CASE("happy path, illegal moves and unknown hashes") {
    Store s;
    const auto h = hex_key("42");
    std::vector<Infohash> keys{h};
    s.ingest_batch(keys, t0);
    s.transition(h, RecordState::LookingUp, t0);
    s.transition(h, RecordState::PeersFound, t0);
    s.transition(h, RecordState::Fetching, t0);
    auto r = s.transition(h, RecordState::Indexed, t0 + seconds(3));
    CHECK(r.state == RecordState::Indexed);
    CHECK(r.last_state_change == t0 + seconds(3));
    try {
        s.transition(h, RecordState::LookingUp, t0);
        FAIL("expected IllegalTransition");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrc::IllegalTransition);
    }
    try {
        s.transition(hex_key("43"), RecordState::LookingUp, t0);
        FAIL("expected UnknownHash");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrc::UnknownHash);
    }
}

TEST_CASE("fifth failure is terminal") {
    Store s;
    const auto h = hex_key("55");
    std::vector<Infohash> keys{h};
    s.ingest_batch(keys, t0);
    for (std::uint32_t i = 1; i <= 5; ++i) {
        s.transition(h, RecordState::LookingUp, t0);
        auto r = s.transition(h, RecordState::FailedRetryable, t0);
        CHECK(r.fail_count == i);
        CHECK(r.state == (i < 5 ? RecordState::FailedRetryable : RecordState::Dead));
    }
    Cursor c;
    CHECK(drain(s, c, 10, t0 + std::chrono::hours(1)).empty());
}

TEST_CASE("failed records rest before they are retried") {
    StoreConfig cfg;
    cfg.retry_delay = minutes(1);
    Store s(cfg);
    const auto h = hex_key("66");
    std::vector<Infohash> keys{h};
    s.ingest_batch(keys, t0);
    Cursor c;
    REQUIRE(drain(s, c, 1, t0).size() == 1);
    s.transition(h, RecordState::FailedRetryable, t0);
    CHECK(drain(s, c, 1, t0 + seconds(59)).empty());
    CHECK(drain(s, c, 1, t0 + seconds(60)).size() == 1);
}

TEST_CASE("purge removes only expired DEAD records") {
    StoreConfig cfg;
    cfg.max_failures = 1;
    cfg.dead_retention = std::chrono::hours(24 * 7);
    Store s(cfg);
    CHECK(s.purge_dead(t0) == 0);
    const auto old_dead = hex_key("01"), new_dead = hex_key("02"), indexed = hex_key("03"), fresh = hex_key("04");
    std::vector<Infohash> keys{old_dead, new_dead, indexed, fresh};
    s.ingest_batch(keys, t0);
    s.transition(old_dead, RecordState::LookingUp, t0);
    s.transition(old_dead, RecordState::FailedRetryable, t0);
    s.transition(new_dead, RecordState::LookingUp, t0 + std::chrono::hours(24 * 6));
    s.transition(new_dead, RecordState::FailedRetryable, t0 + std::chrono::hours(24 * 6));
    for (auto st : {RecordState::LookingUp, RecordState::PeersFound, RecordState::Fetching, RecordState::Indexed}) {
        s.transition(indexed, st, t0);
    }
    CHECK(s.get(old_dead)->state == RecordState::Dead);
    CHECK(s.purge_dead(t0 + std::chrono::hours(24 * 7)) == 1);
    CHECK_FALSE(s.get(old_dead));
    CHECK(s.get(new_dead));
    CHECK(s.get(indexed));
    CHECK(s.get(fresh));
    CHECK(s.size() == 3);
}

TEST_CASE("storage limit") {
    StoreConfig cfg;
    cfg.max_records = 3;
    Store s(cfg);
    std::vector<Infohash> keys{hex_key("1"), hex_key("2"), hex_key("3")};
    s.ingest_batch(keys, t0);
    std::vector<Infohash> more{hex_key("1"), hex_key("4")};
    try {
        s.ingest_batch(more, t0);
        FAIL("expected StorageFull");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrc::StorageFull);
    }
    CHECK(s.size() == 3);
    CHECK(s.get(hex_key("1"))->hit_count == 1);
    std::vector<Infohash> known{hex_key("2")};
    CHECK(s.ingest_batch(known, t0).incremented == 1);
}

TEST_CASE("frequency and recency policies") {
    Store s;
    std::vector<Infohash> a{hex_key("1"), hex_key("2"), hex_key("2"), hex_key("3"), hex_key("3"), hex_key("3")};
    s.ingest_batch(a, t0);
    std::vector<Infohash> late{hex_key("4")};
    s.ingest_batch(late, t0 + seconds(10));

    Cursor freq;
    freq.policy = CursorPolicy::MostFrequent;
    auto b = drain(s, freq, 2, t0 + seconds(20));
    REQUIRE(b.size() == 2);
    CHECK(b[0].infohash == hex_key("3"));
    CHECK(b[1].infohash == hex_key("2"));

    Cursor recent;
    recent.policy = CursorPolicy::MostRecent;
    b = drain(s, recent, 1, t0 + seconds(20));
    REQUIRE(b.size() == 1);
    CHECK(b[0].infohash == hex_key("4"));
}

TEST_CASE("export format") {
    Store s;
    std::vector<Infohash> keys{hex_key("ab"), hex_key("ab"), hex_key("01")};
    s.ingest_batch(keys, t0);
    std::ostringstream out;
    s.export_text(out);
    CHECK(out.str() == "0100000000000000000000000000000000000000 DISCOVERED 1\n"
                       "ab00000000000000000000000000000000000000 DISCOVERED 2\n");
}

TEST_CASE("reopen restores journal and snapshot state") {
    TempDir dir("store");
    StoreConfig cfg;
    cfg.dir = dir.path();
    std::mt19937_64 rng(5);
    std::vector<InfohashRecord> expected;
    {
        Store s(cfg);
        std::vector<Infohash> keys;
        for (int i = 0; i < 500; ++i) keys.push_back(random_key(rng));
        s.ingest_batch(keys, t0);
        s.compact();
        std::vector<Infohash> more{keys[0], random_key(rng)};
        s.ingest_batch(more, t0 + seconds(1));
        s.transition(keys[1], RecordState::LookingUp, t0 + seconds(2));
        s.transition(keys[1], RecordState::FailedRetryable, t0 + seconds(3));
        expected = s.scan();
    }
    Store reopened(cfg);
    CHECK(reopened.scan() == expected);

    // Independent read of the snapshot header written on close.
    const std::string snap = slurp(dir.path() / "snapshot.bin");
    REQUIRE(snap.size() >= 20);
    CHECK(snap.substr(0, 4) == "DISN");
    CHECK(le(snap, 4, 2) == 1);
    CHECK(le(snap, 6, 2) == 49);
    CHECK(le(snap, 8, 8) == expected.size());
    CHECK(snap.size() == 16 + 49 * expected.size() + 4);
}

TEST_CASE("unclean shutdown loses at most the torn batch") {
    TempDir dir("torn");
    StoreConfig cfg;
    cfg.dir = dir.path();
    std::mt19937_64 rng(6);
    std::vector<Infohash> first, second;
    for (int i = 0; i < 100; ++i) first.push_back(random_key(rng));
    for (int i = 0; i < 100; ++i) second.push_back(random_key(rng));
    std::vector<InfohashRecord> after_first;
    std::string journal_after_second;
    {
        Store s(cfg);
        s.ingest_batch(first, t0);
        after_first = s.scan();
        s.ingest_batch(second, t0);
        journal_after_second = slurp(dir.path() / "journal.bin");
    }
    // Simulate a crash in the middle of writing the second frame: drop the
    // snapshot written on close and restore a journal cut short.
    const std::size_t frame1 = 12 + 100 * 49 + 4;
    REQUIRE(journal_after_second.size() == 2 * frame1);
    for (std::size_t cut : {frame1 + 1, frame1 + 12, 2 * frame1 - 1}) {
        CAPTURE(cut);
        std::filesystem::remove(dir.path() / "snapshot.bin");
        {
            std::ofstream out(dir.path() / "journal.bin", std::ios::binary | std::ios::trunc);
            out << journal_after_second.substr(0, cut);
        }
        {
            Store s(cfg);
            CHECK(s.scan() == after_first);
            std::filesystem::remove(dir.path() / "snapshot.bin");
        }
    }

    // A flipped byte in the last frame discards only that frame.
    std::filesystem::remove(dir.path() / "snapshot.bin");
    {
        std::string bad = journal_after_second;
        bad[frame1 + 100] = static_cast<char>(bad[frame1 + 100] ^ 0x40);
        std::ofstream out(dir.path() / "journal.bin", std::ios::binary | std::ios::trunc);
        out << bad;
    }
    Store s(cfg);
    CHECK(s.scan() == after_first);
    // Appends after recovery are readable again.
    s.ingest_batch(second, t0);
    CHECK(s.size() == 200);
}

TEST_CASE("purges survive a crash after compaction") {
    TempDir dir("purge");
    StoreConfig cfg;
    cfg.dir = dir.path();
    cfg.max_failures = 1;
    cfg.dead_retention = seconds(1);
    const auto h = hex_key("77"), other = hex_key("78");
    const auto crash = dir.path() / "crash";
    std::filesystem::create_directories(crash);
    {
        Store s(cfg);
        std::vector<Infohash> keys{h, other};
        s.ingest_batch(keys, t0);
        s.compact();
        std::filesystem::copy_file(dir.path() / "snapshot.bin", crash / "snapshot.bin");
        s.transition(h, RecordState::LookingUp, t0);
        s.transition(h, RecordState::FailedRetryable, t0);
        CHECK(s.purge_dead(t0 + seconds(2)) == 1);
        std::filesystem::copy_file(dir.path() / "journal.bin", crash / "journal.bin");
    }
    // Files as they were before the clean close compacted them.
    std::filesystem::copy_file(crash / "snapshot.bin", dir.path() / "snapshot.bin",
                               std::filesystem::copy_options::overwrite_existing);
    std::filesystem::copy_file(crash / "journal.bin", dir.path() / "journal.bin",
                               std::filesystem::copy_options::overwrite_existing);
    Store s(cfg);
    CHECK_FALSE(s.get(h));
    CHECK(s.get(other));
    CHECK(s.size() == 1);
}
