#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <shared_mutex>
#include <vector>

#include "dhtidx/identity.hpp"
#include "dhtidx/routing_table.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

struct LookupCacheConfig {
    /// Closest-set width N; equals the lookup concurrency.
    std::size_t closest_set = 10;
    Duration anchor_ttl = minutes(10);
    Duration entry_ttl = minutes(10);
    /// Natural-order neighbours examined on each side during insertion.
    std::size_t insert_scan = 30;
};

struct LookupCacheStats {
    std::size_t anchors = 0;
    std::size_t entries = 0;
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
};

/// Cache of recently responsive nodes near recently looked-up targets.
///
/// Two ordered sets keyed in natural order: anchors (lookup targets) and
/// entries (contacts). The key space is split into 16 shards by the top
/// nibble, each guarded by its own reader/writer lock, so unrelated readers
/// and writers do not contend; range scans lock one shard at a time and see
/// a weakly consistent view.
class LookupCache {
public:
    explicit LookupCache(LookupCacheConfig config = {});

    void register_anchor(const Key160& target, TimePoint now);

    /// Admits c when it would rank among the N closest cached entries of a
    /// nearby anchor, judged over a bounded natural-order neighbourhood.
    /// May over-admit; cleanup() corrects that.
    bool offer_contact(const Contact& c, TimePoint now);

    /// Exact: the n cached entries closest to target by XOR distance.
    std::vector<Contact> nearest(const Key160& target, std::size_t n) const;

    /// As nearest(), additionally skipping entries older than the entry TTL
    /// and updating the hit/miss counters.
    std::vector<Contact> nearest_fresh(const Key160& target, std::size_t n, TimePoint now);

    void evict(const NodeId& id);

    /// Drops expired anchors and entries, then every entry outside the
    /// closest set of all surviving anchors.
    void cleanup(TimePoint now);

    bool contains(const NodeId& id) const;
    std::size_t anchor_count() const;
    std::size_t entry_count() const;
    std::vector<Key160> anchors() const;
    LookupCacheStats stats() const;
    const LookupCacheConfig& config() const { return config_; }

private:
    struct Entry {
        Contact contact;
        TimePoint refreshed_at;
    };

    template <typename V>
    struct Shard {
        mutable std::shared_mutex mutex;
        std::map<Key160, V> items;
    };

    static constexpr std::size_t kShards = 16;
    static std::size_t shard_of(const Key160& k) { return k.bytes()[0] >> 4; }

    /// All entries with keys in [lo, hi], ascending.
    std::vector<Entry> collect_range(const Key160& lo, const Key160& hi) const;
    /// Up to `count` entry keys strictly above / below `pivot`.
    std::vector<Entry> entries_above(const Key160& pivot, std::size_t count) const;
    std::vector<Entry> entries_below(const Key160& pivot, std::size_t count) const;
    std::vector<Key160> anchors_near(const Key160& pivot, std::size_t per_side) const;

    LookupCacheConfig config_;
    std::array<Shard<TimePoint>, kShards> anchors_;
    std::array<Shard<Entry>, kShards> entries_;
    std::atomic<std::uint64_t> hits_{0};
    std::atomic<std::uint64_t> misses_{0};
};

}  // namespace dhtidx
