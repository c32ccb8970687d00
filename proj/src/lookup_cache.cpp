#include "dhtidx/lookup_cache.hpp"

#include <algorithm>
#include <mutex>
#include <unordered_set>

namespace dhtidx {

LookupCache::LookupCache(LookupCacheConfig config) : config_(config) {}

void LookupCache::register_anchor(const Key160& target, TimePoint now) {
    auto& shard = anchors_[shard_of(target)];
    std::unique_lock lock(shard.mutex);
    shard.items[target] = now;
}

std::vector<LookupCache::Entry> LookupCache::collect_range(const Key160& lo, const Key160& hi) const {
    std::vector<Entry> out;
    for (std::size_t s = shard_of(lo); s <= shard_of(hi); ++s) {
        const auto& shard = entries_[s];
        std::shared_lock lock(shard.mutex);
        for (auto it = shard.items.lower_bound(lo); it != shard.items.end() && it->first <= hi; ++it) {
            out.push_back(it->second);
        }
    }
    return out;
}

std::vector<LookupCache::Entry> LookupCache::entries_above(const Key160& pivot, std::size_t count) const {
    std::vector<Entry> out;
    for (std::size_t s = shard_of(pivot); s < kShards && out.size() < count; ++s) {
        const auto& shard = entries_[s];
        std::shared_lock lock(shard.mutex);
        for (auto it = shard.items.upper_bound(pivot); it != shard.items.end() && out.size() < count; ++it) {
            out.push_back(it->second);
        }
    }
    return out;
}

std::vector<LookupCache::Entry> LookupCache::entries_below(const Key160& pivot, std::size_t count) const {
    std::vector<Entry> out;
    for (std::size_t s = shard_of(pivot) + 1; s-- > 0 && out.size() < count;) {
        const auto& shard = entries_[s];
        std::shared_lock lock(shard.mutex);
        auto it = shard.items.lower_bound(pivot);
        while (it != shard.items.begin() && out.size() < count) {
            --it;
            out.push_back(it->second);
        }
    }
    return out;
}

std::vector<Key160> LookupCache::anchors_near(const Key160& pivot, std::size_t per_side) const {
    std::vector<Key160> out;
    std::size_t taken = 0;
    for (std::size_t s = shard_of(pivot); s < kShards && taken < per_side; ++s) {
        std::shared_lock lock(anchors_[s].mutex);
        const auto& items = anchors_[s].items;
        for (auto it = items.lower_bound(pivot); it != items.end() && taken < per_side; ++it, ++taken) {
            out.push_back(it->first);
        }
    }
    taken = 0;
    for (std::size_t s = shard_of(pivot) + 1; s-- > 0 && taken < per_side;) {
        std::shared_lock lock(anchors_[s].mutex);
        const auto& items = anchors_[s].items;
        auto it = items.lower_bound(pivot);
        while (it != items.begin() && taken < per_side) {
            --it;
            out.push_back(it->first);
            ++taken;
        }
    }
    return out;
}

bool LookupCache::offer_contact(const Contact& c, TimePoint now) {
    const auto anchors = anchors_near(c.id, 2);
    if (anchors.empty()) return false;

    bool accept = false;
    {
        auto& shard = entries_[shard_of(c.id)];
        std::shared_lock lock(shard.mutex);
        accept = shard.items.count(c.id) > 0;
    }
    if (!accept) {
        auto neighbourhood = entries_above(c.id, config_.insert_scan);
        auto below = entries_below(c.id, config_.insert_scan);
        neighbourhood.insert(neighbourhood.end(), below.begin(), below.end());
        for (const auto& anchor : anchors) {
            const Key160 own = c.id ^ anchor;
            std::size_t closer = 0;
            for (const auto& e : neighbourhood) {
                if ((e.contact.id ^ anchor) < own && ++closer >= config_.closest_set) break;
            }
            if (closer < config_.closest_set) {
                accept = true;
                break;
            }
        }
    }
    if (!accept) return false;

    auto& shard = entries_[shard_of(c.id)];
    std::unique_lock lock(shard.mutex);
    shard.items[c.id] = Entry{c, now};
    return true;
}

std::vector<Contact> LookupCache::nearest(const Key160& target, std::size_t n) const {
    std::vector<Entry> found = collect_range(target, target);
    // Visit the sibling subtree at each depth, deepest first: every key in
    // the sibling at depth i is closer than every key in the one at depth i-1.
    for (int i = Key160::kBits - 1; i >= 0 && found.size() < n; --i) {
        Key160 flipped = target;
        flipped.flip_bit(i);
        const Prefix sibling(flipped, i + 1);
        auto more = collect_range(sibling.key(), sibling.last());
        found.insert(found.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
    }
    std::vector<Contact> out;
    out.reserve(found.size());
    for (auto& e : found) out.push_back(std::move(e.contact));
    std::sort(out.begin(), out.end(), [&](const Contact& a, const Contact& b) { return closer_to(target, a.id, b.id); });
    if (out.size() > n) out.resize(n);
    return out;
}

std::vector<Contact> LookupCache::nearest_fresh(const Key160& target, std::size_t n, TimePoint now) {
    // Over-fetch so that stale entries do not shrink the answer.
    auto all = nearest(target, n * 2);
    std::vector<Contact> out;
    for (auto& c : all) {
        auto& shard = entries_[shard_of(c.id)];
        std::shared_lock lock(shard.mutex);
        auto it = shard.items.find(c.id);
        if (it != shard.items.end() && it->second.refreshed_at + config_.entry_ttl > now) out.push_back(c);
        if (out.size() == n) break;
    }
    (out.empty() ? misses_ : hits_).fetch_add(1, std::memory_order_relaxed);
    return out;
}

void LookupCache::evict(const NodeId& id) {
    auto& shard = entries_[shard_of(id)];
    std::unique_lock lock(shard.mutex);
    shard.items.erase(id);
}

void LookupCache::cleanup(TimePoint now) {
    for (auto& shard : anchors_) {
        std::unique_lock lock(shard.mutex);
        std::erase_if(shard.items, [&](const auto& kv) { return kv.second + config_.anchor_ttl <= now; });
    }
    for (auto& shard : entries_) {
        std::unique_lock lock(shard.mutex);
        std::erase_if(shard.items, [&](const auto& kv) { return kv.second.refreshed_at + config_.entry_ttl <= now; });
    }
    std::unordered_set<Key160> survivors;
    for (const auto& anchor : anchors()) {
        for (const auto& c : nearest(anchor, config_.closest_set)) survivors.insert(c.id);
    }
    for (auto& shard : entries_) {
        std::unique_lock lock(shard.mutex);
        std::erase_if(shard.items, [&](const auto& kv) { return !survivors.count(kv.first); });
    }
}

bool LookupCache::contains(const NodeId& id) const {
    const auto& shard = entries_[shard_of(id)];
    std::shared_lock lock(shard.mutex);
    return shard.items.count(id) > 0;
}

std::size_t LookupCache::anchor_count() const {
    std::size_t n = 0;
    for (const auto& shard : anchors_) {
        std::shared_lock lock(shard.mutex);
        n += shard.items.size();
    }
    return n;
}

std::size_t LookupCache::entry_count() const {
    std::size_t n = 0;
    for (const auto& shard : entries_) {
        std::shared_lock lock(shard.mutex);
        n += shard.items.size();
    }
    return n;
}

std::vector<Key160> LookupCache::anchors() const {
    std::vector<Key160> out;
    for (const auto& shard : anchors_) {
        std::shared_lock lock(shard.mutex);
        for (const auto& kv : shard.items) out.push_back(kv.first);
    }
    return out;
}

LookupCacheStats LookupCache::stats() const {
    return LookupCacheStats{anchor_count(), entry_count(), hits_.load(), misses_.load()};
}

}  // namespace dhtidx
