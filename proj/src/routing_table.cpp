#include "dhtidx/routing_table.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

namespace dhtidx {

namespace {

// XOR distance from target to the nearest key the prefix covers.
Key160 lower_bound_distance(const Prefix& p, const Key160& target) {
    return Prefix(p.key() ^ target, p.bit_count()).key();
}

auto find_by_id(std::vector<Contact>& v, const NodeId& id) {
    return std::find_if(v.begin(), v.end(), [&](const Contact& c) { return c.id == id; });
}

}  // namespace

std::size_t RoutingTable::Snapshot::find_bucket_index(const Key160& key) const {
    // Last bucket whose prefix key is <= key; the partition makes it the cover.
    auto it = std::upper_bound(buckets.begin(), buckets.end(), key,
                               [](const Key160& k, const std::shared_ptr<const Bucket>& b) { return k < b->prefix.key(); });
    return static_cast<std::size_t>(std::distance(buckets.begin(), it)) - 1;
}

const Bucket& RoutingTable::Snapshot::find_bucket(const Key160& key) const {
    return *buckets[find_bucket_index(key)];
}

std::vector<Contact> RoutingTable::Snapshot::closest_contacts(const Key160& target, std::size_t n) const {
    std::vector<std::pair<Key160, std::size_t>> order;
    order.reserve(buckets.size());
    for (std::size_t i = 0; i < buckets.size(); ++i) {
        if (!buckets[i]->entries.empty()) order.emplace_back(lower_bound_distance(buckets[i]->prefix, target), i);
    }
    std::sort(order.begin(), order.end());

    auto by_distance = [&](const Contact& a, const Contact& b) { return closer_to(target, a.id, b.id); };
    std::vector<Contact> out;
    for (const auto& [bound, idx] : order) {
        if (out.size() >= n && (out[n - 1].id ^ target) < bound) break;
        for (const auto& c : buckets[idx]->entries) out.push_back(c);
        std::sort(out.begin(), out.end(), by_distance);
        if (out.size() > n) out.resize(n);
    }
    return out;
}

std::size_t RoutingTable::Snapshot::entry_count() const {
    std::size_t n = 0;
    for (const auto& b : buckets) n += b->entries.size();
    return n;
}

std::size_t RoutingTable::Snapshot::replacement_count() const {
    std::size_t n = 0;
    for (const auto& b : buckets) n += b->replacements.size();
    return n;
}

RoutingTable::RoutingTable(std::vector<NodeId> local_ids, RoutingConfig config)
    : local_ids_(std::move(local_ids)), config_(config) {
    auto root = std::make_shared<Snapshot>();
    root->buckets.push_back(std::make_shared<const Bucket>(Bucket{Prefix{}, {}, {}}));
    current_ = std::move(root);
}

std::shared_ptr<const RoutingTable::Snapshot> RoutingTable::snapshot() const { return std::atomic_load(&current_); }

void RoutingTable::publish(std::shared_ptr<const Snapshot> next) { std::atomic_store(&current_, std::move(next)); }

bool RoutingTable::covers_local_id(const Prefix& p) const {
    return std::any_of(local_ids_.begin(), local_ids_.end(), [&](const NodeId& id) { return p.covers(id); });
}

bool RoutingTable::is_local_id(const NodeId& id) const {
    return std::find(local_ids_.begin(), local_ids_.end(), id) != local_ids_.end();
}

bool RoutingTable::contains(const NodeId& id) const {
    const auto& b = snapshot()->find_bucket(id);
    return std::any_of(b.entries.begin(), b.entries.end(), [&](const Contact& c) { return c.id == id; });
}

InsertResult RoutingTable::insert_contact(const NodeId& id, const Endpoint& endpoint, TimePoint now) {
    if (!endpoint.valid() || is_local_id(id)) return InsertResult::Rejected;
    std::lock_guard lock(write_mutex_);
    auto snap = std::make_shared<Snapshot>(*current_);
    const std::size_t k = config_.bucket_size;

    for (;;) {
        const std::size_t idx = snap->find_bucket_index(id);
        const Bucket& cur = *snap->buckets[idx];

        for (const auto& c : cur.entries) {
            if (c.id == id) {
                if (c.endpoint != endpoint) return InsertResult::Rejected;
                auto b = std::make_shared<Bucket>(cur);
                find_by_id(b->entries, id)->last_seen = now;
                snap->buckets[idx] = std::move(b);
                publish(std::move(snap));
                return InsertResult::Refreshed;
            }
            if (c.endpoint == endpoint) return InsertResult::Rejected;
        }

        const auto owner = ip_owner_.find(endpoint.ip);
        const bool ip_taken = config_.unique_ip && owner != ip_owner_.end();

        if (!ip_taken && cur.entries.size() < k) {
            auto b = std::make_shared<Bucket>(cur);
            std::erase_if(b->replacements, [&](const Contact& c) { return c.id == id || c.endpoint == endpoint; });
            b->entries.push_back(Contact{id, endpoint, now, now, 0});
            snap->buckets[idx] = std::move(b);
            ip_owner_[endpoint.ip] = id;
            publish(std::move(snap));
            return InsertResult::Inserted;
        }

        if (!ip_taken && cur.prefix.bit_count() < Key160::kBits && covers_local_id(cur.prefix)) {
            auto lo = std::make_shared<Bucket>(Bucket{cur.prefix.child(false), {}, {}});
            auto hi = std::make_shared<Bucket>(Bucket{cur.prefix.child(true), {}, {}});
            for (const auto& c : cur.entries) (hi->prefix.covers(c.id) ? hi : lo)->entries.push_back(c);
            for (const auto& c : cur.replacements) (hi->prefix.covers(c.id) ? hi : lo)->replacements.push_back(c);
            snap->buckets[idx] = std::move(lo);
            snap->buckets.insert(snap->buckets.begin() + static_cast<std::ptrdiff_t>(idx) + 1, std::move(hi));
            continue;
        }

        auto b = std::make_shared<Bucket>(cur);
        auto existing = std::find_if(b->replacements.begin(), b->replacements.end(),
                                     [&](const Contact& c) { return c.id == id || c.endpoint == endpoint; });
        if (existing != b->replacements.end()) {
            *existing = Contact{id, endpoint, existing->id == id ? existing->first_seen : now, now, 0};
        } else {
            if (b->replacements.size() >= k) {
                auto stalest = std::min_element(b->replacements.begin(), b->replacements.end(),
                                                [](const Contact& a, const Contact& c) { return a.last_seen < c.last_seen; });
                b->replacements.erase(stalest);
            }
            b->replacements.push_back(Contact{id, endpoint, now, now, 0});
        }
        snap->buckets[idx] = std::move(b);
        publish(std::move(snap));
        return InsertResult::Replacement;
    }
}

void RoutingTable::record_result(const Endpoint& endpoint, const NodeId& id, CallOutcome outcome, TimePoint now) {
    std::lock_guard lock(write_mutex_);
    const auto& cur_snap = *current_;
    std::size_t idx = cur_snap.find_bucket_index(id);
    NodeId key = id;
    auto matches = [&](const Contact& c) { return c.id == key && c.endpoint == endpoint; };

    auto in_entries = [&](const Bucket& b) { return std::any_of(b.entries.begin(), b.entries.end(), matches); };
    auto in_replacements = [&](const Bucket& b) {
        return std::any_of(b.replacements.begin(), b.replacements.end(), matches);
    };

    if (!in_entries(*cur_snap.buckets[idx]) && !in_replacements(*cur_snap.buckets[idx])) {
        // The node may have answered under a different ID than the one we filed it under.
        auto owner = ip_owner_.find(endpoint.ip);
        if (owner == ip_owner_.end()) return;
        key = owner->second;
        idx = cur_snap.find_bucket_index(key);
        if (!in_entries(*cur_snap.buckets[idx])) return;
    }

    auto snap = std::make_shared<Snapshot>(cur_snap);
    auto b = std::make_shared<Bucket>(*snap->buckets[idx]);
    const bool success = outcome == CallOutcome::Success;

    auto e = std::find_if(b->entries.begin(), b->entries.end(), matches);
    if (e != b->entries.end()) {
        if (success) {
            e->last_seen = now;
            e->consecutive_failures = 0;
        } else if (++e->consecutive_failures >= config_.eviction_failures) {
            ip_owner_.erase(e->endpoint.ip);
            b->entries.erase(e);
            // Promote the freshest replacement that does not clash on IP.
            auto best = b->replacements.end();
            for (auto r = b->replacements.begin(); r != b->replacements.end(); ++r) {
                if (config_.unique_ip && ip_owner_.count(r->endpoint.ip)) continue;
                if (best == b->replacements.end() || r->last_seen > best->last_seen) best = r;
            }
            if (best != b->replacements.end()) {
                ip_owner_[best->endpoint.ip] = best->id;
                b->entries.push_back(*best);
                b->replacements.erase(best);
            }
        }
    } else {
        auto r = std::find_if(b->replacements.begin(), b->replacements.end(), matches);
        if (r == b->replacements.end()) return;
        if (success) {
            r->last_seen = now;
            r->consecutive_failures = 0;
        } else {
            b->replacements.erase(r);
        }
    }
    snap->buckets[idx] = std::move(b);
    publish(std::move(snap));
}

std::string RoutingTable::dump() const {
    auto snap = snapshot();
    std::ostringstream out;
    for (const auto& b : snap->buckets) {
        out << b->prefix.key().to_hex() << '/' << b->prefix.bit_count() << ' ' << b->entries.size() << ' '
            << b->replacements.size() << '\n';
    }
    return out.str();
}

}  // namespace dhtidx
