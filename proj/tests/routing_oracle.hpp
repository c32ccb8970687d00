#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "dhtidx/routing_table.hpp"

namespace oracle {

// Empty string when the snapshot satisfies every structural invariant.
inline std::string check_partition(const dhtidx::RoutingTable& table) {
    using namespace dhtidx;
    const auto snap = table.snapshot();
    const auto& buckets = snap->buckets;
    if (buckets.empty()) return "no buckets";
    if (!buckets.front()->prefix.key().is_zero()) return "first bucket does not start at zero";
    if (buckets.back()->prefix.last() != Key160::max()) return "last bucket does not end at max";
    const auto k = table.config().bucket_size;
    std::set<std::uint32_t> ips;
    std::set<NodeId> ids;
    for (std::size_t i = 0; i < buckets.size(); ++i) {
        const auto& b = *buckets[i];
        if (i + 1 < buckets.size()) {
            auto next = b.prefix.last();
            if (next.increment()) return "bucket past the end";
            if (next != buckets[i + 1]->prefix.key()) return "gap or overlap after bucket " + std::to_string(i);
        }
        if (b.entries.size() > k) return "bucket over capacity";
        if (b.replacements.size() > k) return "replacement cache over capacity";
        for (const auto& c : b.entries) {
            if (!b.prefix.covers(c.id)) return "entry outside its bucket";
            if (!ids.insert(c.id).second) return "duplicate id";
            if (table.config().unique_ip && !ips.insert(c.endpoint.ip).second) return "duplicate ip";
            for (const auto& l : table.local_ids()) {
                if (l == c.id) return "local id stored as contact";
            }
        }
        for (const auto& c : b.replacements) {
            if (!b.prefix.covers(c.id)) return "replacement outside its bucket";
        }
    }
    return {};
}

inline std::vector<dhtidx::Contact> all_entries(const dhtidx::RoutingTable& table) {
    std::vector<dhtidx::Contact> out;
    for (const auto& b : table.snapshot()->buckets) out.insert(out.end(), b->entries.begin(), b->entries.end());
    return out;
}

inline std::vector<dhtidx::NodeId> brute_force_closest(std::vector<dhtidx::NodeId> ids, const dhtidx::Key160& target,
                                                       std::size_t n) {
    std::sort(ids.begin(), ids.end(), [&](const auto& a, const auto& b) {
        return dhtidx::xor_distance(a, target) < dhtidx::xor_distance(b, target);
    });
    if (ids.size() > n) ids.resize(n);
    return ids;
}

}  // namespace oracle
