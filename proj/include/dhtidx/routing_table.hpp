#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "dhtidx/endpoint.hpp"
#include "dhtidx/identity.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

struct Contact {
    NodeId id;
    Endpoint endpoint;
    TimePoint first_seen{};
    TimePoint last_seen{};
    std::uint32_t consecutive_failures = 0;
};

struct Bucket {
    Prefix prefix;
    std::vector<Contact> entries;
    std::vector<Contact> replacements;
};

enum class CallOutcome { Success, Failure, Timeout };

enum class InsertResult { Inserted, Refreshed, Replacement, Rejected };

struct RoutingConfig {
    std::size_t bucket_size = 8;
    std::uint32_t eviction_failures = 3;
    /// At most one main entry per IP across the whole table.
    bool unique_ip = true;
};

/// Kademlia routing table shared by several local node IDs.
///
/// Buckets form a sorted partition of the keyspace. A full bucket splits
/// whenever its prefix covers any of the local IDs. Readers work on
/// immutable snapshots; writers serialize on a mutex, copy the buckets they
/// touch and publish a new snapshot.
class RoutingTable {
public:
    struct Snapshot {
        std::vector<std::shared_ptr<const Bucket>> buckets;

        /// Binary search for the bucket covering key.
        const Bucket& find_bucket(const Key160& key) const;
        std::size_t find_bucket_index(const Key160& key) const;
        std::vector<Contact> closest_contacts(const Key160& target, std::size_t n) const;
        std::size_t entry_count() const;
        std::size_t replacement_count() const;
    };

    explicit RoutingTable(std::vector<NodeId> local_ids, RoutingConfig config = {});

    std::shared_ptr<const Snapshot> snapshot() const;

    const std::vector<NodeId>& local_ids() const { return local_ids_; }
    const RoutingConfig& config() const { return config_; }

    InsertResult insert_contact(const NodeId& id, const Endpoint& endpoint, TimePoint now);

    /// Success refreshes the entry; the configured number of consecutive
    /// failures evicts it and promotes the freshest replacement. Unknown
    /// addresses are ignored.
    void record_result(const Endpoint& endpoint, const NodeId& id, CallOutcome outcome, TimePoint now);

    std::vector<Contact> closest_contacts(const Key160& target, std::size_t n) const {
        return snapshot()->closest_contacts(target, n);
    }

    std::size_t size() const { return snapshot()->entry_count(); }
    std::size_t bucket_count() const { return snapshot()->buckets.size(); }

    bool contains(const NodeId& id) const;

    /// One line per bucket: "<prefix hex>/<bits> <entries> <replacements>".
    std::string dump() const;

private:
    bool covers_local_id(const Prefix& p) const;
    void publish(std::shared_ptr<const Snapshot> next);
    bool is_local_id(const NodeId& id) const;

    std::vector<NodeId> local_ids_;
    RoutingConfig config_;

    mutable std::mutex write_mutex_;
    std::shared_ptr<const Snapshot> current_;
    // ip -> id of the main entry holding it; writer-side only.
    std::unordered_map<std::uint32_t, NodeId> ip_owner_;
};

}  // namespace dhtidx
