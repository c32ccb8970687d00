#pragma once

#include <cstdint>
#include <list>
#include <optional>
#include <unordered_map>

#include "dhtidx/identity.hpp"
#include "dhtidx/runtime.hpp"

namespace dhtidx {

/// Adaptive Replacement Cache directory (Megiddo & Modha) over keys only,
/// with a capacity that may change at runtime.
class ArcDirectory {
public:
    enum class ListId : std::uint8_t { T1, T2, B1, B2 };

    explicit ArcDirectory(std::size_t capacity);

    /// Processes one reference to key; returns true if it was resident
    /// (in T1 or T2) beforehand.
    bool reference(const Key160& key);

    bool resident(const Key160& key) const;
    std::optional<ListId> where(const Key160& key) const;

    /// Shrinking demotes or drops the least recently used keys until the
    /// size invariants hold again.
    void resize(std::size_t capacity);

    std::size_t capacity() const { return c_; }
    double target_t1() const { return p_; }
    std::size_t t1_size() const { return t1_.size(); }
    std::size_t t2_size() const { return t2_.size(); }
    std::size_t b1_size() const { return b1_.size(); }
    std::size_t b2_size() const { return b2_.size(); }
    std::size_t resident_size() const { return t1_.size() + t2_.size(); }
    std::size_t ghost_size() const { return b1_.size() + b2_.size(); }

    /// |T1|+|T2| <= c, |T1|+|B1| <= c, total <= 2c, |T2|+|B2| <= 2c and
    /// the index agrees with the lists.
    bool invariants_hold() const;

private:
    using List = std::list<Key160>;
    struct Slot {
        ListId list;
        List::iterator it;
    };

    List& list(ListId id);
    void push_mru(ListId id, const Key160& key);
    void remove(const Key160& key);
    void drop_lru(ListId id);
    void move_lru(ListId from, ListId to);
    void replace(bool hit_in_b2);

    std::size_t c_;
    double p_ = 0;
    List t1_, t2_, b1_, b2_;  // front = MRU
    std::unordered_map<Key160, Slot> index_;
};

enum class QueueFeedback { Overflow, Underflow };

struct AdmissionConfig {
    std::size_t min_capacity = 256;
    std::size_t max_capacity = 65536;
    double increment = 0.02;
    double decrement = 0.002;
    Duration freeze = milliseconds(100);
};

struct AdmissionStats {
    std::size_t resident = 0;
    std::size_t ghost = 0;
    double target_t1 = 0;
    double pressure = 0;
    std::size_t capacity = 0;
    std::uint64_t admitted = 0;
    std::uint64_t denied = 0;
    std::uint64_t adjustments = 0;
};

/// ARC residency filter whose capacity is steered by Blue-style queue
/// feedback. As a blacklist, admit() lets a key through only when it is not
/// currently resident, so recently or frequently seen keys are suppressed.
///
/// Blue's marking probability is kept as a pressure value in [0, 1] that
/// maps geometrically onto the capacity range
/// min_capacity * (max_capacity / min_capacity) ^ pressure.
class AdmissionFilter {
public:
    explicit AdmissionFilter(AdmissionConfig config = {});

    /// True iff h was not resident; the reference is recorded either way.
    bool admit(const Key160& h, TimePoint now);

    /// Overflow raises pressure by `increment`, underflow lowers it by
    /// `decrement`; at most one change per freeze interval.
    void on_queue_feedback(QueueFeedback event, TimePoint now);

    bool contains(const Key160& h) const { return arc_.resident(h); }

    double pressure() const { return pressure_; }
    std::size_t capacity() const { return arc_.capacity(); }
    const ArcDirectory& directory() const { return arc_; }
    AdmissionStats stats() const;

private:
    std::size_t capacity_for(double pressure) const;

    AdmissionConfig config_;
    ArcDirectory arc_;
    double pressure_ = 0;
    std::optional<TimePoint> last_change_;
    std::uint64_t admitted_ = 0;
    std::uint64_t denied_ = 0;
    std::uint64_t adjustments_ = 0;
};

}  // namespace dhtidx
