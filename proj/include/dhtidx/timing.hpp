#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <mutex>
#include <stdexcept>

namespace dhtidx {

inline constexpr std::uint32_t kHardTimeoutMs = 10000;

class RttOutOfRange : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Ring buffer of the last 256 successful round-trip times of one socket,
/// yielding the adaptive (stall) timeout as their nearest-rank 90th
/// percentile.
class RttWindow {
public:
    static constexpr std::size_t kCapacity = 256;
    static constexpr std::size_t kWarmupSamples = 16;

    /// Throws RttOutOfRange unless 0 < rtt_ms <= 10000.
    void record_rtt(std::uint32_t rtt_ms);

    /// 10000 ms until 16 samples exist; afterwards the ceil(0.9 n)-th
    /// smallest sample.
    std::uint32_t adaptive_timeout() const { return cached_.load(std::memory_order_relaxed); }

    std::size_t size() const;

private:
    std::uint32_t recompute() const;

    mutable std::mutex mutex_;
    std::array<std::uint32_t, kCapacity> samples_{};
    std::size_t count_ = 0;
    std::size_t next_ = 0;
    std::atomic<std::uint32_t> cached_{kHardTimeoutMs};
};

}  // namespace dhtidx
