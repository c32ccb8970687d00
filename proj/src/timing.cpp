#include "dhtidx/timing.hpp"

#include <algorithm>
#include <string>

namespace dhtidx {

void RttWindow::record_rtt(std::uint32_t rtt_ms) {
    if (rtt_ms == 0 || rtt_ms > kHardTimeoutMs) {
        throw RttOutOfRange("rtt of " + std::to_string(rtt_ms) + " ms outside (0, 10000]");
    }
    std::lock_guard lock(mutex_);
    samples_[next_] = rtt_ms;
    next_ = (next_ + 1) % kCapacity;
    count_ = std::min(count_ + 1, kCapacity);
    cached_.store(recompute(), std::memory_order_relaxed);
}

std::size_t RttWindow::size() const {
    std::lock_guard lock(mutex_);
    return count_;
}

std::uint32_t RttWindow::recompute() const {
    if (count_ < kWarmupSamples) return kHardTimeoutMs;
    std::array<std::uint32_t, kCapacity> scratch{};
    std::copy_n(samples_.begin(), count_, scratch.begin());
    // ceil(0.9 n) as integer arithmetic; rank is 1-based.
    const std::size_t rank = (9 * count_ + 9) / 10;
    auto nth = scratch.begin() + static_cast<std::ptrdiff_t>(rank - 1);
    std::nth_element(scratch.begin(), nth, scratch.begin() + static_cast<std::ptrdiff_t>(count_));
    return *nth;
}

}  // namespace dhtidx
