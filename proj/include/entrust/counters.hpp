#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "entrust/detail/cpu.hpp"

namespace entrust {

/// Debug/diagnostic counters, one block per runtime thread. Written only by
/// the owning thread with plain load+store pairs (no read-modify-write);
/// other threads read them with relaxed loads, so totals are exact only at
/// quiescence.
struct alignas(detail::cache_line) thread_counters {
    std::atomic<std::uint64_t> requests_issued{0};
    std::atomic<std::uint64_t> requests_submitted{0};
    std::atomic<std::uint64_t> requests_served{0};
    std::atomic<std::uint64_t> responses_delivered{0};
    std::atomic<std::uint64_t> batches_submitted{0};
    std::atomic<std::uint64_t> batches_served{0};
    std::atomic<std::uint64_t> service_passes{0};
    std::atomic<std::uint64_t> local_applies{0};
    std::atomic<std::uint64_t> errors_delivered{0};
    std::atomic<std::uint64_t> response_spills{0};
    std::atomic<std::uint64_t> deaths_parked{0};
    std::atomic<std::uint64_t> cells_adopted{0};
    std::atomic<std::uint64_t> cells_destroyed{0};
    // gauges, for quiescence detection
    std::atomic<std::uint64_t> fibers_alive{0};
    std::atomic<std::uint64_t> pending_depth{0};
    std::atomic<std::uint64_t> inbox_depth{0};
    std::atomic<std::uint64_t> deaths_waiting{0};
};

namespace detail {
/// Single-writer increment: a plain load+store pair, never an atomic RMW.
inline void bump(std::atomic<std::uint64_t>& c, std::uint64_t n = 1) noexcept {
    c.store(c.load(std::memory_order_relaxed) + n, std::memory_order_relaxed);
}
inline void gauge(std::atomic<std::uint64_t>& c, std::uint64_t v) noexcept {
    c.store(v, std::memory_order_relaxed);
}
} // namespace detail

struct counters_total {
    std::uint64_t requests_issued = 0;
    std::uint64_t requests_submitted = 0;
    std::uint64_t requests_served = 0;
    std::uint64_t responses_delivered = 0;
    std::uint64_t batches_submitted = 0;
    std::uint64_t batches_served = 0;
    std::uint64_t service_passes = 0;
    std::uint64_t local_applies = 0;
    std::uint64_t errors_delivered = 0;
    std::uint64_t response_spills = 0;
    std::uint64_t cells_adopted = 0;
    std::uint64_t cells_destroyed = 0;
};

} // namespace entrust
