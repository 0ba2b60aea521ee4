#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <thread>

namespace entrust::detail {

inline constexpr std::size_t cache_line = 64;

/// Relax hint for spin loops and synthetic critical sections.
inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#elif defined(__aarch64__)
    asm volatile("yield" ::: "memory");
#else
    asm volatile("" ::: "memory");
#endif
}

inline void os_yield() noexcept { std::this_thread::yield(); }

inline std::uint64_t now_ns() noexcept {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

/// Best-effort affinity pin; returns false when unsupported or denied.
bool pin_this_thread(unsigned cpu_index) noexcept;

/// Number of distinct physical cores (falls back to hardware_concurrency).
unsigned physical_core_count() noexcept;

} // namespace entrust::detail
