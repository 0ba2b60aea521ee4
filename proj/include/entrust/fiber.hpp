#pragma once

// Cooperative user-level threads, one scheduler per OS thread.
//
// Fibers run on their own stacks, are scheduled FIFO, and never migrate
// between threads. A per-thread service fiber (installed by the runtime)
// participates in the same FIFO rotation; it serves inbound channel batches,
// polls responses and flushes pending requests. Blocking operations raise
// delegated_context_violation when attempted while a delegated body executes
// inline, except from launch fibers, which exist precisely to host blocking
// delegated work.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>

namespace entrust {

/// A blocking call (suspension or yield) was attempted while a delegated body
/// executed inline on this thread. Use the non-blocking *_then family, or
/// launch, inside delegated context.
struct delegated_context_violation : std::logic_error {
    delegated_context_violation()
        : std::logic_error("blocking delegation is not permitted in delegated context") {}
};

enum class fiber_state : std::uint8_t { ready, running, suspended, done };

using fiber_id = std::uint64_t;

namespace detail {
struct fiber_impl;
}

/// Single-use permission to resume one specific suspension of one fiber.
/// Valid only on the fiber's own thread.
struct wake_token {
    detail::fiber_impl* fiber = nullptr;
    std::uint64_t generation = 0;

    explicit operator bool() const noexcept { return fiber != nullptr; }
};

class fiber_scheduler {
public:
    struct config {
        std::size_t stack_bytes = 64 * 1024;
        std::size_t pool_cap = 64; // parked reusable fibers kept per thread
    };

    explicit fiber_scheduler(config cfg = {});
    ~fiber_scheduler();

    fiber_scheduler(const fiber_scheduler&) = delete;
    fiber_scheduler& operator=(const fiber_scheduler&) = delete;

    /// Enqueues a fiber at the tail of the ready queue.
    fiber_id spawn(std::function<void()> fn);

    /// Like spawn, but the fiber is marked as a launch fiber: it may suspend
    /// even while the thread is in delegated context, and it is recycled
    /// through the fiber pool when it completes.
    fiber_id spawn_launch(std::function<void()> fn);

    /// Installs the service pass. The scheduler keeps a dedicated service
    /// fiber that runs the pass once per FIFO rotation; the pass returns true
    /// when it performed any work.
    void set_service(std::function<bool()> pass);

    /// Runs fibers until every fiber is done. For schedulers without a
    /// service pass (unit tests, lock-mode tools).
    void run_until_idle();

    /// Full loop: rotates ready fibers (including the service fiber) until
    /// should_stop() holds and no user fiber remains. Idle rotations back off
    /// with relax hints and eventually OS yields.
    void run(const std::function<bool()>& should_stop);

    /// Fibers alive on this thread (ready, running or suspended), excluding
    /// the service fiber and parked pool fibers.
    std::size_t alive_fibers() const noexcept { return alive_; }
    std::uint64_t context_switches() const noexcept { return switches_; }
    std::uint64_t service_passes() const noexcept { return service_passes_; }

    /// Delegated-context depth. Nonzero exactly while a delegated body (or a
    /// then-callback) executes inline on this thread.
    unsigned delegated_depth() const noexcept { return delegated_depth_; }

    /// Scheduler of the calling thread, or nullptr outside runtime threads.
    static fiber_scheduler* current() noexcept;

private:
    friend bool in_fiber() noexcept;
    friend bool can_block() noexcept;
    friend void yield_now();
    friend wake_token prepare_suspend();
    friend void suspend_current();
    friend bool resume(wake_token);
    friend class delegated_depth_guard;
    friend struct detail::fiber_impl;

    struct impl;
    impl* p_;
    std::size_t alive_ = 0;
    std::uint64_t switches_ = 0;
    std::uint64_t service_passes_ = 0;
    unsigned delegated_depth_ = 0;
};

/// True when called from inside a fiber of this thread's scheduler.
bool in_fiber() noexcept;

/// True when a blocking call (suspension) would be legal right now: inside a
/// fiber, and either not in delegated context or on a launch fiber.
bool can_block() noexcept;

/// Moves the current fiber to the ready-queue tail and runs the next fiber.
/// Raises delegated_context_violation from inline delegated context.
void yield_now();

/// Mints the wake token for the current fiber's next suspension. Hand it to
/// whoever will resume the fiber, then call suspend_current().
wake_token prepare_suspend();

/// Suspends the current fiber until its token is fired. Raises
/// delegated_context_violation from inline delegated context unless the
/// current fiber is a launch fiber.
void suspend_current();

/// Fires a token. Returns false when the token is stale (already used or the
/// fiber moved on), in which case nothing happens.
bool resume(wake_token token);

/// RAII marker for inline execution of a delegated body or then-callback.
class delegated_depth_guard {
public:
    delegated_depth_guard();
    ~delegated_depth_guard();
    delegated_depth_guard(const delegated_depth_guard&) = delete;
    delegated_depth_guard& operator=(const delegated_depth_guard&) = delete;

private:
    fiber_scheduler* sched_;
};

} // namespace entrust
