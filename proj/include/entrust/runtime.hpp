#pragma once

// Topology and lifecycle: worker threads, trustee placement, pending request
// queues, the per-thread service pass, startup and drain/shutdown.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>

#include "entrust/counters.hpp"
#include "entrust/detail/cell.hpp"
#include "entrust/detail/completion.hpp"
#include "entrust/fiber.hpp"

namespace entrust {

struct startup_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// An application error raised inside a delegated body, transported back to
/// the caller as a value.
struct delegated_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct runtime_config {
    unsigned worker_threads = 0;    // 0 → one per hardware thread
    unsigned dedicated_trustees = 0; // first N threads serve only as trustees
    std::size_t fiber_stack_bytes = 64 * 1024;
    std::size_t fiber_pool_cap = 64;
    std::size_t pending_high_water = 4096;
    bool pin_threads = false;
    std::chrono::milliseconds drain_timeout{5000};
};

class runtime;

/// Stable identity of a trustee thread. Obtain via local_trustee() or
/// trustee_at(); use entrust() (defined with trust<T>) to place properties.
class trustee_ref {
public:
    unsigned index() const noexcept { return index_; }

    template <class T>
    auto entrust(T value) const; // -> trust<T>; defined in trust.hpp

    friend bool operator==(trustee_ref a, trustee_ref b) noexcept {
        return a.index_ == b.index_;
    }

private:
    friend class runtime;
    friend trustee_ref local_trustee();
    friend trustee_ref trustee_at(unsigned);
    explicit trustee_ref(unsigned idx) : index_(idx) {}
    unsigned index_;
};

namespace detail {
struct join_flag {
    std::atomic<bool> done{false};
};
} // namespace detail

/// Joinable handle for a fiber placed on another runtime thread.
class remote_fiber {
public:
    remote_fiber() = default;
    remote_fiber(remote_fiber&&) noexcept = default;
    remote_fiber& operator=(remote_fiber&&) noexcept = default;

    /// Waits for the fiber to finish. Cooperative from a runtime fiber
    /// (yields), spinning with OS yields from outside the runtime.
    void join();

private:
    friend class runtime;
    friend remote_fiber spawn_on(unsigned, std::function<void()>);
    std::shared_ptr<detail::join_flag> state_;
};

class runtime {
public:
    /// Starts worker threads, allocates the channel matrix, installs a
    /// service fiber on every thread. Only one runtime may exist at a time;
    /// a second start is a startup_error.
    explicit runtime(runtime_config cfg = {});
    ~runtime();

    runtime(const runtime&) = delete;
    runtime& operator=(const runtime&) = delete;

    /// Runs fn as a fiber on the first client thread and returns once fn and
    /// everything it spawned (fibers, requests, callbacks, drops) reached
    /// quiescence. May be called repeatedly; properties persist across runs.
    void run(std::function<void()> fn);

    /// Drains pending work, destroys remaining properties trustee-by-trustee
    /// and joins all threads. Idempotent. Reports fibers still suspended when
    /// the drain timeout expires (likely a user deadlock).
    void shutdown();

    unsigned worker_threads() const noexcept;
    /// Number of trustee targets handed out by trustee_at(): the dedicated
    /// count when set, the full thread count otherwise.
    unsigned trustee_count() const noexcept;

    counters_total counters() const;
    const thread_counters& thread_counter_block(unsigned thread_index) const;

    static runtime* active() noexcept;

    struct impl; // internal; defined in runtime.cpp

private:
    friend remote_fiber spawn_on(unsigned, std::function<void()>);
    std::unique_ptr<impl> p_;
};

/// Trustee identity of the calling runtime thread.
trustee_ref local_trustee();

/// i-th trustee (0-based). With dedicated trustees configured this indexes
/// the dedicated set; otherwise any worker thread. Out of range throws.
trustee_ref trustee_at(unsigned i);

unsigned trustee_count();

/// Spawns a fiber on the calling runtime thread (FIFO tail).
fiber_id spawn_fiber(std::function<void()> fn);

/// Spawns a fiber on the given runtime thread and returns a joinable handle.
remote_fiber spawn_on(unsigned thread_index, std::function<void()> fn);

// ---------------------------------------------------------------------------
// Hooks used by the trust<T> templates (stable, non-template surface).
// ---------------------------------------------------------------------------

namespace detail {

/// Signature every delegated thunk compiles down to. `property` is the cell
/// address; `env` the captured environment bytes; `arg` the serialized
/// argument (empty unless the apply_with family was used).
using thunk_fn = void (*)(std::uint64_t property, std::span<const std::byte> env,
                          std::span<const std::byte> arg, response_writer& out);

bool on_runtime_thread() noexcept;
std::uint32_t current_thread_index(); // throws outside runtime threads
std::uint32_t runtime_thread_count() noexcept;

/// Enqueues a task for `trustee` from the current thread and transmits it
/// opportunistically. Returns the task's per-pair sequence number.
std::uint64_t issue(std::uint32_t trustee, req_image image, completion done);

/// Cooperative wait while the pending queue for `trustee` is over the high
/// water mark (no-op in delegated context or outside fibers).
void backpressure(std::uint32_t trustee);

thread_counters& my_counters();

// Property lifecycle. Local variants run inline on the owning thread;
// issue_* send runtime-internal requests and return the birth coordinate
// deaths must be gated on.
void register_cell_local(cell_base* cell);
birth_ref issue_adopt(cell_base* cell);
birth_ref issue_birth(cell_base* cell);
void local_incref(cell_base* cell);
void local_decref(cell_base* cell);
void issue_death(cell_base* cell, birth_ref birth);
/// Death path usable from any thread (routed through the owner's inbox).
void external_death(cell_base* cell, birth_ref birth);

} // namespace detail

} // namespace entrust
