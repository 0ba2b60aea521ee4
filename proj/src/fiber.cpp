#include "entrust/fiber.hpp"

#include <boost/context/detail/exception.hpp>
#include <boost/context/fiber.hpp>
#include <boost/context/fixedsize_stack.hpp>

#include <algorithm>
#include <cstdio>
#include <deque>
#include <exception>
#include <utility>
#include <vector>

#include "entrust/detail/cpu.hpp"

namespace entrust {

namespace ctx = boost::context;

namespace detail {

struct fiber_impl {
    ctx::fiber handle;  // valid while the fiber is suspended from our side
    ctx::fiber back;    // scheduler context to return to; valid while running
    std::function<void()> fn;
    fiber_scheduler* owner = nullptr;
    fiber_id id = 0;
    std::uint64_t generation = 0;
    fiber_state state = fiber_state::ready;
    bool is_launch = false;
    bool is_service = false;
    bool pooled = false;  // parked in the reuse pool
    bool stop = false;    // tells a parked fiber to terminate
    bool counted = false; // included in the scheduler's alive count

    void suspend_to_scheduler() { back = std::move(back).resume(); }
};

} // namespace detail

using detail::fiber_impl;

struct fiber_scheduler::impl {
    fiber_scheduler* self;
    config cfg;
    std::deque<fiber_impl*> ready;
    std::vector<fiber_impl*> pool; // parked, reusable
    std::vector<fiber_impl*> all;  // every live fiber_impl, for teardown
    fiber_impl* current = nullptr;
    fiber_impl* service = nullptr;
    std::function<bool()> service_pass;
    bool last_service_did_work = false;
    bool stopping_service = false;
    fiber_id next_id = 1;

    fiber_impl* allocate(std::function<void()> fn, bool launch);
    void make_context(fiber_impl* f);
    void switch_to(fiber_impl* f);
    void uncount(fiber_impl* f) {
        if (f->counted) {
            f->counted = false;
            --self->alive_;
        }
    }
    void dispose(fiber_impl* f);
    void drain_pool();
};

namespace {
thread_local fiber_scheduler* g_current_scheduler = nullptr;
}

fiber_scheduler* fiber_scheduler::current() noexcept { return g_current_scheduler; }

fiber_scheduler::fiber_scheduler(config cfg) {
    if (g_current_scheduler != nullptr)
        throw std::logic_error("one fiber scheduler per thread");
    p_ = new impl{};
    p_->self = this;
    p_->cfg = cfg;
    g_current_scheduler = this;
}

fiber_scheduler::~fiber_scheduler() {
    p_->drain_pool();
    // Anything left (ready or suspended) is abandoned: destroying the context
    // unwinds its stack.
    while (!p_->all.empty()) p_->dispose(p_->all.back());
    delete p_;
    g_current_scheduler = nullptr;
}

void fiber_scheduler::impl::make_context(fiber_impl* f) {
    f->handle = ctx::fiber{
        std::allocator_arg, ctx::fixedsize_stack(cfg.stack_bytes),
        [f](ctx::fiber&& from) -> ctx::fiber {
            f->back = std::move(from);
            for (;;) {
                try {
                    f->fn();
                } catch (const ctx::detail::forced_unwind&) {
                    throw; // scheduler teardown
                } catch (const std::exception& e) {
                    std::fprintf(stderr, "entrust: uncaught exception in fiber %llu: %s\n",
                                 static_cast<unsigned long long>(f->id), e.what());
                } catch (...) {
                    std::fprintf(stderr, "entrust: uncaught exception in fiber %llu\n",
                                 static_cast<unsigned long long>(f->id));
                }
                f->fn = nullptr;
                auto* sched = f->owner->p_;
                if (f->stop || !f->is_launch || sched->pool.size() >= sched->cfg.pool_cap) break;
                // Park for reuse: wait until new work (or stop) is installed.
                f->pooled = true;
                f->state = fiber_state::done;
                sched->pool.push_back(f);
                f->suspend_to_scheduler();
                if (f->stop) break;
            }
            f->state = fiber_state::done;
            return std::move(f->back);
        }};
}

fiber_impl* fiber_scheduler::impl::allocate(std::function<void()> fn, bool launch) {
    if (launch && !pool.empty()) {
        fiber_impl* f = pool.back();
        pool.pop_back();
        f->pooled = false;
        f->fn = std::move(fn);
        f->id = next_id++;
        f->state = fiber_state::ready;
        return f;
    }
    auto* f = new fiber_impl{};
    f->owner = self;
    f->fn = std::move(fn);
    f->id = next_id++;
    f->is_launch = launch;
    all.push_back(f);
    try {
        make_context(f);
    } catch (...) {
        all.pop_back();
        delete f;
        throw;
    }
    return f;
}

void fiber_scheduler::impl::switch_to(fiber_impl* f) {
    current = f;
    f->state = fiber_state::running;
    ++self->switches_;
    f->handle = std::move(f->handle).resume();
    current = nullptr;
    if (!f->handle) {
        // The fiber terminated (its context returned to us).
        f->state = fiber_state::done;
        uncount(f);
        dispose(f);
    } else if (f->state == fiber_state::done && f->pooled) {
        uncount(f); // parked in the pool
    }
}

void fiber_scheduler::impl::dispose(fiber_impl* f) {
    auto it = std::find(all.begin(), all.end(), f);
    if (it != all.end()) {
        *it = all.back();
        all.pop_back();
    }
    delete f;
}

void fiber_scheduler::impl::drain_pool() {
    // Wake every parked fiber with the stop sign so its loop exits normally.
    while (!pool.empty()) {
        fiber_impl* f = pool.back();
        pool.pop_back();
        f->pooled = false;
        f->stop = true;
        f->state = fiber_state::ready;
        switch_to(f);
    }
}

fiber_id fiber_scheduler::spawn(std::function<void()> fn) {
    fiber_impl* f = p_->allocate(std::move(fn), false);
    f->counted = true;
    ++alive_;
    p_->ready.push_back(f);
    return f->id;
}

fiber_id fiber_scheduler::spawn_launch(std::function<void()> fn) {
    fiber_impl* f = p_->allocate(std::move(fn), true);
    f->counted = true;
    ++alive_;
    p_->ready.push_back(f);
    return f->id;
}

void fiber_scheduler::set_service(std::function<bool()> pass) { p_->service_pass = std::move(pass); }

void fiber_scheduler::run_until_idle() {
    while (!p_->ready.empty()) {
        fiber_impl* f = p_->ready.front();
        p_->ready.pop_front();
        p_->switch_to(f);
    }
}

void fiber_scheduler::run(const std::function<bool()>& should_stop) {
    // The service fiber participates in the FIFO rotation like any other
    // fiber: one pass per rotation.
    auto* sched = p_;
    fiber_impl* service = sched->allocate(
        [this, sched] {
            while (!sched->stopping_service) {
                bool did = false;
                if (sched->service_pass) did = sched->service_pass();
                ++service_passes_;
                sched->last_service_did_work = did;
                yield_now();
            }
        },
        false);
    service->is_service = true;
    sched->service = service;
    sched->ready.push_back(service);

    unsigned idle_rotations = 0;
    for (;;) {
        bool rotation_had_user_work = false;
        // One full rotation over the current queue contents.
        std::size_t n = sched->ready.size();
        while (n-- > 0 && !sched->ready.empty()) {
            fiber_impl* f = sched->ready.front();
            sched->ready.pop_front();
            const bool is_service = f->is_service;
            sched->switch_to(f);
            if (!is_service) rotation_had_user_work = true;
        }
        const bool had_work = rotation_had_user_work || sched->last_service_did_work;
        if (had_work) {
            idle_rotations = 0;
        } else {
            if (should_stop()) break;
            ++idle_rotations;
            if (idle_rotations < 16) {
                for (unsigned i = 0; i < (1u << (idle_rotations > 6 ? 6 : idle_rotations)); ++i)
                    detail::cpu_relax();
            } else {
                detail::os_yield();
            }
        }
    }

    // Retire the service fiber; it is the only ready fiber left.
    sched->stopping_service = true;
    while (!sched->ready.empty()) {
        fiber_impl* f = sched->ready.front();
        sched->ready.pop_front();
        sched->switch_to(f);
    }
    sched->service = nullptr;
    sched->drain_pool();
}

// ---------------------------------------------------------------------------
// Fiber-side API
// ---------------------------------------------------------------------------

bool in_fiber() noexcept {
    fiber_scheduler* s = fiber_scheduler::current();
    return s != nullptr && s->p_->current != nullptr;
}

bool can_block() noexcept {
    fiber_scheduler* s = fiber_scheduler::current();
    fiber_impl* f = s ? s->p_->current : nullptr;
    if (f == nullptr) return false;
    return s->delegated_depth_ == 0 || f->is_launch;
}

void yield_now() {
    fiber_scheduler* s = fiber_scheduler::current();
    fiber_impl* f = s ? s->p_->current : nullptr;
    if (f == nullptr) throw std::logic_error("yield_now: not inside a fiber");
    if (s->delegated_depth_ > 0 && !f->is_launch) throw delegated_context_violation{};
    ++f->generation; // tokens do not survive a yield
    f->state = fiber_state::ready;
    s->p_->ready.push_back(f);
    f->suspend_to_scheduler();
}

wake_token prepare_suspend() {
    fiber_scheduler* s = fiber_scheduler::current();
    fiber_impl* f = s ? s->p_->current : nullptr;
    if (f == nullptr) throw std::logic_error("prepare_suspend: not inside a fiber");
    return wake_token{f, f->generation};
}

void suspend_current() {
    fiber_scheduler* s = fiber_scheduler::current();
    fiber_impl* f = s ? s->p_->current : nullptr;
    if (f == nullptr) throw std::logic_error("suspend_current: not inside a fiber");
    if (s->delegated_depth_ > 0 && !f->is_launch) throw delegated_context_violation{};
    f->state = fiber_state::suspended;
    f->suspend_to_scheduler();
}

bool resume(wake_token token) {
    fiber_impl* f = token.fiber;
    if (f == nullptr || f->state != fiber_state::suspended || f->generation != token.generation)
        return false;
    ++f->generation; // consume the token
    f->state = fiber_state::ready;
    f->owner->p_->ready.push_back(f);
    return true;
}

delegated_depth_guard::delegated_depth_guard() : sched_(fiber_scheduler::current()) {
    if (sched_ != nullptr) ++sched_->delegated_depth_;
}

delegated_depth_guard::~delegated_depth_guard() {
    if (sched_ != nullptr) --sched_->delegated_depth_;
}

} // namespace entrust
