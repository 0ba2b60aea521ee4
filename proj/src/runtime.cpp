#include "entrust/runtime.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>
#include <vector>

#include "entrust/channel.hpp"
#include "entrust/detail/cpu.hpp"
#include "entrust/trust.hpp"

namespace entrust {

using detail::birth_ref;
using detail::bump;
using detail::cell_base;
using detail::completion;
using detail::gauge;
using detail::pending_task;
using detail::req_image;
using detail::thunk_fn;

namespace {

constexpr const char* violation_marker = "[delegated-context-violation] ";

struct external_op {
    enum kind : int { spawn, death, destroy_leftovers };
    kind k = spawn;
    std::function<void()>* fn = nullptr;
    std::shared_ptr<detail::join_flag> join;
    cell_base* cell = nullptr;
    birth_ref birth{};
};

struct parked_death {
    cell_base* cell;
    birth_ref birth;
};

struct thread_state {
    std::uint32_t index = 0;
    runtime::impl* rt = nullptr;
    fiber_scheduler* sched = nullptr;

    // Client role, one block per trustee thread.
    struct pair_out {
        std::deque<pending_task> pending;
        std::deque<completion> inflight;
        std::uint32_t batch_size = 0; // requests in the submitted, unanswered batch
        std::uint64_t issue_seq = 0;  // requests ever issued on this pair
        bool delivering = false;      // poll in progress: defer flushes
    };
    std::vector<pair_out> out;

    // Trustee role.
    std::vector<std::uint64_t> served_from; // requests served, per client thread
    std::vector<parked_death> parked;       // deaths waiting for their birth
    std::vector<cell_base*> cells;          // registry of owned properties

    thread_counters ctrs;

    // Cross-thread inbox (drops from foreign threads, fiber injection,
    // shutdown commands). Never touched on the channel fast paths.
    std::mutex inbox_mu;
    std::vector<external_op> inbox;
    std::atomic<bool> inbox_flag{false};
};

thread_local thread_state* tls_state = nullptr;

runtime* g_active_runtime = nullptr;

} // namespace

struct runtime::impl {
    runtime_config cfg;
    std::uint32_t nthreads = 0;
    std::uint32_t first_client = 0;
    std::vector<channel_pair> matrix; // nthreads * nthreads, [client*T + trustee]
    std::vector<std::unique_ptr<thread_state>> states;
    std::vector<std::thread> threads;
    std::atomic<std::uint32_t> threads_ready{0};
    std::atomic<bool> stopping{false};
    std::atomic<bool> force_stop{false};
    bool down = false;

    channel_pair& pair(std::uint32_t client, std::uint32_t trustee) {
        return matrix[client * nthreads + trustee];
    }

    void worker_main(std::uint32_t index);
    bool service_pass(thread_state& ts);
    std::size_t serve_pair(thread_state& ts, std::uint32_t client);
    bool poll_pair(thread_state& ts, std::uint32_t trustee);
    bool flush_pair(thread_state& ts, std::uint32_t trustee);
    void process_inbox(thread_state& ts);
    void retry_parked(thread_state& ts);
    void destroy_all_cells(thread_state& ts);
    void publish_gauges(thread_state& ts);

    void push_inbox(std::uint32_t target, external_op op);
    remote_fiber inject_fiber(std::uint32_t target, std::function<void()> fn);

    struct snapshot {
        std::uint64_t issued = 0, submitted = 0, served = 0, delivered = 0;
        std::uint64_t alive = 0, inbox = 0, deaths = 0;
        bool operator==(const snapshot&) const = default;
        bool balanced() const {
            return issued == submitted && submitted == served && served == delivered &&
                   alive == 0 && inbox == 0 && deaths == 0;
        }
    };
    snapshot collect() const;
    bool wait_quiescent(std::chrono::milliseconds timeout) const;
};

// ---------------------------------------------------------------------------
// Property lifecycle helpers (always run on the owning thread)
// ---------------------------------------------------------------------------

namespace {

void register_cell(thread_state& ts, cell_base* cell) {
    cell->adopted = true;
    cell->registry_idx = ts.cells.size();
    ts.cells.push_back(cell);
    bump(ts.ctrs.cells_adopted);
}

void destroy_cell(thread_state& ts, cell_base* cell) {
    if (cell->adopted) {
        const std::size_t i = cell->registry_idx;
        ts.cells[i] = ts.cells.back();
        ts.cells[i]->registry_idx = i;
        ts.cells.pop_back();
    }
    bump(ts.ctrs.cells_destroyed);
    cell->destroy(cell);
}

bool birth_served(thread_state& ts, birth_ref birth) {
    if (birth.thread == birth_ref::inline_thread) return true;
    return ts.served_from[birth.thread] > birth.seq;
}

void apply_death(thread_state& ts, cell_base* cell, birth_ref birth) {
    if (!birth_served(ts, birth)) {
        ts.parked.push_back({cell, birth});
        bump(ts.ctrs.deaths_parked);
        gauge(ts.ctrs.deaths_waiting, ts.parked.size());
        return;
    }
    if (--cell->refcount == 0) destroy_cell(ts, cell);
}

// Internal thunks. The property word carries the cell; env carries the rest.

void adopt_thunk(std::uint64_t prop, std::span<const std::byte>, std::span<const std::byte>,
                 response_writer& w) {
    register_cell(*tls_state, reinterpret_cast<cell_base*>(prop));
    w.write_void();
}

void birth_thunk(std::uint64_t prop, std::span<const std::byte>, std::span<const std::byte>,
                 response_writer& w) {
    ++reinterpret_cast<cell_base*>(prop)->refcount;
    w.write_void();
}

void death_thunk(std::uint64_t prop, std::span<const std::byte> env, std::span<const std::byte>,
                 response_writer& w) {
    birth_ref birth;
    std::memcpy(&birth, env.data(), sizeof birth);
    apply_death(*tls_state, reinterpret_cast<cell_base*>(prop), birth);
    w.write_void();
}

req_image make_control_image(thunk_fn thunk, cell_base* cell, std::span<const std::byte> env) {
    outbound_request r;
    r.code = reinterpret_cast<std::uint64_t>(thunk);
    r.property = reinterpret_cast<std::uint64_t>(cell);
    r.env = env;
    const std::size_t size = encoded_request_size(env.size(), false, 0, false);
    req_image img(static_cast<std::uint32_t>(size));
    encode_request(r, {img.data(), size});
    return img;
}

} // namespace

// ---------------------------------------------------------------------------
// Service pass
// ---------------------------------------------------------------------------

std::size_t runtime::impl::serve_pair(thread_state& ts, std::uint32_t client) {
    channel_pair& p = pair(client, ts.index);
    const std::size_t n = poll_serve(p, [&](const inbound_request& in, response_writer& w) {
        delegated_depth_guard depth;
        const std::uint32_t before = w.count();
        try {
            reinterpret_cast<thunk_fn>(in.code)(in.property, in.env, in.arg, w);
        } catch (const delegated_context_violation& e) {
            if (w.count() != before) throw;
            w.write_error(std::string(violation_marker) + e.what());
        } catch (const std::exception& e) {
            if (w.count() != before) throw; // half-written response: poison
            w.write_error(e.what());
        } catch (...) {
            if (w.count() != before) throw;
            w.write_error("delegated body failed");
        }
    });
    if (n > 0) {
        ts.served_from[client] += n;
        bump(ts.ctrs.requests_served, n);
        bump(ts.ctrs.batches_served);
        if (p.response.flags & rsp_flags::spill) bump(ts.ctrs.response_spills);
    }
    return n;
}

bool runtime::impl::flush_pair(thread_state& ts, std::uint32_t trustee) {
    auto& o = ts.out[trustee];
    if (o.delivering || o.batch_size != 0 || o.pending.empty()) return false;

    std::span<const std::byte> views[max_batch_requests];
    const std::size_t want = std::min<std::size_t>(o.pending.size(), max_batch_requests);
    for (std::size_t i = 0; i < want; ++i) views[i] = o.pending[i].image.view();

    auto submitted = try_submit_batch(pair(ts.index, trustee), {views, want});
    if (!submitted || *submitted == 0) return false;

    for (std::size_t i = 0; i < *submitted; ++i) {
        o.inflight.push_back(std::move(o.pending.front().done));
        o.pending.pop_front();
    }
    o.batch_size = static_cast<std::uint32_t>(*submitted);
    bump(ts.ctrs.requests_submitted, *submitted);
    bump(ts.ctrs.batches_submitted);
    return true;
}

bool runtime::impl::poll_pair(thread_state& ts, std::uint32_t trustee) {
    auto& o = ts.out[trustee];
    if (o.batch_size == 0) return false;
    channel_pair& p = pair(ts.index, trustee);

    o.delivering = true;
    const std::size_t n = poll_responses(
        p, o.batch_size, [&](std::uint32_t i) { return o.inflight[i].mode; },
        [&](const response_view& v) {
            completion& c = o.inflight[v.index];
            delegated_depth_guard depth;
            if (v.is_error) {
                bump(ts.ctrs.errors_delivered);
                if (c.on_error != nullptr) c.on_error(c, v.payload);
            } else if (c.on_payload != nullptr) {
                c.on_payload(c, v.payload);
            }
            c.reset();
        });
    o.delivering = false;
    if (n == 0) return false;

    o.inflight.erase(o.inflight.begin(), o.inflight.begin() + static_cast<std::ptrdiff_t>(n));
    o.batch_size = 0;
    bump(ts.ctrs.responses_delivered, n);
    flush_pair(ts, trustee); // the slot is free again
    return true;
}

void runtime::impl::process_inbox(thread_state& ts) {
    std::vector<external_op> ops;
    {
        std::lock_guard<std::mutex> lk(ts.inbox_mu);
        ops.swap(ts.inbox);
        ts.inbox_flag.store(false, std::memory_order_relaxed);
        ts.ctrs.inbox_depth.store(0, std::memory_order_relaxed);
    }
    for (external_op& op : ops) {
        switch (op.k) {
        case external_op::spawn: {
            std::function<void()>* fn = op.fn;
            auto join = std::move(op.join);
            ts.sched->spawn([fn, join, &ts] {
                (*fn)();
                delete fn;
                gauge(ts.ctrs.fibers_alive, ts.sched->alive_fibers());
                if (join) join->done.store(true, std::memory_order_release);
            });
            gauge(ts.ctrs.fibers_alive, ts.sched->alive_fibers());
            break;
        }
        case external_op::death:
            apply_death(ts, op.cell, op.birth);
            break;
        case external_op::destroy_leftovers:
            destroy_all_cells(ts);
            break;
        }
    }
}

void runtime::impl::retry_parked(thread_state& ts) {
    for (std::size_t i = 0; i < ts.parked.size();) {
        if (birth_served(ts, ts.parked[i].birth)) {
            parked_death d = ts.parked[i];
            ts.parked[i] = ts.parked.back();
            ts.parked.pop_back();
            if (--d.cell->refcount == 0) destroy_cell(ts, d.cell);
        } else {
            ++i;
        }
    }
    gauge(ts.ctrs.deaths_waiting, ts.parked.size());
}

void runtime::impl::destroy_all_cells(thread_state& ts) {
    while (!ts.cells.empty()) destroy_cell(ts, ts.cells.back());
}

void runtime::impl::publish_gauges(thread_state& ts) {
    std::uint64_t pending = 0;
    for (const auto& o : ts.out) pending += o.pending.size();
    gauge(ts.ctrs.pending_depth, pending);
    gauge(ts.ctrs.fibers_alive, ts.sched->alive_fibers());
    gauge(ts.ctrs.deaths_waiting, ts.parked.size());
}

bool runtime::impl::service_pass(thread_state& ts) {
    bool did = false;
    bump(ts.ctrs.service_passes);

    // Inbound first: serve every client (including our own local pair).
    for (std::uint32_t c = 0; c < nthreads; ++c)
        if (serve_pair(ts, c) > 0) did = true;

    if (ts.inbox_flag.load(std::memory_order_acquire)) {
        process_inbox(ts);
        did = true;
    }
    if (!ts.parked.empty()) retry_parked(ts);

    // Outbound: deliver responses, then flush pending requests.
    for (std::uint32_t t = 0; t < nthreads; ++t)
        if (poll_pair(ts, t)) did = true;
    for (std::uint32_t t = 0; t < nthreads; ++t)
        if (flush_pair(ts, t)) did = true;

    publish_gauges(ts);
    return did;
}

// ---------------------------------------------------------------------------
// Worker threads, startup, shutdown
// ---------------------------------------------------------------------------

void runtime::impl::worker_main(std::uint32_t index) {
    if (cfg.pin_threads) detail::pin_this_thread(index);
    thread_state& ts = *states[index];
    tls_state = &ts;
    {
        fiber_scheduler sched(
            fiber_scheduler::config{cfg.fiber_stack_bytes, cfg.fiber_pool_cap});
        ts.sched = &sched;
        sched.set_service([this, &ts] { return service_pass(ts); });
        threads_ready.fetch_add(1, std::memory_order_release);
        try {
            sched.run([this, &sched] {
                return stopping.load(std::memory_order_relaxed) &&
                       (sched.alive_fibers() == 0 || force_stop.load(std::memory_order_relaxed));
            });
        } catch (const channel_poisoned& e) {
            std::fprintf(stderr, "entrust: fatal: %s\n", e.what());
            std::abort();
        }
        ts.sched = nullptr;
    }
    // Scheduler (and any abandoned fibers) are gone; destroy whatever
    // properties remain so every destructor runs exactly once.
    destroy_all_cells(ts);
    tls_state = nullptr;
}

runtime::runtime(runtime_config cfg) : p_(new impl{}) {
    if (g_active_runtime != nullptr)
        throw startup_error("a runtime is already active in this process");
    if (cfg.worker_threads == 0) cfg.worker_threads = std::thread::hardware_concurrency();
    if (cfg.worker_threads == 0) cfg.worker_threads = 1;
    if (cfg.dedicated_trustees >= cfg.worker_threads)
        throw startup_error("dedicated_trustees must be smaller than worker_threads");

    p_->cfg = cfg;
    p_->nthreads = cfg.worker_threads;
    p_->first_client = cfg.dedicated_trustees;
    p_->matrix = std::vector<channel_pair>(std::size_t{p_->nthreads} * p_->nthreads);
    p_->states.reserve(p_->nthreads);
    for (std::uint32_t i = 0; i < p_->nthreads; ++i) {
        auto ts = std::make_unique<thread_state>();
        ts->index = i;
        ts->rt = p_.get();
        ts->out.resize(p_->nthreads);
        ts->served_from.assign(p_->nthreads, 0);
        p_->states.push_back(std::move(ts));
    }
    try {
        for (std::uint32_t i = 0; i < p_->nthreads; ++i)
            p_->threads.emplace_back([this, i] { p_->worker_main(i); });
    } catch (...) {
        p_->stopping.store(true);
        p_->force_stop.store(true);
        for (auto& t : p_->threads) t.join();
        throw startup_error("failed to start worker threads");
    }
    while (p_->threads_ready.load(std::memory_order_acquire) != p_->nthreads)
        std::this_thread::sleep_for(std::chrono::microseconds(50));
    g_active_runtime = this;
}

runtime::~runtime() {
    try {
        shutdown();
    } catch (...) {
    }
}

void runtime::impl::push_inbox(std::uint32_t target, external_op op) {
    thread_state& ts = *states[target];
    {
        std::lock_guard<std::mutex> lk(ts.inbox_mu);
        ts.inbox.push_back(std::move(op));
        ts.ctrs.inbox_depth.store(ts.inbox.size(), std::memory_order_relaxed);
    }
    ts.inbox_flag.store(true, std::memory_order_release);
}

remote_fiber runtime::impl::inject_fiber(std::uint32_t target, std::function<void()> fn) {
    remote_fiber h;
    h.state_ = std::make_shared<remote_fiber::state>();
    external_op op;
    op.k = external_op::spawn;
    op.fn = new std::function<void()>(std::move(fn));
    op.join = h.state_;
    push_inbox(target, std::move(op));
    return h;
}

runtime::impl::snapshot runtime::impl::collect() const {
    snapshot s;
    for (const auto& ts : states) {
        const thread_counters& c = ts->ctrs;
        s.issued += c.requests_issued.load(std::memory_order_relaxed);
        s.submitted += c.requests_submitted.load(std::memory_order_relaxed);
        s.served += c.requests_served.load(std::memory_order_relaxed);
        s.delivered += c.responses_delivered.load(std::memory_order_relaxed);
        s.alive += c.fibers_alive.load(std::memory_order_relaxed);
        s.inbox += c.inbox_depth.load(std::memory_order_relaxed);
        s.deaths += c.deaths_waiting.load(std::memory_order_relaxed);
    }
    return s;
}

bool runtime::impl::wait_quiescent(std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        snapshot a = collect();
        if (a.balanced()) {
            std::this_thread::sleep_for(std::chrono::microseconds(200));
            snapshot b = collect();
            if (a == b && b.balanced()) return true;
        } else {
            std::this_thread::sleep_for(std::chrono::microseconds(100));
        }
        if (std::chrono::steady_clock::now() > deadline) return false;
    }
}

void runtime::run(std::function<void()> fn) {
    if (p_->down) throw startup_error("runtime already shut down");
    remote_fiber h = p_->inject_fiber(p_->first_client, std::move(fn));
    h.join();
    // Quiesce: the injected fiber finished, wait for everything it caused.
    while (!p_->wait_quiescent(std::chrono::hours(1))) {
    }
}

void runtime::shutdown() {
    if (p_->down) return;
    p_->down = true;

    const bool drained = p_->wait_quiescent(p_->cfg.drain_timeout);
    if (!drained) {
        auto s = p_->collect();
        std::fprintf(stderr,
                     "entrust: drain timeout: %llu fiber(s) still alive, "
                     "%llu request(s) in flight (likely a user deadlock)\n",
                     static_cast<unsigned long long>(s.alive),
                     static_cast<unsigned long long>(s.issued - s.delivered));
    } else {
        // Destroy remaining properties trustee-by-trustee while every thread
        // still serves: destructors may themselves delegate drops.
        for (std::uint32_t t = 0; t < p_->nthreads; ++t) {
            external_op op;
            op.k = external_op::destroy_leftovers;
            p_->push_inbox(t, std::move(op));
            if (!p_->wait_quiescent(p_->cfg.drain_timeout)) break;
        }
    }

    p_->force_stop.store(!drained, std::memory_order_relaxed);
    p_->stopping.store(true, std::memory_order_relaxed);
    for (auto& t : p_->threads) t.join();
    p_->threads.clear();
    g_active_runtime = nullptr;
}

unsigned runtime::worker_threads() const noexcept { return p_->nthreads; }

unsigned runtime::trustee_count() const noexcept {
    return p_->cfg.dedicated_trustees > 0 ? p_->cfg.dedicated_trustees : p_->nthreads;
}

counters_total runtime::counters() const {
    counters_total t;
    for (const auto& ts : p_->states) {
        const thread_counters& c = ts->ctrs;
        t.requests_issued += c.requests_issued.load(std::memory_order_relaxed);
        t.requests_submitted += c.requests_submitted.load(std::memory_order_relaxed);
        t.requests_served += c.requests_served.load(std::memory_order_relaxed);
        t.responses_delivered += c.responses_delivered.load(std::memory_order_relaxed);
        t.batches_submitted += c.batches_submitted.load(std::memory_order_relaxed);
        t.batches_served += c.batches_served.load(std::memory_order_relaxed);
        t.service_passes += c.service_passes.load(std::memory_order_relaxed);
        t.local_applies += c.local_applies.load(std::memory_order_relaxed);
        t.errors_delivered += c.errors_delivered.load(std::memory_order_relaxed);
        t.response_spills += c.response_spills.load(std::memory_order_relaxed);
        t.cells_adopted += c.cells_adopted.load(std::memory_order_relaxed);
        t.cells_destroyed += c.cells_destroyed.load(std::memory_order_relaxed);
    }
    return t;
}

const thread_counters& runtime::thread_counter_block(unsigned i) const {
    return p_->states.at(i)->ctrs;
}

runtime* runtime::active() noexcept { return g_active_runtime; }

// ---------------------------------------------------------------------------
// Free functions and template hooks
// ---------------------------------------------------------------------------

void remote_fiber::join() {
    if (!state_) return;
    if (in_fiber()) {
        while (!state_->done.load(std::memory_order_acquire)) yield_now();
    } else {
        while (!state_->done.load(std::memory_order_acquire))
            std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
}

trustee_ref local_trustee() { return trustee_ref(detail::current_thread_index()); }

trustee_ref trustee_at(unsigned i) {
    runtime* rt = runtime::active();
    if (rt == nullptr) throw startup_error("no active runtime");
    if (i >= rt->trustee_count()) throw std::out_of_range("trustee_at: index out of range");
    return trustee_ref(i);
}

unsigned trustee_count() {
    runtime* rt = runtime::active();
    if (rt == nullptr) throw startup_error("no active runtime");
    return rt->trustee_count();
}

fiber_id spawn_fiber(std::function<void()> fn) {
    thread_state* ts = tls_state;
    if (ts == nullptr || ts->sched == nullptr)
        throw std::logic_error("spawn_fiber: not on a runtime thread");
    fiber_id id = ts->sched->spawn([fn = std::move(fn), ts] {
        fn();
        gauge(ts->ctrs.fibers_alive, ts->sched->alive_fibers());
    });
    gauge(ts->ctrs.fibers_alive, ts->sched->alive_fibers());
    return id;
}

remote_fiber spawn_on(unsigned thread_index, std::function<void()> fn) {
    runtime* rt = runtime::active();
    if (rt == nullptr) throw startup_error("no active runtime");
    if (thread_index >= rt->p_->nthreads) throw std::out_of_range("spawn_on: bad thread index");
    if (thread_index < rt->p_->first_client)
        throw std::logic_error("spawn_on: thread is a dedicated trustee");
    return rt->p_->inject_fiber(thread_index, std::move(fn));
}

namespace detail {

bool on_runtime_thread() noexcept { return tls_state != nullptr; }

std::uint32_t current_thread_index() {
    if (tls_state == nullptr)
        throw std::logic_error("this operation requires a runtime thread");
    return tls_state->index;
}

std::uint32_t runtime_thread_count() noexcept {
    return tls_state != nullptr ? tls_state->rt->nthreads : 0;
}

thread_counters& my_counters() { return tls_state->ctrs; }

std::uint64_t issue(std::uint32_t trustee, req_image image, completion done) {
    thread_state& ts = *tls_state;
    auto& o = ts.out[trustee];
    const std::uint64_t seq = o.issue_seq++;
    o.pending.push_back(pending_task{std::move(image), std::move(done)});
    bump(ts.ctrs.requests_issued);
    // Transmit opportunistically while the slot is free.
    if (o.batch_size == 0 && !o.delivering) ts.rt->flush_pair(ts, trustee);
    return seq;
}

void backpressure(std::uint32_t trustee) {
    thread_state& ts = *tls_state;
    const std::size_t hw = ts.rt->cfg.pending_high_water;
    while (ts.out[trustee].pending.size() >= hw && can_block()) yield_now();
}

void register_cell_local(cell_base* cell) { register_cell(*tls_state, cell); }

birth_ref issue_adopt(cell_base* cell) {
    completion done;
    done.mode = resp_mode::none();
    const std::uint64_t seq = issue(cell->trustee, make_control_image(&adopt_thunk, cell, {}),
                                    std::move(done));
    return birth_ref{tls_state->index, seq};
}

birth_ref issue_birth(cell_base* cell) {
    completion done;
    done.mode = resp_mode::none();
    const std::uint64_t seq = issue(cell->trustee, make_control_image(&birth_thunk, cell, {}),
                                    std::move(done));
    return birth_ref{tls_state->index, seq};
}

void local_incref(cell_base* cell) { ++cell->refcount; }

void local_decref(cell_base* cell) {
    if (--cell->refcount == 0) destroy_cell(*tls_state, cell);
}

void issue_death(cell_base* cell, birth_ref birth) {
    completion done;
    done.mode = resp_mode::none();
    issue(cell->trustee,
          make_control_image(&death_thunk, cell,
                             {reinterpret_cast<const std::byte*>(&birth), sizeof birth}),
          std::move(done));
}

void external_death(cell_base* cell, birth_ref birth) {
    runtime* rt = runtime::active();
    if (rt == nullptr) {
        // No runtime left to route through; the property was (or will be)
        // reclaimed by runtime teardown.
        return;
    }
    external_op op;
    op.k = external_op::death;
    op.cell = cell;
    op.birth = birth;
    rt->p_->push_inbox(cell->trustee, std::move(op));
}

void spawn_launch_fiber(std::function<void()> body) {
    thread_state* ts = tls_state;
    ts->sched->spawn_launch([fn = std::move(body), ts] {
        fn();
        gauge(ts->ctrs.fibers_alive, ts->sched->alive_fibers());
    });
    gauge(ts->ctrs.fibers_alive, ts->sched->alive_fibers());
}

void launch_complete(std::uint32_t origin, void (*deliver)(void*, std::span<const std::byte>),
                     void* target, wire::buffer payload) {
    thread_state& ts = *tls_state;
    if (origin == ts.index) {
        delegated_depth_guard depth;
        deliver(target, {payload.data(), payload.size()});
        return;
    }
    launch_done_env env{deliver, target};
    completion done;
    done.mode = resp_mode::none();
    outbound_request r;
    r.code = reinterpret_cast<std::uint64_t>(&launch_done_thunk);
    r.property = 0;
    r.env = {reinterpret_cast<const std::byte*>(&env), sizeof env};
    r.has_arg = true;
    const bool indirect =
        encoded_request_size(sizeof env, true, payload.size(), false) > max_request_bytes;
    if (indirect) {
        done.owned_arg = new std::byte[payload.size()];
        std::memcpy(done.owned_arg, payload.data(), payload.size());
        r.arg = {done.owned_arg, payload.size()};
        r.arg_indirect = true;
    } else {
        r.arg = {payload.data(), payload.size()};
    }
    const std::size_t size =
        encoded_request_size(sizeof env, true, r.arg.size(), r.arg_indirect);
    req_image img(static_cast<std::uint32_t>(size));
    encode_request(r, {img.data(), size});
    issue(origin, std::move(img), std::move(done));
}

} // namespace detail

} // namespace entrust
