#pragma once

// trust<T>: the user-facing handle to an entrusted property. All access goes
// through the apply family; the property itself lives on its trustee's thread
// and is never exposed by reference across threads.
//
// Delegated bodies may capture values only: the captured environment must be
// trivially copyable and bounded, results and explicit arguments must be
// wire-encodable values. By-reference captures cannot be detected by the
// compiler and are forbidden by contract.

#include <cstring>
#include <new>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>

#include "entrust/channel.hpp"
#include "entrust/latch.hpp"
#include "entrust/runtime.hpp"
#include "entrust/wire.hpp"

namespace entrust {

template <class T>
class trust;

namespace detail {

inline constexpr std::size_t max_env_bytes = max_request_bytes - min_request_bytes;

template <class F>
inline constexpr std::size_t env_size_of = std::is_empty_v<F> ? 0 : sizeof(F);

template <class U>
constexpr resp_mode mode_for() {
    if constexpr (std::is_void_v<U>)
        return resp_mode::none();
    else if constexpr (wire::codec<U>::fixed_size)
        return resp_mode::sized(static_cast<std::uint32_t>(wire::codec<U>::size));
    else
        return resp_mode::variable();
}

template <class T>
T& cell_value(cell_base* cell) noexcept {
    return static_cast<property_cell<T>*>(cell)->value;
}

template <class U>
U decode_result(std::span<const std::byte> payload) {
    if constexpr (wire::codec<U>::fixed_size) {
        U u;
        std::memcpy(&u, payload.data(), sizeof(U));
        return u;
    } else {
        return wire::decode<U>(payload);
    }
}

template <class U>
void write_result(response_writer& w, const U& r) {
    if constexpr (wire::codec<U>::fixed_size) {
        w.write_fixed({reinterpret_cast<const std::byte*>(&r), sizeof(U)});
    } else {
        wire::buffer buf;
        wire::encode_into(r, buf);
        w.write_var(buf);
    }
}

template <class U, class F, class... A>
void invoke_and_write(response_writer& w, F& f, A&... a) {
    if constexpr (std::is_void_v<U>) {
        f(a...);
        w.write_void();
    } else {
        write_result<U>(w, f(a...));
    }
}

/// Rebuilds the captured environment from slot bytes. Legal for trivially
/// copyable closure types (implicit lifetime); empty closures are
/// default-constructed, which C++20 allows for capture-less lambdas.
template <class F, class Fn>
decltype(auto) with_env(std::span<const std::byte> env, Fn&& use) {
    if constexpr (std::is_empty_v<F>) {
        F f{};
        return use(f);
    } else {
        alignas(F) std::byte buf[sizeof(F)];
        std::memcpy(buf, env.data(), sizeof(F));
        F* f = std::launder(reinterpret_cast<F*>(buf));
        return use(*f);
    }
}

template <class T, class F, class U>
void body_thunk(std::uint64_t prop, std::span<const std::byte> env, std::span<const std::byte>,
                response_writer& w) {
    T& value = cell_value<T>(reinterpret_cast<cell_base*>(prop));
    with_env<F>(env, [&](F& f) { invoke_and_write<U>(w, f, value); });
}

template <class T, class F, class U, class V>
void body_with_thunk(std::uint64_t prop, std::span<const std::byte> env,
                     std::span<const std::byte> arg, response_writer& w) {
    T& value = cell_value<T>(reinterpret_cast<cell_base*>(prop));
    V v = wire::decode<V>(arg);
    with_env<F>(env, [&](F& f) {
        if constexpr (std::is_void_v<U>) {
            f(value, std::move(v));
            w.write_void();
        } else {
            write_result<U>(w, f(value, std::move(v)));
        }
    });
}

template <class F>
std::span<const std::byte> env_bytes(const F& body) noexcept {
    if constexpr (std::is_empty_v<F>)
        return {};
    else
        return {reinterpret_cast<const std::byte*>(&body), sizeof(F)};
}

/// Encodes a request into a pending image; decides the indirect-argument
/// route when the encoding would not fit a block. The indirect buffer must
/// already be owned by the completion record.
inline req_image build_image(thunk_fn thunk, cell_base* cell, std::span<const std::byte> env,
                             std::span<const std::byte> arg, bool has_arg, bool indirect) {
    outbound_request r;
    r.code = reinterpret_cast<std::uint64_t>(thunk);
    r.property = reinterpret_cast<std::uint64_t>(cell);
    r.env = env;
    r.arg = arg;
    r.has_arg = has_arg;
    r.arg_indirect = indirect;
    const std::size_t size = encoded_request_size(env.size(), has_arg, arg.size(), indirect);
    req_image img(static_cast<std::uint32_t>(size));
    encode_request(r, {img.data(), size});
    return img;
}

template <class U>
struct apply_frame {
    std::conditional_t<std::is_void_v<U>, char, std::optional<U>> value{};
    std::string error;
    bool failed = false;
    wake_token waiter{};
};

template <class U>
completion make_apply_completion(apply_frame<U>* frame) {
    completion c;
    c.mode = mode_for<U>();
    c.target = frame;
    c.on_payload = [](completion& cc, std::span<const std::byte> payload) {
        auto* fr = static_cast<apply_frame<U>*>(cc.target);
        if constexpr (!std::is_void_v<U>) fr->value.emplace(decode_result<U>(payload));
        (void)payload;
        resume(fr->waiter);
    };
    c.on_error = [](completion& cc, std::span<const std::byte> msg) {
        auto* fr = static_cast<apply_frame<U>*>(cc.target);
        fr->failed = true;
        fr->error.assign(reinterpret_cast<const char*>(msg.data()), msg.size());
        resume(fr->waiter);
    };
    return c;
}

template <class U, class CB>
completion make_then_completion(CB&& cb) {
    using C = std::remove_cvref_t<CB>;
    completion c;
    c.mode = mode_for<U>();
    c.install_state(std::forward<CB>(cb));
    c.on_payload = [](completion& cc, std::span<const std::byte> payload) {
        C& f = cc.state<C>();
        if constexpr (std::is_void_v<U>) {
            (void)payload;
            std::move(f)();
        } else {
            std::move(f)(decode_result<U>(payload));
        }
    };
    // Body errors skip the callback; the runtime counts them.
    c.on_error = nullptr;
    return c;
}

template <class F, class T>
constexpr void check_body() {
    static_assert(std::is_trivially_copyable_v<F>,
                  "delegated bodies may capture trivially copyable values only");
    static_assert(env_size_of<F> <= max_env_bytes,
                  "captured environment exceeds the channel block capacity");
}

template <class U>
constexpr void check_result() {
    static_assert(std::is_void_v<U> || wire::is_encodable_v<U>,
                  "delegated results must be wire-encodable values");
}

} // namespace detail

template <class T>
class trust {
public:
    trust() = default;

    trust(const trust& o) { clone_from(o); }
    trust(trust&& o) noexcept : cell_(o.cell_), trustee_(o.trustee_), birth_(o.birth_) {
        o.cell_ = nullptr;
    }
    trust& operator=(const trust& o) {
        if (this != &o) {
            reset();
            clone_from(o);
        }
        return *this;
    }
    trust& operator=(trust&& o) noexcept {
        if (this != &o) {
            reset();
            cell_ = o.cell_;
            trustee_ = o.trustee_;
            birth_ = o.birth_;
            o.cell_ = nullptr;
        }
        return *this;
    }
    ~trust() { reset(); }

    explicit operator bool() const noexcept { return cell_ != nullptr; }
    unsigned trustee() const noexcept { return trustee_; }

    trust clone() const { return trust(*this); }

    /// Drops this handle. The property's destructor runs on the trustee once
    /// the last handle is gone.
    void reset() {
        if (cell_ == nullptr) return;
        detail::cell_base* cell = std::exchange(cell_, nullptr);
        if (detail::on_runtime_thread()) {
            if (detail::current_thread_index() == trustee_)
                detail::local_decref(cell);
            else
                detail::issue_death(cell, birth_);
        } else {
            detail::external_death(cell, birth_);
        }
    }

    /// Runs `body` with exclusive access to the property on its trustee and
    /// returns its result. Suspends the calling fiber; illegal in delegated
    /// context (use apply_then or launch there).
    template <class F>
    auto apply(F body) const -> std::invoke_result_t<F, T&> {
        using U = std::invoke_result_t<F, T&>;
        detail::check_body<F, T>();
        detail::check_result<U>();
        require();
        if (!can_block()) throw delegated_context_violation{};

        const std::uint32_t self = detail::current_thread_index();
        if (self == trustee_) {
            delegated_depth_guard g;
            detail::bump(detail::my_counters().local_applies);
            try {
                return body(detail::cell_value<T>(cell_));
            } catch (const std::exception& e) {
                throw delegated_error(e.what());
            } catch (...) {
                throw delegated_error("delegated body failed");
            }
        }

        detail::backpressure(trustee_);
        detail::apply_frame<U> frame;
        detail::completion c = detail::make_apply_completion<U>(&frame);
        frame.waiter = prepare_suspend();
        detail::issue(trustee_,
                      detail::build_image(&detail::body_thunk<T, F, U>, cell_,
                                          detail::env_bytes(body), {}, false, false),
                      std::move(c));
        suspend_current();
        if (frame.failed) throw delegated_error(frame.error);
        if constexpr (!std::is_void_v<U>) return std::move(*frame.value);
    }

    /// Non-blocking: `body` runs on the trustee later; `then` runs on this
    /// thread's service pass with the result. Legal in delegated context.
    template <class F, class Then>
    void apply_then(F body, Then then) const {
        using U = std::invoke_result_t<F, T&>;
        detail::check_body<F, T>();
        detail::check_result<U>();
        require();
        detail::backpressure(trustee_);
        detail::completion c = detail::make_then_completion<U>(std::move(then));
        detail::issue(trustee_,
                      detail::build_image(&detail::body_thunk<T, F, U>, cell_,
                                          detail::env_bytes(body), {}, false, false),
                      std::move(c));
    }

    /// Fire-and-forget apply_then.
    template <class F>
    void apply_detached(F body) const {
        apply_then(std::move(body), [] {});
    }

    /// Like apply, with an explicit serialized argument: `arg` crosses the
    /// channel by value and is materialized on the trustee. Use tuples for
    /// multiple arguments.
    template <class F, class V>
    auto apply_with(F body, V arg) const -> std::invoke_result_t<F, T&, V&&> {
        using U = std::invoke_result_t<F, T&, V&&>;
        detail::check_body<F, T>();
        detail::check_result<U>();
        static_assert(wire::is_encodable_v<V>, "argument must be a wire-encodable value");
        require();
        if (!can_block()) throw delegated_context_violation{};

        const std::uint32_t self = detail::current_thread_index();
        if (self == trustee_) {
            delegated_depth_guard g;
            detail::bump(detail::my_counters().local_applies);
            try {
                return body(detail::cell_value<T>(cell_), std::move(arg));
            } catch (const std::exception& e) {
                throw delegated_error(e.what());
            } catch (...) {
                throw delegated_error("delegated body failed");
            }
        }

        detail::backpressure(trustee_);
        detail::apply_frame<U> frame;
        detail::completion c = detail::make_apply_completion<U>(&frame);
        frame.waiter = prepare_suspend();
        detail::req_image img = encode_with_arg<F, U, V>(body, arg, c);
        detail::issue(trustee_, std::move(img), std::move(c));
        suspend_current();
        if (frame.failed) throw delegated_error(frame.error);
        if constexpr (!std::is_void_v<U>) return std::move(*frame.value);
    }

    /// Non-blocking apply_with.
    template <class F, class V, class Then>
    void apply_with_then(F body, V arg, Then then) const {
        using U = std::invoke_result_t<F, T&, V&&>;
        detail::check_body<F, T>();
        detail::check_result<U>();
        static_assert(wire::is_encodable_v<V>, "argument must be a wire-encodable value");
        require();
        detail::backpressure(trustee_);
        detail::completion c = detail::make_then_completion<U>(std::move(then));
        detail::req_image img = encode_with_arg<F, U, V>(body, arg, c);
        detail::issue(trustee_, std::move(img), std::move(c));
    }

private:
    template <class>
    friend class trust;
    friend class trustee_ref;
    template <class X, class F>
    friend auto launch(const trust<latched<X>>&, F body) -> std::invoke_result_t<F, X&>;
    template <class X, class F, class Then>
    friend void launch_then(const trust<latched<X>>&, F body, Then then);

    trust(detail::cell_base* cell, unsigned trustee, detail::birth_ref birth)
        : cell_(cell), trustee_(trustee), birth_(birth) {}

    void require() const {
        if (cell_ == nullptr) throw std::logic_error("empty trust handle");
    }

    void clone_from(const trust& o) {
        if (o.cell_ == nullptr) return;
        cell_ = o.cell_;
        trustee_ = o.trustee_;
        if (detail::current_thread_index() == trustee_) {
            detail::local_incref(cell_);
            birth_ = detail::birth_ref::inline_birth();
        } else {
            birth_ = detail::issue_birth(cell_);
        }
    }

    /// Serializes the argument; arguments too large for a block stay in a
    /// completion-owned buffer and cross as {length, pointer}.
    template <class F, class U, class V>
    detail::req_image encode_with_arg(const F& body, const V& arg, detail::completion& c) const {
        wire::buffer buf;
        wire::encode_into(arg, buf);
        const auto env = detail::env_bytes(body);
        const bool indirect =
            encoded_request_size(env.size(), true, buf.size(), false) > max_request_bytes;
        std::span<const std::byte> arg_span{buf.data(), buf.size()};
        if (indirect) {
            c.owned_arg = new std::byte[buf.size()];
            std::memcpy(c.owned_arg, buf.data(), buf.size());
            arg_span = {c.owned_arg, buf.size()};
        }
        return detail::build_image(&detail::body_with_thunk<T, F, U, V>, cell_, env, arg_span,
                                   true, indirect);
    }

    detail::cell_base* cell_ = nullptr;
    std::uint32_t trustee_ = 0;
    detail::birth_ref birth_{};
};

template <class T>
auto trustee_ref::entrust(T value) const {
    static_assert(!std::is_reference_v<T>);
    auto* cell = new detail::property_cell<T>(std::move(value));
    cell->trustee = index_;
    detail::birth_ref birth;
    if (detail::current_thread_index() == index_) {
        detail::register_cell_local(cell);
        birth = detail::birth_ref::inline_birth();
    } else {
        birth = detail::issue_adopt(cell);
    }
    return trust<T>(cell, index_, birth);
}

template <class T>
trust<T> clone_trust(const trust<T>& t) {
    return t.clone();
}

template <class T>
void drop_trust(trust<T>& t) {
    t.reset();
}

// ---------------------------------------------------------------------------
// launch: apply in a trustee-side fiber, blocking calls allowed in the body.
// Implemented for latched properties only; the latch restores atomicity
// across the body's suspensions.
// ---------------------------------------------------------------------------

namespace detail {

struct launch_done_env {
    void (*deliver)(void*, std::span<const std::byte>);
    void* target;
};

/// Runs on the origin thread; hands the statusful payload to the typed
/// deliver function (decode + resume, or decode + callback).
inline void launch_done_thunk(std::uint64_t, std::span<const std::byte> env,
                              std::span<const std::byte> arg, response_writer& w) {
    launch_done_env e;
    std::memcpy(&e, env.data(), sizeof e);
    e.deliver(e.target, arg);
    w.write_void();
}

/// Statusful payload: [u8 ok][encoded U] or [u8 fail][message bytes].
template <class T, class F, class U>
wire::buffer run_launch_body(latched<T>& latch, F& body) {
    wire::buffer payload;
    latch.lock();
    struct release {
        latched<T>* l;
        ~release() { l->unlock(); }
    } guard{&latch};
    try {
        payload.push_back(std::byte{0});
        if constexpr (std::is_void_v<U>) {
            body(latch.value());
        } else {
            wire::encode_into(body(latch.value()), payload);
        }
    } catch (const std::exception& e) {
        payload.assign(1, std::byte{1});
        const auto* p = reinterpret_cast<const std::byte*>(e.what());
        payload.insert(payload.end(), p, p + std::char_traits<char>::length(e.what()));
    } catch (...) {
        static constexpr char msg[] = "launch body failed";
        payload.assign(1, std::byte{1});
        const auto* p = reinterpret_cast<const std::byte*>(msg);
        payload.insert(payload.end(), p, p + sizeof(msg) - 1);
    }
    return payload;
}

template <class U>
void deliver_launch_frame(void* target, std::span<const std::byte> payload) {
    auto* frame = static_cast<apply_frame<U>*>(target);
    if (payload.empty() || std::to_integer<unsigned>(payload[0]) != 0) {
        frame->failed = true;
        frame->error.assign(reinterpret_cast<const char*>(payload.data() + 1),
                            payload.empty() ? 0 : payload.size() - 1);
    } else if constexpr (!std::is_void_v<U>) {
        frame->value.emplace(wire::decode<U>(payload.subspan(1)));
    }
    resume(frame->waiter);
}

template <class U, class CB>
void deliver_launch_then(void* target, std::span<const std::byte> payload) {
    auto* box = static_cast<CB*>(target);
    struct drop {
        CB* b;
        ~drop() { delete b; }
    } guard{box};
    if (payload.empty() || std::to_integer<unsigned>(payload[0]) != 0) {
        bump(my_counters().errors_delivered);
        return;
    }
    if constexpr (std::is_void_v<U>)
        std::move (*box)();
    else
        std::move(*box)(wire::decode<U>(payload.subspan(1)));
}

/// Sends the statusful payload home (or delivers locally). Runs on the
/// trustee's thread at the end of the launch fiber.
void launch_complete(std::uint32_t origin, void (*deliver)(void*, std::span<const std::byte>),
                     void* target, wire::buffer payload);

/// Spawns the trustee-side fiber that runs the body under the latch.
void spawn_launch_fiber(std::function<void()> body);

template <class T, class F>
struct launch_env {
    F body;
    std::uint32_t origin;
    void (*deliver)(void*, std::span<const std::byte>);
    void* target;
};

template <class T, class F, class U>
void launch_thunk(std::uint64_t prop, std::span<const std::byte> env, std::span<const std::byte>,
                  response_writer& w) {
    auto* cell = reinterpret_cast<cell_base*>(prop);
    alignas(launch_env<T, F>) std::byte buf[sizeof(launch_env<T, F>)];
    std::memcpy(buf, env.data(), sizeof buf);
    auto* e = std::launder(reinterpret_cast<launch_env<T, F>*>(buf));
    spawn_launch_fiber([cell, body = e->body, origin = e->origin, deliver = e->deliver,
                        target = e->target]() mutable {
        auto& latch = cell_value<latched<T>>(cell);
        wire::buffer payload = run_launch_body<T, F, U>(latch, body);
        launch_complete(origin, deliver, target, std::move(payload));
    });
    w.write_void();
}

} // namespace detail

/// Runs `body` in a dedicated trustee-side fiber holding the property's
/// latch. The body may block, including nested blocking apply to other
/// trustees; the trustee keeps serving while it is suspended. The result
/// comes back via a second delegation message.
template <class T, class F>
auto launch(const trust<latched<T>>& t, F body) -> std::invoke_result_t<F, T&> {
    using U = std::invoke_result_t<F, T&>;
    detail::check_body<F, T>();
    detail::check_result<U>();
    t.require();
    if (!can_block()) throw delegated_context_violation{};

    detail::apply_frame<U> frame;
    frame.waiter = prepare_suspend();
    const std::uint32_t self = detail::current_thread_index();
    if (self == t.trustee_) {
        detail::cell_base* cell = t.cell_;
        detail::spawn_launch_fiber([cell, body = std::move(body), fp = &frame]() mutable {
            auto& latch = detail::cell_value<latched<T>>(cell);
            wire::buffer payload = detail::run_launch_body<T, F, U>(latch, body);
            detail::deliver_launch_frame<U>(fp, payload);
        });
    } else {
        detail::backpressure(t.trustee_);
        detail::launch_env<T, F> env{std::move(body), self, &detail::deliver_launch_frame<U>,
                                     &frame};
        detail::completion ack; // the launch request itself answers with a zero-size ack
        ack.mode = resp_mode::none();
        detail::issue(t.trustee_,
                      detail::build_image(&detail::launch_thunk<T, F, U>, t.cell_,
                                          {reinterpret_cast<const std::byte*>(&env), sizeof env},
                                          {}, false, false),
                      std::move(ack));
    }
    suspend_current();
    if (frame.failed) throw delegated_error(frame.error);
    if constexpr (!std::is_void_v<U>) return std::move(*frame.value);
}

/// Non-blocking launch; `then` runs on this thread once the body completes.
template <class T, class F, class Then>
void launch_then(const trust<latched<T>>& t, F body, Then then) {
    using U = std::invoke_result_t<F, T&>;
    detail::check_body<F, T>();
    detail::check_result<U>();
    t.require();

    using CB = std::remove_cvref_t<Then>;
    auto* box = new CB(std::move(then));
    const std::uint32_t self = detail::current_thread_index();
    if (self == t.trustee_) {
        detail::cell_base* cell = t.cell_;
        detail::spawn_launch_fiber([cell, body = std::move(body), box]() mutable {
            auto& latch = detail::cell_value<latched<T>>(cell);
            wire::buffer payload = detail::run_launch_body<T, F, U>(latch, body);
            detail::deliver_launch_then<U, CB>(box, payload);
        });
        return;
    }
    detail::backpressure(t.trustee_);
    detail::launch_env<T, F> env{std::move(body), self, &detail::deliver_launch_then<U, CB>, box};
    detail::completion ack;
    ack.mode = resp_mode::none();
    detail::issue(t.trustee_,
                  detail::build_image(&detail::launch_thunk<T, F, U>, t.cell_,
                                      {reinterpret_cast<const std::byte*>(&env), sizeof env}, {},
                                      false, false),
                  std::move(ack));
}

} // namespace entrust
