#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <new>
#include <span>
#include <type_traits>
#include <utility>

#include "entrust/channel.hpp"
#include "entrust/fiber.hpp"

namespace entrust::detail {

/// Client-side record for one in-flight request: how to decode the response
/// and what to do with it. Lives in per-pair queues on the issuing thread and
/// is consumed there, so no synchronization applies.
///
/// Callback state is stored inline when the callable is trivially copyable
/// and small, otherwise on the heap; a moved-from record is inert.
struct completion {
    static constexpr std::size_t inline_bytes = 64;

    resp_mode mode{};
    void (*on_payload)(completion&, std::span<const std::byte>) = nullptr;
    void (*on_error)(completion&, std::span<const std::byte>) = nullptr;
    void (*drop_state)(completion&) noexcept = nullptr; // heap state destructor
    void* target = nullptr;                             // apply: caller's result frame
    std::byte* owned_arg = nullptr;                     // indirect argument buffer
    void* heap_state = nullptr;
    alignas(std::max_align_t) std::byte inline_state[inline_bytes];

    completion() = default;
    completion(completion&& o) noexcept { steal(o); }
    completion& operator=(completion&& o) noexcept {
        if (this != &o) {
            reset();
            steal(o);
        }
        return *this;
    }
    completion(const completion&) = delete;
    completion& operator=(const completion&) = delete;
    ~completion() { reset(); }

    /// Runs after the response (or error) was delivered; frees owned storage.
    void reset() noexcept {
        if (drop_state != nullptr) {
            drop_state(*this);
            drop_state = nullptr;
        }
        delete[] owned_arg;
        owned_arg = nullptr;
        heap_state = nullptr;
        on_payload = nullptr;
        on_error = nullptr;
    }

    template <class CB>
    void install_state(CB&& cb) {
        using C = std::remove_cvref_t<CB>;
        if constexpr (std::is_trivially_copyable_v<C> && sizeof(C) <= inline_bytes) {
            ::new (static_cast<void*>(inline_state)) C(std::forward<CB>(cb));
        } else {
            heap_state = new C(std::forward<CB>(cb));
            drop_state = [](completion& c) noexcept { delete static_cast<C*>(c.heap_state); };
        }
    }

    template <class C>
    C& state() noexcept {
        return heap_state != nullptr ? *static_cast<C*>(heap_state)
                                     : *std::launder(reinterpret_cast<C*>(inline_state));
    }

private:
    void steal(completion& o) noexcept {
        mode = o.mode;
        on_payload = o.on_payload;
        on_error = o.on_error;
        drop_state = o.drop_state;
        target = o.target;
        owned_arg = o.owned_arg;
        heap_state = o.heap_state;
        std::memcpy(inline_state, o.inline_state, inline_bytes);
        o.drop_state = nullptr;
        o.owned_arg = nullptr;
        o.heap_state = nullptr;
        o.on_payload = nullptr;
        o.on_error = nullptr;
    }
};

/// Pre-encoded request image waiting in a pending queue. Small images live
/// inline; oversized ones (large serialized arguments) go to the heap.
struct req_image {
    static constexpr std::size_t inline_bytes = 120;

    std::uint32_t size = 0;
    std::byte* big = nullptr;
    std::byte small[inline_bytes];

    req_image() = default;
    explicit req_image(std::uint32_t n) : size(n) {
        if (n > inline_bytes) big = new std::byte[n];
    }
    req_image(req_image&& o) noexcept
        : size(o.size), big(o.big) {
        std::memcpy(small, o.small, inline_bytes);
        o.big = nullptr;
        o.size = 0;
    }
    req_image& operator=(req_image&& o) noexcept {
        if (this != &o) {
            delete[] big;
            size = o.size;
            big = o.big;
            std::memcpy(small, o.small, inline_bytes);
            o.big = nullptr;
            o.size = 0;
        }
        return *this;
    }
    req_image(const req_image&) = delete;
    req_image& operator=(const req_image&) = delete;
    ~req_image() { delete[] big; }

    std::byte* data() noexcept { return big != nullptr ? big : small; }
    std::span<const std::byte> view() const noexcept {
        return {big != nullptr ? big : small, size};
    }
};

struct pending_task {
    req_image image;
    completion done;
};

} // namespace entrust::detail
