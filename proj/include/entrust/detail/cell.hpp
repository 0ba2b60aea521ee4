#pragma once

#include <cstdint>
#include <utility>

namespace entrust::detail {

/// Coordinates of the delegation request that announced a handle's existence
/// to the trustee. Deaths are deferred until their birth has been served,
/// which keeps the reference count from ever reaching zero early.
struct birth_ref {
    static constexpr std::uint32_t inline_thread = 0xFFFFFFFFu;

    std::uint32_t thread = inline_thread; // issuing thread, or inline_thread
    std::uint64_t seq = 0;                // request index on the (thread, trustee) pair

    static birth_ref inline_birth() { return {}; }
};

/// Header of every entrusted property. The reference count and registry slot
/// are touched only by the trustee's thread.
struct cell_base {
    std::int64_t refcount = 1;
    std::uint32_t trustee = 0;
    bool adopted = false;
    std::size_t registry_idx = 0;
    void (*destroy)(cell_base*) noexcept = nullptr;
};

template <class T>
struct property_cell : cell_base {
    T value;

    explicit property_cell(T v) : value(std::move(v)) {
        destroy = [](cell_base* c) noexcept { delete static_cast<property_cell*>(c); };
    }
};

} // namespace entrust::detail
