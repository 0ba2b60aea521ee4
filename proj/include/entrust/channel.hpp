#pragma once

// Per-pair request/response slots with the ready-bit batch protocol.
//
// A channel pair connects one client thread to one trustee thread. The client
// is the only writer of the request slot, the trustee the only writer of the
// response slot. A batch is published by flipping the request ready byte; the
// trustee answers by writing one response per request and flipping the
// response ready byte to match. Flag inequality means "batch in flight". The
// protocol uses no atomic read-modify-write instructions: flag writes are
// release stores, flag reads acquire loads.
//
// Byte-exact layout (header offsets, block offsets, encodings) is documented
// in docs/channel_layout.md and pinned by static_asserts below.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "entrust/detail/cpu.hpp"

namespace entrust {

inline constexpr std::size_t primary_block_bytes = 128;
inline constexpr std::size_t overflow_block_bytes = 1024;
inline constexpr std::size_t slot_payload_bytes = primary_block_bytes + overflow_block_bytes;
inline constexpr std::size_t slot_header_bytes = 64;
inline constexpr std::size_t min_request_bytes = 24;
inline constexpr std::size_t max_request_bytes = overflow_block_bytes;
inline constexpr std::size_t max_batch_requests = 255;

/// Raised when a slot holds bytes that cannot be a valid encoding. This is an
/// implementation bug, never a user error; the pair refuses further traffic.
struct channel_poisoned : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// -------------------------------------------------------------------------
// Request encoding
// -------------------------------------------------------------------------

namespace req_meta {
inline constexpr std::uint64_t env_size_mask = 0xFFFFFF; // bits 0..23
inline constexpr std::uint64_t has_arg_bit = std::uint64_t{1} << 24;
inline constexpr std::uint64_t arg_indirect_bit = std::uint64_t{1} << 25;
} // namespace req_meta

/// One request about to be encoded. `code` and `property` are opaque words to
/// the channel; the runtime stores a thunk pointer and a property address.
struct outbound_request {
    std::uint64_t code = 0;
    std::uint64_t property = 0;
    std::span<const std::byte> env{};
    std::span<const std::byte> arg{};
    bool has_arg = false;
    /// Argument bytes stay in caller-owned memory; the slot carries {len, ptr}.
    bool arg_indirect = false;
};

/// A request decoded from a slot. `env` points into the slot; `arg` points
/// into the slot or, for indirect arguments, into the sender's buffer.
struct inbound_request {
    std::uint64_t code = 0;
    std::uint64_t property = 0;
    std::span<const std::byte> env{};
    std::span<const std::byte> arg{};
    bool has_arg = false;
};

/// Exact wire size of a request: 24-byte fixed part, environment bytes, then
/// the padded argument segment (4-byte length prefix, argument bytes, padded
/// to 8; indirect arguments encode as a fixed 16-byte segment).
constexpr std::size_t encoded_request_size(std::size_t env_size, bool has_arg,
                                           std::size_t arg_len, bool arg_indirect) noexcept {
    std::size_t sz = min_request_bytes + env_size;
    if (has_arg) sz += arg_indirect ? 16 : ((4 + arg_len + 7) / 8) * 8;
    return sz;
}

/// Writes the encoding of `r` into `out`. Returns the byte count, or nullopt
/// (WontFit) when the encoding exceeds out.size().
std::optional<std::size_t> encode_request(const outbound_request& r, std::span<std::byte> out);

// -------------------------------------------------------------------------
// Slots
// -------------------------------------------------------------------------

namespace rsp_flags {
inline constexpr std::uint8_t spill = 1;    // responses from first_spill on live in the spill buffer
inline constexpr std::uint8_t statusful = 2; // whole batch re-encoded with per-response status bytes
} // namespace rsp_flags

struct alignas(detail::cache_line) request_slot {
    std::atomic<std::uint8_t> ready{0}; // offset 0
    std::uint8_t count{0};              // offset 1
    std::uint8_t reserved_[14]{};
    std::uint8_t block_bitmap[32]{};    // offset 16; bit i set => request i in overflow
    std::uint8_t reserved2_[16]{};
    std::byte primary[primary_block_bytes];
    std::byte overflow[overflow_block_bytes];
};

struct alignas(detail::cache_line) response_slot {
    std::atomic<std::uint8_t> ready{0}; // offset 0
    std::uint8_t flags{0};              // offset 1
    std::uint8_t first_spill{0};        // offset 2; valid when flags & spill
    std::uint8_t reserved_{0};
    std::uint32_t spill_len{0};         // offset 4
    std::uint64_t spill_ptr{0};         // offset 8
    std::uint8_t block_bitmap[32]{};    // offset 16; bit i set => response i in overflow
    std::uint8_t reserved2_[16]{};
    std::byte primary[primary_block_bytes];
    std::byte overflow[overflow_block_bytes];
};

static_assert(sizeof(request_slot) == slot_header_bytes + slot_payload_bytes);
static_assert(sizeof(response_slot) == slot_header_bytes + slot_payload_bytes);

struct alignas(detail::cache_line) channel_pair {
    request_slot request;
    response_slot response;

    // Trustee-owned per-pair scratch. The spill buffer backs oversized or
    // statusful response batches; it is reused once the client's next batch
    // submission proves the previous responses were consumed.
    struct alignas(detail::cache_line) trustee_state {
        std::vector<std::byte> spill;
        bool poisoned = false;
    } trustee;

    struct alignas(detail::cache_line) client_state {
        bool poisoned = false;
    } client;
};

// -------------------------------------------------------------------------
// Batch operations
// -------------------------------------------------------------------------

namespace detail {
/// Minimal non-owning callable reference, so the batch operations stay
/// non-template (and auditable as a single translation unit).
template <class Sig>
class function_ref;

template <class R, class... Args>
class function_ref<R(Args...)> {
public:
    template <class F>
    function_ref(F&& f) noexcept // NOLINT: intentional implicit
        : obj_(const_cast<void*>(static_cast<const void*>(&f))),
          call_([](void* o, Args... args) -> R {
              return (*static_cast<std::remove_reference_t<F>*>(o))(std::forward<Args>(args)...);
          }) {}

    R operator()(Args... args) const { return call_(obj_, std::forward<Args>(args)...); }

private:
    void* obj_;
    R (*call_)(void*, Args...);
};
} // namespace detail

/// How the client will decode one response. Must match what the executor
/// wrote: zero-sized, raw bytes of a statically known size, or a 4-byte
/// length-prefixed variable encoding.
struct resp_mode {
    enum kind : std::uint8_t { zero, fixed, var };
    kind k = zero;
    std::uint32_t fixed_size = 0;

    static constexpr resp_mode none() { return {zero, 0}; }
    static constexpr resp_mode sized(std::uint32_t n) { return {fixed, n}; }
    static constexpr resp_mode variable() { return {var, 0}; }
};

/// Incremental response encoder handed to the trustee's executor. Exactly one
/// write_* call must be made per served request, in request order.
class response_writer {
public:
    void write_void() { append(resp_mode::none(), {}, false, {}); }
    void write_fixed(std::span<const std::byte> bytes) {
        append(resp_mode::sized(static_cast<std::uint32_t>(bytes.size())), bytes, false, {});
    }
    void write_var(std::span<const std::byte> bytes) { append(resp_mode::variable(), bytes, false, {}); }
    /// Marks this response as an application error; the whole batch switches
    /// to the statusful spill form.
    void write_error(std::string_view msg);

    /// Responses written so far in this batch.
    std::uint32_t count() const noexcept { return count_; }

private:
    friend std::size_t poll_serve(channel_pair&, detail::function_ref<void(const inbound_request&, response_writer&)>);

    explicit response_writer(channel_pair& pair) : pair_(pair) {}
    void append(resp_mode mode, std::span<const std::byte> bytes, bool is_error,
                std::string_view err);
    void switch_to_statusful();
    void finalize(std::uint8_t observed_request_flag);

    struct entry {
        resp_mode mode;
        std::uint32_t offset; // within its region
        std::uint32_t size;   // encoded size within the region
        std::uint8_t region;  // 0 primary, 1 overflow, 2 spill
    };

    channel_pair& pair_;
    std::uint32_t primary_used_ = 0;
    std::uint32_t overflow_used_ = 0;
    std::uint32_t count_ = 0;
    bool spilling_ = false;
    bool statusful_ = false;
    std::uint8_t first_spill_ = 0;
    entry entries_[max_batch_requests];
};

/// Client side: submits a maximal prefix of `encoded` (pre-encoded request
/// images) as one batch. Returns the number submitted, or nullopt when the
/// previous batch is still unserved. Submitting an empty list is a no-op 0.
std::optional<std::size_t> try_submit_batch(channel_pair& pair,
                                            std::span<const std::span<const std::byte>> encoded);

/// Trustee side: serves the pending batch if one is ready. Decodes each
/// request in order, invokes the executor, then publishes all responses and
/// flips the response flag. Returns the number served (0 when idle).
std::size_t poll_serve(channel_pair& pair,
                       detail::function_ref<void(const inbound_request&, response_writer&)> executor);

/// One decoded response. `payload` points into the response slot or spill
/// buffer and is valid until the next submission on this pair.
struct response_view {
    std::uint32_t index = 0;
    bool is_error = false;
    std::span<const std::byte> payload{}; // error text when is_error
};

/// Client side: decodes the batch's responses when they are ready. `count`
/// must be the submitted batch size and `mode_of` the per-request decode
/// modes. Returns count, or 0 when the batch is still in flight.
std::size_t poll_responses(channel_pair& pair, std::uint32_t count,
                           detail::function_ref<resp_mode(std::uint32_t)> mode_of,
                           detail::function_ref<void(const response_view&)> consumer);

/// True when the pair has no batch in flight (flags equal).
inline bool pair_idle(const channel_pair& pair) noexcept {
    return pair.request.ready.load(std::memory_order_acquire) ==
           pair.response.ready.load(std::memory_order_acquire);
}

} // namespace entrust
