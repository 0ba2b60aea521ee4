#include "entrust/channel.hpp"

#include <cstring>
#include <string>
#include <string_view>

namespace entrust {

namespace {

void store_u32le(std::byte* dst, std::uint32_t v) { std::memcpy(dst, &v, 4); }
void store_u64le(std::byte* dst, std::uint64_t v) { std::memcpy(dst, &v, 8); }

std::uint32_t load_u32le(const std::byte* src) {
    std::uint32_t v;
    std::memcpy(&v, src, 4);
    return v;
}

std::uint64_t load_u64le(const std::byte* src) {
    std::uint64_t v;
    std::memcpy(&v, src, 8);
    return v;
}

bool bitmap_get(const std::uint8_t* bm, std::uint32_t i) { return (bm[i >> 3] >> (i & 7)) & 1; }
void bitmap_set(std::uint8_t* bm, std::uint32_t i) { bm[i >> 3] |= std::uint8_t(1u << (i & 7)); }

[[noreturn]] void poison_trustee(channel_pair& pair, const char* what) {
    pair.trustee.poisoned = true;
    throw channel_poisoned(std::string("channel poisoned while serving: ") + what);
}

[[noreturn]] void poison_client(channel_pair& pair, const char* what) {
    pair.client.poisoned = true;
    throw channel_poisoned(std::string("channel poisoned while decoding responses: ") + what);
}

} // namespace

std::optional<std::size_t> encode_request(const outbound_request& r, std::span<std::byte> out) {
    const std::size_t size =
        encoded_request_size(r.env.size(), r.has_arg, r.arg.size(), r.arg_indirect);
    if (size > out.size()) return std::nullopt;

    std::uint64_t meta = static_cast<std::uint64_t>(r.env.size()) & req_meta::env_size_mask;
    if (r.has_arg) meta |= req_meta::has_arg_bit;
    if (r.arg_indirect) meta |= req_meta::arg_indirect_bit;

    std::byte* p = out.data();
    store_u64le(p, r.code);
    store_u64le(p + 8, meta);
    store_u64le(p + 16, r.property);
    if (!r.env.empty()) std::memcpy(p + 24, r.env.data(), r.env.size());
    std::byte* q = p + 24 + r.env.size();
    if (r.has_arg) {
        store_u32le(q, static_cast<std::uint32_t>(r.arg.size()));
        if (r.arg_indirect) {
            store_u32le(q + 4, 0);
            store_u64le(q + 8, reinterpret_cast<std::uint64_t>(r.arg.data()));
        } else {
            if (!r.arg.empty()) std::memcpy(q + 4, r.arg.data(), r.arg.size());
            const std::size_t seg = ((4 + r.arg.size() + 7) / 8) * 8;
            for (std::size_t i = 4 + r.arg.size(); i < seg; ++i) q[i] = std::byte{0};
        }
    }
    return size;
}

std::optional<std::size_t> try_submit_batch(channel_pair& pair,
                                            std::span<const std::span<const std::byte>> encoded) {
    request_slot& req = pair.request;
    // The client owns request.ready; only the response flag needs acquire.
    const std::uint8_t rflag = req.ready.load(std::memory_order_relaxed);
    const std::uint8_t sflag = pair.response.ready.load(std::memory_order_acquire);
    if (rflag != sflag) return std::nullopt; // previous batch unserved

    if (encoded.empty()) return std::size_t{0};

    std::uint8_t bitmap[32] = {};
    std::uint32_t primary_used = 0;
    std::uint32_t overflow_used = 0;
    std::uint32_t count = 0;
    for (const auto& bytes : encoded) {
        if (count == max_batch_requests) break;
        const std::size_t sz = bytes.size();
        if (sz <= primary_block_bytes - primary_used) {
            std::memcpy(req.primary + primary_used, bytes.data(), sz);
            primary_used += static_cast<std::uint32_t>(sz);
        } else if (sz <= overflow_block_bytes - overflow_used) {
            std::memcpy(req.overflow + overflow_used, bytes.data(), sz);
            bitmap_set(bitmap, count);
            overflow_used += static_cast<std::uint32_t>(sz);
        } else {
            break; // maximal prefix: stop at the first request that does not fit
        }
        ++count;
    }
    if (count == 0) return std::size_t{0};

    req.count = static_cast<std::uint8_t>(count);
    std::memcpy(req.block_bitmap, bitmap, sizeof bitmap);
    // Publish: payload and header bytes become visible before the flag flip.
    req.ready.store(rflag ^ 1u, std::memory_order_release);
    return count;
}

// ---------------------------------------------------------------------------
// response_writer
// ---------------------------------------------------------------------------

void response_writer::append(resp_mode mode, std::span<const std::byte> bytes, bool is_error,
                             std::string_view err) {
    if (count_ >= max_batch_requests) poison_trustee(pair_, "too many responses for one batch");
    entry& e = entries_[count_];
    e.mode = mode;

    if (is_error && !statusful_) switch_to_statusful();

    auto& spill = pair_.trustee.spill;
    if (statusful_) {
        // [status u8][payload per mode | u32 len + message]
        e.region = 2;
        e.offset = static_cast<std::uint32_t>(spill.size());
        spill.push_back(std::byte{is_error ? 1u : 0u});
        if (is_error) {
            std::uint32_t n = static_cast<std::uint32_t>(err.size());
            spill.resize(spill.size() + 4);
            store_u32le(spill.data() + spill.size() - 4, n);
            const auto* p = reinterpret_cast<const std::byte*>(err.data());
            spill.insert(spill.end(), p, p + n);
        } else {
            if (mode.k == resp_mode::var) {
                spill.resize(spill.size() + 4);
                store_u32le(spill.data() + spill.size() - 4,
                            static_cast<std::uint32_t>(bytes.size()));
            }
            spill.insert(spill.end(), bytes.begin(), bytes.end());
        }
        e.size = static_cast<std::uint32_t>(spill.size()) - e.offset;
        ++count_;
        return;
    }

    const std::size_t prefix = mode.k == resp_mode::var ? 4 : 0;
    const std::size_t sz = prefix + bytes.size();
    std::byte* dst = nullptr;
    if (!spilling_ && sz <= primary_block_bytes - primary_used_) {
        e.region = 0;
        e.offset = primary_used_;
        dst = pair_.response.primary + primary_used_;
        primary_used_ += static_cast<std::uint32_t>(sz);
    } else if (!spilling_ && sz <= overflow_block_bytes - overflow_used_) {
        e.region = 1;
        e.offset = overflow_used_;
        dst = pair_.response.overflow + overflow_used_;
        overflow_used_ += static_cast<std::uint32_t>(sz);
    } else {
        // From here on the whole remainder of the batch goes to the spill
        // buffer; the client decodes it sequentially from first_spill.
        if (!spilling_) {
            spilling_ = true;
            first_spill_ = static_cast<std::uint8_t>(count_);
        }
        e.region = 2;
        e.offset = static_cast<std::uint32_t>(spill.size());
        spill.resize(spill.size() + sz);
        dst = spill.data() + e.offset;
    }
    if (mode.k == resp_mode::var) {
        store_u32le(dst, static_cast<std::uint32_t>(bytes.size()));
        dst += 4;
    }
    if (!bytes.empty()) std::memcpy(dst, bytes.data(), bytes.size());
    e.size = static_cast<std::uint32_t>(sz);
    ++count_;
}

void response_writer::write_error(std::string_view msg) {
    append(resp_mode::none(), {}, true, msg);
}

void response_writer::switch_to_statusful() {
    // Rare path: a body raised. Re-encode everything written so far into the
    // spill buffer with a status byte per response, preserving order.
    auto& spill = pair_.trustee.spill;
    std::vector<std::byte> rebuilt;
    rebuilt.reserve(spill.size() + 64);
    for (std::uint32_t i = 0; i < count_; ++i) {
        entry& e = entries_[i];
        const std::byte* src = e.region == 0   ? pair_.response.primary + e.offset
                               : e.region == 1 ? pair_.response.overflow + e.offset
                                               : spill.data() + e.offset;
        const std::uint32_t off = static_cast<std::uint32_t>(rebuilt.size());
        rebuilt.push_back(std::byte{0}); // status ok
        rebuilt.insert(rebuilt.end(), src, src + e.size);
        e.region = 2;
        e.offset = off;
        e.size = 1 + e.size;
    }
    spill = std::move(rebuilt);
    statusful_ = true;
    spilling_ = true;
    first_spill_ = 0;
}

void response_writer::finalize(std::uint8_t observed_request_flag) {
    response_slot& rsp = pair_.response;
    std::uint8_t bitmap[32] = {};
    for (std::uint32_t i = 0; i < count_; ++i)
        if (entries_[i].region == 1) bitmap_set(bitmap, i);
    std::memcpy(rsp.block_bitmap, bitmap, sizeof bitmap);

    std::uint8_t flags = 0;
    if (spilling_) {
        flags |= rsp_flags::spill;
        if (statusful_) flags |= rsp_flags::statusful;
        rsp.first_spill = first_spill_;
        rsp.spill_ptr = reinterpret_cast<std::uint64_t>(pair_.trustee.spill.data());
        rsp.spill_len = static_cast<std::uint32_t>(pair_.trustee.spill.size());
    } else {
        rsp.first_spill = 0;
        rsp.spill_ptr = 0;
        rsp.spill_len = 0;
    }
    rsp.flags = flags;
    // Publish all response bytes before releasing the batch to the client.
    rsp.ready.store(observed_request_flag, std::memory_order_release);
}

// ---------------------------------------------------------------------------
// poll_serve
// ---------------------------------------------------------------------------

namespace {

struct block_cursor {
    const std::byte* base;
    std::uint32_t used = 0;
    std::uint32_t cap;
};

} // namespace

std::size_t poll_serve(channel_pair& pair,
                       detail::function_ref<void(const inbound_request&, response_writer&)> executor) {
    if (pair.trustee.poisoned) throw channel_poisoned("pair is poisoned");
    request_slot& req = pair.request;
    const std::uint8_t rflag = req.ready.load(std::memory_order_acquire);
    const std::uint8_t sflag = pair.response.ready.load(std::memory_order_relaxed);
    if (rflag == sflag) return 0;

    // The client has submitted a new batch, which means it finished decoding
    // the previous responses: the spill buffer may be reused now.
    pair.trustee.spill.clear();

    const std::uint32_t count = req.count;
    if (count == 0) poison_trustee(pair, "ready flags differ with request_count == 0");

    block_cursor cur[2] = {{req.primary, 0, primary_block_bytes},
                           {req.overflow, 0, overflow_block_bytes}};

    response_writer writer(pair);
    for (std::uint32_t i = 0; i < count; ++i) {
        block_cursor& c = cur[bitmap_get(req.block_bitmap, i) ? 1 : 0];
        if (c.cap - c.used < min_request_bytes) poison_trustee(pair, "request header out of bounds");
        const std::byte* p = c.base + c.used;

        inbound_request in;
        in.code = load_u64le(p);
        const std::uint64_t meta = load_u64le(p + 8);
        in.property = load_u64le(p + 16);
        const std::uint32_t env_size = static_cast<std::uint32_t>(meta & req_meta::env_size_mask);
        in.has_arg = (meta & req_meta::has_arg_bit) != 0;
        const bool indirect = (meta & req_meta::arg_indirect_bit) != 0;

        std::size_t sz = min_request_bytes + env_size;
        if (sz > c.cap - c.used) poison_trustee(pair, "environment exceeds block");
        in.env = {p + 24, env_size};
        if (in.has_arg) {
            const std::byte* q = p + sz;
            if (indirect) {
                if (sz + 16 > c.cap - c.used) poison_trustee(pair, "indirect argument out of bounds");
                const std::uint32_t len = load_u32le(q);
                const auto* ptr = reinterpret_cast<const std::byte*>(load_u64le(q + 8));
                in.arg = {ptr, len};
                sz += 16;
            } else {
                if (sz + 4 > c.cap - c.used) poison_trustee(pair, "argument prefix out of bounds");
                const std::uint32_t len = load_u32le(q);
                const std::size_t seg = ((4 + std::size_t{len} + 7) / 8) * 8;
                if (sz + seg > c.cap - c.used) poison_trustee(pair, "argument exceeds block");
                in.arg = {q + 4, len};
                sz += seg;
            }
        }
        c.used += static_cast<std::uint32_t>(sz);

        executor(in, writer);
    }
    if (writer.count_ != count) poison_trustee(pair, "executor response count mismatch");
    writer.finalize(rflag);
    return count;
}

// ---------------------------------------------------------------------------
// poll_responses
// ---------------------------------------------------------------------------

std::size_t poll_responses(channel_pair& pair, std::uint32_t count,
                           detail::function_ref<resp_mode(std::uint32_t)> mode_of,
                           detail::function_ref<void(const response_view&)> consumer) {
    if (pair.client.poisoned) throw channel_poisoned("pair is poisoned");
    const response_slot& rsp = pair.response;
    const std::uint8_t rflag = pair.request.ready.load(std::memory_order_relaxed);
    const std::uint8_t sflag = rsp.ready.load(std::memory_order_acquire);
    if (rflag != sflag) return 0; // NotReady

    const std::uint8_t flags = rsp.flags;
    const bool statusful = (flags & rsp_flags::statusful) != 0;
    const bool has_spill = (flags & rsp_flags::spill) != 0;
    const std::byte* spill = reinterpret_cast<const std::byte*>(rsp.spill_ptr);
    const std::uint32_t spill_len = rsp.spill_len;

    block_cursor cur[3] = {{rsp.primary, 0, primary_block_bytes},
                           {rsp.overflow, 0, overflow_block_bytes},
                           {spill, 0, spill_len}};

    for (std::uint32_t i = 0; i < count; ++i) {
        int region;
        if (statusful) {
            region = 2;
        } else if (has_spill && i >= rsp.first_spill) {
            region = 2;
        } else {
            region = bitmap_get(rsp.block_bitmap, i) ? 1 : 0;
        }
        block_cursor& c = cur[region];

        response_view view;
        view.index = i;

        bool is_error = false;
        if (statusful) {
            if (c.used + 1 > c.cap) poison_client(pair, "status byte out of bounds");
            is_error = std::to_integer<unsigned>(c.base[c.used]) != 0;
            c.used += 1;
        }

        if (is_error) {
            if (c.used + 4 > c.cap) poison_client(pair, "error length out of bounds");
            const std::uint32_t len = load_u32le(c.base + c.used);
            if (c.used + 4 + len > c.cap) poison_client(pair, "error text out of bounds");
            view.is_error = true;
            view.payload = {c.base + c.used + 4, len};
            c.used += 4 + len;
        } else {
            const resp_mode mode = mode_of(i);
            switch (mode.k) {
            case resp_mode::zero:
                view.payload = {};
                break;
            case resp_mode::fixed:
                if (c.used + mode.fixed_size > c.cap)
                    poison_client(pair, "fixed response out of bounds");
                view.payload = {c.base + c.used, mode.fixed_size};
                c.used += mode.fixed_size;
                break;
            case resp_mode::var: {
                if (c.used + 4 > c.cap) poison_client(pair, "response length prefix out of bounds");
                const std::uint32_t len = load_u32le(c.base + c.used);
                if (c.used + 4 + std::uint64_t{len} > c.cap)
                    poison_client(pair, "variable response out of bounds");
                view.payload = {c.base + c.used + 4, len};
                c.used += 4 + len;
                break;
            }
            }
        }
        consumer(view);
    }
    return count;
}

} // namespace entrust
