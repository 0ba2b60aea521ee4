#pragma once

// Value serialization for delegation arguments and return values.
//
// Only pure values may cross a channel. A type is wire-encodable when it is
// trivially copyable (and not a pointer), or one of the supported dynamic
// shapes below. Statically-sized values encode as their raw object bytes with
// no framing; dynamic values are length-prefixed with a 4-byte little-endian
// count.

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

namespace entrust::wire {

struct decode_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using buffer = std::vector<std::byte>;

class reader {
public:
    explicit reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

    std::span<const std::byte> take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw decode_error("wire: truncated value");
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint32_t take_u32le() {
        auto b = take(4);
        std::uint32_t v = 0;
        std::memcpy(&v, b.data(), 4);
        return v; // little-endian hosts only; asserted below
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::byte> bytes_;
    std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little,
              "wire format is little-endian; big-endian hosts are unsupported");

inline void put_u32le(buffer& out, std::uint32_t v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + 4);
}

// Primary template: trivially copyable values (not pointers) pass as raw bytes.
template <class T, class Enable = void>
struct codec {
    static_assert(std::is_trivially_copyable_v<T>, "type is not wire-encodable");
    static_assert(!std::is_pointer_v<T> && !std::is_member_pointer_v<T>,
                  "pointers may not cross a delegation channel");
    static constexpr bool fixed_size = true;
    static constexpr std::size_t size = sizeof(T);

    static void encode(const T& v, buffer& out) {
        const auto* p = reinterpret_cast<const std::byte*>(&v);
        out.insert(out.end(), p, p + sizeof(T));
    }
    static T decode(reader& in) {
        T v;
        std::memcpy(&v, in.take(sizeof(T)).data(), sizeof(T));
        return v;
    }
};

template <>
struct codec<void> {
    static constexpr bool fixed_size = true;
    static constexpr std::size_t size = 0;
};

namespace detail {
template <class T>
inline constexpr bool is_byteish = std::is_trivially_copyable_v<T> && !std::is_pointer_v<T> &&
                                   !std::is_member_pointer_v<T>;
}

template <class T>
struct codec<std::vector<T>, std::enable_if_t<detail::is_byteish<T>>> {
    static constexpr bool fixed_size = false;

    static void encode(const std::vector<T>& v, buffer& out) {
        put_u32le(out, static_cast<std::uint32_t>(v.size()));
        const auto* p = reinterpret_cast<const std::byte*>(v.data());
        out.insert(out.end(), p, p + v.size() * sizeof(T));
    }
    static std::vector<T> decode(reader& in) {
        const std::uint32_t n = in.take_u32le();
        std::vector<T> v(n);
        if (n != 0) std::memcpy(v.data(), in.take(n * sizeof(T)).data(), n * sizeof(T));
        return v;
    }
};

template <>
struct codec<std::string> {
    static constexpr bool fixed_size = false;

    static void encode(const std::string& s, buffer& out) {
        put_u32le(out, static_cast<std::uint32_t>(s.size()));
        const auto* p = reinterpret_cast<const std::byte*>(s.data());
        out.insert(out.end(), p, p + s.size());
    }
    static std::string decode(reader& in) {
        const std::uint32_t n = in.take_u32le();
        auto b = in.take(n);
        return std::string(reinterpret_cast<const char*>(b.data()), n);
    }
};

template <class T>
struct codec<std::optional<T>> {
    static constexpr bool fixed_size = false;

    static void encode(const std::optional<T>& v, buffer& out) {
        out.push_back(std::byte{v.has_value() ? 1u : 0u});
        if (v) codec<T>::encode(*v, out);
    }
    static std::optional<T> decode(reader& in) {
        const auto tag = std::to_integer<unsigned>(in.take(1)[0]);
        if (tag == 0) return std::nullopt;
        if (tag != 1) throw decode_error("wire: bad optional tag");
        return codec<T>::decode(in);
    }
};

template <class A, class B>
struct codec<std::pair<A, B>> {
    static constexpr bool fixed_size = false;

    static void encode(const std::pair<A, B>& v, buffer& out) {
        codec<A>::encode(v.first, out);
        codec<B>::encode(v.second, out);
    }
    static std::pair<A, B> decode(reader& in) {
        A a = codec<A>::decode(in);
        B b = codec<B>::decode(in);
        return {std::move(a), std::move(b)};
    }
};

template <class... Ts>
struct codec<std::tuple<Ts...>> {
    static constexpr bool fixed_size = false;

    static void encode(const std::tuple<Ts...>& v, buffer& out) {
        std::apply([&](const Ts&... xs) { (codec<Ts>::encode(xs, out), ...); }, v);
    }
    static std::tuple<Ts...> decode(reader& in) {
        return decode_impl(in, std::index_sequence_for<Ts...>{});
    }

private:
    template <std::size_t... I>
    static std::tuple<Ts...> decode_impl(reader& in, std::index_sequence<I...>) {
        std::tuple<Ts...> out;
        ((std::get<I>(out) = codec<std::tuple_element_t<I, std::tuple<Ts...>>>::decode(in)), ...);
        return out;
    }
};

template <class T, class = void>
struct is_encodable : std::false_type {};
template <class T>
struct is_encodable<T, std::void_t<decltype(codec<std::remove_cvref_t<T>>::fixed_size)>>
    : std::true_type {};
template <class T>
inline constexpr bool is_encodable_v = is_encodable<T>::value;

template <class T>
buffer encode(const T& v) {
    buffer out;
    codec<std::remove_cvref_t<T>>::encode(v, out);
    return out;
}

template <class T>
void encode_into(const T& v, buffer& out) {
    codec<std::remove_cvref_t<T>>::encode(v, out);
}

template <class T>
T decode(std::span<const std::byte> bytes) {
    reader in(bytes);
    return codec<T>::decode(in);
}

} // namespace entrust::wire
