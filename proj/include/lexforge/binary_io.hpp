#pragma once

// Little-endian encoding helpers shared by the checkpoint and shard formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>

#include "lexforge/error.hpp"

namespace lexforge::binary {

class Writer {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_unsigned_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(std::string_view s) { buf_.append(s); }
    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }

    std::size_t size() const noexcept { return buf_.size(); }
    const std::string& bytes() const noexcept { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

/// Bounds-checked cursor; running off the end raises IntegrityError naming
/// `what`.
class Reader {
public:
    Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    template <typename U>
    U get() {
        static_assert(std::is_unsigned_v<U>);
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string_view get_bytes(std::size_t n) {
        need(n);
        const auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string() { return std::string(get_bytes(get<std::uint32_t>())); }

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > data_.size() - pos_) throw IntegrityError(what_ + ": truncated at byte " + std::to_string(pos_));
    }

    std::string_view data_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace lexforge::binary
