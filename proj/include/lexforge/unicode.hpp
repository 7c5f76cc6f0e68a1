#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lexforge::unicode {

/// One decoded code point and the number of bytes it occupied. Bytes that do
/// not start a well-formed UTF-8 sequence decode as `kInvalid` with length 1,
/// so a walk over any byte string always makes progress and covers every byte.
struct Decoded {
    char32_t cp;
    std::size_t len;
};

inline constexpr char32_t kInvalid = 0xFFFFFFFF;
inline constexpr char32_t kReplacement = 0xFFFD;

inline Decoded decode_one(std::string_view s, std::size_t i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) return {b0, 1};
    std::size_t len = 0;
    char32_t cp = 0;
    char32_t min = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2, cp = b0 & 0x1F, min = 0x80;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3, cp = b0 & 0x0F, min = 0x800;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4, cp = b0 & 0x07, min = 0x10000;
    } else {
        return {kInvalid, 1};
    }
    if (i + len > s.size()) return {kInvalid, 1};
    for (std::size_t k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) return {kInvalid, 1};
        cp = (cp << 6) | (b & 0x3F);
    }
    if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return {kInvalid, 1};
    return {cp, len};
}

inline void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

inline bool is_valid_utf8(std::string_view s) {
    for (std::size_t i = 0; i < s.size();) {
        const auto d = decode_one(s, i);
        if (d.cp == kInvalid) return false;
        i += d.len;
    }
    return true;
}

/// Copy of `s` with every ill-formed byte replaced by U+FFFD.
inline std::string sanitize_utf8(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size();) {
        const auto d = decode_one(s, i);
        if (d.cp == kInvalid)
            append_utf8(out, kReplacement);
        else
            out.append(s.substr(i, d.len));
        i += d.len;
    }
    return out;
}

namespace detail {

using Range = std::pair<char32_t, char32_t>;

template <std::size_t N>
constexpr bool in_ranges(const std::array<Range, N>& table, char32_t cp) {
    auto it = std::upper_bound(table.begin(), table.end(), cp,
                               [](char32_t v, const Range& r) { return v < r.first; });
    if (it == table.begin()) return false;
    --it;
    return cp <= it->second;
}

// Coarse approximation of the General_Category L* set covering the scripts a
// legal corpus is likely to contain. Sorted, non-overlapping.
inline constexpr std::array<Range, 38> kLetters{{
    {0x41, 0x5A},       {0x61, 0x7A},       {0xAA, 0xAA},       {0xB5, 0xB5},
    {0xBA, 0xBA},       {0xC0, 0xD6},       {0xD8, 0xF6},       {0xF8, 0x2C1},
    {0x2C6, 0x2D1},     {0x2E0, 0x2E4},     {0x370, 0x373},     {0x376, 0x377},
    {0x37B, 0x37D},     {0x386, 0x386},     {0x388, 0x3FF},     {0x400, 0x481},
    {0x48A, 0x52F},     {0x531, 0x556},     {0x561, 0x587},     {0x5D0, 0x5EA},
    {0x620, 0x64A},     {0x671, 0x6D3},     {0x904, 0x939},     {0xE01, 0xE30},
    {0x10A0, 0x10FF},   {0x1100, 0x11FF},   {0x1E00, 0x1FFF},   {0x3041, 0x3096},
    {0x30A1, 0x30FA},   {0x3400, 0x4DBF},   {0x4E00, 0x9FFF},   {0xAC00, 0xD7A3},
    {0xF900, 0xFAFF},   {0xFF21, 0xFF3A},   {0xFF41, 0xFF5A},   {0x10400, 0x1044F},
    {0x1D400, 0x1D7CB}, {0x20000, 0x2FA1F},
}};

inline constexpr std::array<Range, 15> kNumbers{{
    {0x30, 0x39},     {0xB2, 0xB3},     {0xB9, 0xB9},     {0xBC, 0xBE},
    {0x660, 0x669},   {0x6F0, 0x6F9},   {0x966, 0x96F},   {0x2070, 0x2070},
    {0x2074, 0x2079}, {0x2080, 0x2089}, {0x2150, 0x2189}, {0x2460, 0x249B},
    {0xFF10, 0xFF19}, {0x1D7CE, 0x1D7FF}, {0x1F100, 0x1F10C},
}};

inline constexpr std::array<Range, 10> kSpaces{{
    {0x09, 0x0D},     {0x20, 0x20},     {0x85, 0x85},     {0xA0, 0xA0},
    {0x1680, 0x1680}, {0x2000, 0x200A}, {0x2028, 0x2029}, {0x202F, 0x202F},
    {0x205F, 0x205F}, {0x3000, 0x3000},
}};

} // namespace detail

inline bool is_letter(char32_t cp) { return cp != kInvalid && detail::in_ranges(detail::kLetters, cp); }
inline bool is_number(char32_t cp) { return cp != kInvalid && detail::in_ranges(detail::kNumbers, cp); }
inline bool is_space(char32_t cp) { return cp != kInvalid && detail::in_ranges(detail::kSpaces, cp); }

/// Splits text into pre-token units following the GPT-2 convention
///
///   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
///
/// with the letter/number/space classes above. Ill-formed bytes count as
/// symbols. The returned views tile the input exactly.
inline std::vector<std::string_view> pretokenize(std::string_view text) {
    enum class Cls { Letter, Number, Space, Other };
    std::vector<char32_t> cps;
    std::vector<std::size_t> offs;
    for (std::size_t i = 0; i < text.size();) {
        const auto d = decode_one(text, i);
        cps.push_back(d.cp);
        offs.push_back(i);
        i += d.len;
    }
    const std::size_t n = cps.size();
    offs.push_back(text.size());
    auto cls = [&](std::size_t k) {
        const char32_t cp = cps[k];
        if (is_letter(cp)) return Cls::Letter;
        if (is_number(cp)) return Cls::Number;
        if (is_space(cp)) return Cls::Space;
        return Cls::Other;
    };

    std::vector<std::string_view> out;
    std::size_t i = 0;
    auto emit = [&](std::size_t end) {
        out.push_back(text.substr(offs[i], offs[end] - offs[i]));
        i = end;
    };
    while (i < n) {
        if (cps[i] == U'\'' && i + 1 < n) {
            const char32_t a = cps[i + 1];
            if (a == U's' || a == U't' || a == U'm' || a == U'd') {
                emit(i + 2);
                continue;
            }
            if (i + 2 < n) {
                const char32_t b = cps[i + 2];
                if ((a == U'r' && b == U'e') || (a == U'v' && b == U'e') || (a == U'l' && b == U'l')) {
                    emit(i + 3);
                    continue;
                }
            }
        }
        std::size_t start = i;
        if (cps[i] == U' ' && i + 1 < n && cls(i + 1) != Cls::Space) ++start;
        const Cls c = cls(start);
        if (c != Cls::Space) {
            std::size_t j = start + 1;
            while (j < n && cls(j) == c) ++j;
            emit(j);
            continue;
        }
        // Whitespace run: leave the final character for the next unit when a
        // non-space follows, unless the run is a single character.
        std::size_t j = i;
        while (j < n && cls(j) == Cls::Space) ++j;
        if (j < n && j - i > 1) --j;
        emit(j);
    }
    return out;
}

} // namespace lexforge::unicode
