#pragma once

// Flat `key = value` text configuration. Blank lines and lines starting with
// '#' are ignored. Keys are kept sorted so that to_string() is canonical.

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>

#include "lexforge/error.hpp"

namespace lexforge {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, const std::string& origin = "<config>") {
        KeyValueConfig cfg;
        std::size_t line_no = 0, pos = 0;
        while (pos <= text.size()) {
            const auto nl = text.find('\n', pos);
            std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
            pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
            ++line_no;
            line = trim(line);
            if (line.empty() || line.front() == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw ParseError(origin, line_no, "expected 'key = value'");
            const auto key = trim(line.substr(0, eq));
            if (key.empty()) throw ParseError(origin, line_no, "empty key");
            if (cfg.values_.count(std::string(key))) throw ParseError(origin, line_no, "duplicate key '" + std::string(key) + "'");
            cfg.values_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    template <typename V>
    void set(const std::string& key, V value) {
        if constexpr (std::is_same_v<V, bool>)
            values_[key] = value ? "true" : "false";
        else if constexpr (std::is_floating_point_v<V>)
            values_[key] = format_double(static_cast<double>(value));
        else
            values_[key] = std::to_string(value);
    }

    std::optional<std::string> raw(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    /// Typed lookup; `fallback` when the key is absent, ConfigError when the
    /// value does not parse as V.
    template <typename V>
    V get(const std::string& key, V fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& s = it->second;
        if constexpr (std::is_same_v<V, bool>) {
            if (s == "true" || s == "1") return true;
            if (s == "false" || s == "0") return false;
            throw ConfigError("key '" + key + "': expected true/false, got '" + s + "'");
        } else if constexpr (std::is_same_v<V, std::string>) {
            return s;
        } else {
            V v{};
            const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            if (res.ec != std::errc() || res.ptr != s.data() + s.size())
                throw ConfigError("key '" + key + "': cannot parse '" + s + "'");
            return v;
        }
    }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    void merge(const KeyValueConfig& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    std::string to_string() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

private:
    static std::string_view trim(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
        return s;
    }

    std::map<std::string, std::string> values_;
};

} // namespace lexforge
