#pragma once

// Loss-log CSV reading, downsampling, and SVG line charts of training loss.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lexforge/error.hpp"
#include "lexforge/kv_config.hpp"
#include "lexforge/tokenizer.hpp"
#include "lexforge/trainer.hpp"

namespace lexforge {

struct LossSeries {
    std::string name;
    std::vector<LossRecord> records;
};

namespace detail {

template <typename V>
V parse_field(std::string_view s, const std::string& origin, std::size_t line) {
    V v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError(origin, line, "bad number '" + std::string(s) + "'");
    return v;
}

} // namespace detail

/// Parses a loss log written by the trainer (header line, then one record per
/// logged step).
inline LossSeries parse_loss_log(std::string_view text, std::string name, const std::string& origin) {
    const auto lines = detail::split_lines(text);
    if (lines.empty() || lines[0] != kLossLogHeader)
        throw ParseError(origin, 1, "expected header '" + std::string(kLossLogHeader) + "'");
    LossSeries s{std::move(name), {}};
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::vector<std::string_view> f;
        std::size_t pos = 0;
        while (true) {
            const auto c = lines[i].find(',', pos);
            f.push_back(lines[i].substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos));
            if (c == std::string_view::npos) break;
            pos = c + 1;
        }
        if (f.size() != 5) throw ParseError(origin, i + 1, "expected 5 fields, got " + std::to_string(f.size()));
        LossRecord r{detail::parse_field<std::uint64_t>(f[0], origin, i + 1), detail::parse_field<double>(f[1], origin, i + 1),
                     detail::parse_field<double>(f[2], origin, i + 1), detail::parse_field<double>(f[3], origin, i + 1),
                     detail::parse_field<std::uint64_t>(f[4], origin, i + 1)};
        if (!s.records.empty() && r.step <= s.records.back().step)
            throw ParseError(origin, i + 1, "steps must increase");
        s.records.push_back(r);
    }
    if (s.records.empty()) throw InputError(origin + " holds no loss records");
    return s;
}

inline LossSeries read_loss_log(const std::filesystem::path& path) {
    return parse_loss_log(detail::read_file(path), path.stem().string(), path.string());
}

/// At most `points` records: contiguous buckets of equal size, each reduced to
/// its last step, its mean raw loss and its last EMA value.
inline std::vector<LossRecord> downsample(const std::vector<LossRecord>& records, std::size_t points) {
    if (points == 0) throw ConfigError("downsample needs at least one point");
    if (records.size() <= points) return records;
    std::vector<LossRecord> out;
    out.reserve(points);
    for (std::size_t b = 0; b < points; ++b) {
        const std::size_t lo = b * records.size() / points, hi = (b + 1) * records.size() / points;
        double sum = 0;
        for (std::size_t i = lo; i < hi; ++i) sum += records[i].loss;
        LossRecord r = records[hi - 1];
        r.loss = sum / static_cast<double>(hi - lo);
        out.push_back(r);
    }
    return out;
}

/// `series,step,loss,ema_loss,lr,tokens_seen` rows for every series.
inline std::string downsampled_csv(const std::vector<LossSeries>& series) {
    std::string out = "series," + std::string(kLossLogHeader) + "\n";
    for (const auto& s : series)
        for (const auto& r : s.records) out += s.name + "," + format_loss_record(r) + "\n";
    return out;
}

namespace detail {

inline std::string xml_escape(std::string_view s) {
    std::string out;
    for (const char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

inline std::string fixed(double v, int digits = 2) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Round tick spacing (1, 2 or 5 times a power of ten) giving about `n` ticks.
inline double tick_step(double span, int n) {
    const double raw = span / n;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (const double m : {1.0, 2.0, 5.0})
        if (raw <= m * mag) return m * mag;
    return 10 * mag;
}

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

} // namespace detail

/// Self-contained SVG chart: one raw-loss line (faint) and one EMA line per
/// series, sharing axes, with a legend naming each series.
inline std::string loss_curve_svg(const std::vector<LossSeries>& series, const std::string& title = "Training loss") {
    if (series.empty()) throw InputError("loss curve needs at least one series");
    constexpr double W = 800, H = 480, L = 70, R = 20, T = 40, B = 50;
    static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (const auto& r : s.records) {
            x0 = std::min(x0, static_cast<double>(r.step));
            x1 = std::max(x1, static_cast<double>(r.step));
            for (const double y : {r.loss, r.ema_loss})
                if (std::isfinite(y)) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                }
        }
    if (!std::isfinite(y0)) throw InputError("loss logs hold no finite values");
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double ys = detail::tick_step(y1 - y0, 5);
    y0 = std::floor(y0 / ys) * ys;
    y1 = std::ceil(y1 / ys) * ys;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"480\" viewBox=\"0 0 800 480\" "
                      "font-family=\"sans-serif\" font-size=\"12\">\n";
    svg += "<rect width=\"800\" height=\"480\" fill=\"white\"/>\n";
    svg += "<text x=\"400\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + detail::xml_escape(title) + "</text>\n";

    // Axes and ticks.
    svg += "<g stroke=\"#444\" fill=\"none\"><path d=\"M" + detail::fixed(L) + " " + detail::fixed(T) + " V" +
           detail::fixed(H - B) + " H" + detail::fixed(W - R) + "\"/></g>\n";
    svg += "<g fill=\"#444\">\n";
    for (double y = y0; y <= y1 + ys / 2; y += ys) {
        svg += "<line x1=\"" + detail::fixed(L - 4) + "\" x2=\"" + detail::fixed(W - R) + "\" y1=\"" + detail::fixed(py(y)) +
               "\" y2=\"" + detail::fixed(py(y)) + "\" stroke=\"#ddd\"/>";
        svg += "<text x=\"" + detail::fixed(L - 8) + "\" y=\"" + detail::fixed(py(y) + 4) + "\" text-anchor=\"end\">" +
               detail::tick_label(std::abs(y) < ys * 1e-9 ? 0.0 : y) + "</text>\n";
    }
    const double xs = detail::tick_step(x1 - x0, 6);
    for (double x = std::ceil(x0 / xs) * xs; x <= x1 + xs * 1e-9; x += xs)
        svg += "<text x=\"" + detail::fixed(px(x)) + "\" y=\"" + detail::fixed(H - B + 18) + "\" text-anchor=\"middle\">" +
               detail::tick_label(x) + "</text>\n";
    svg += "<text x=\"" + detail::fixed((L + W - R) / 2) + "\" y=\"" + detail::fixed(H - 10) +
           "\" text-anchor=\"middle\">step</text>\n";
    svg += "<text transform=\"translate(18 " + detail::fixed((T + H - B) / 2) +
           ") rotate(-90)\" text-anchor=\"middle\">loss</text>\n</g>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const std::string color = kColors[i % std::size(kColors)];
        const std::string name = detail::xml_escape(series[i].name);
        auto line = [&](bool ema) {
            std::string pts;
            for (const auto& r : series[i].records) {
                const double y = ema ? r.ema_loss : r.loss;
                if (!std::isfinite(y)) continue;
                pts += detail::fixed(px(static_cast<double>(r.step))) + "," + detail::fixed(py(y)) + " ";
            }
            if (!pts.empty()) pts.pop_back();
            return pts;
        };
        svg += "<g class=\"series\" data-name=\"" + name + "\">\n";
        svg += "<title>" + name + "</title>\n";
        svg += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-opacity=\"0.3\" stroke-width=\"1\" points=\"" +
               line(false) + "\"/>\n";
        svg += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + line(true) + "\"/>\n";
        const double ly = T + 10 + 18 * static_cast<double>(i);
        svg += "<line x1=\"" + detail::fixed(W - R - 170) + "\" x2=\"" + detail::fixed(W - R - 145) + "\" y1=\"" +
               detail::fixed(ly) + "\" y2=\"" + detail::fixed(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>";
        svg += "<text x=\"" + detail::fixed(W - R - 140) + "\" y=\"" + detail::fixed(ly + 4) + "\">" + name +
               " (EMA)</text>\n</g>\n";
    }
    svg += "</svg>\n";
    return svg;
}

} // namespace lexforge
