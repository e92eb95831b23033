// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "umm/error.hpp"
#include "umm/metrics.hpp"

namespace umm {

// Hand-rolled SVG so runs have no plotting dependency. Line charts for
// step-indexed series, bar charts for per-category summaries.

namespace detail {

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string fmt_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline const char* series_color(size_t index) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    return palette[index % (sizeof palette / sizeof palette[0])];
}

struct Frame {
    double width = 840, height = 480;
    double left = 70, right = 30, top = 40, bottom = 50;
    double plot_w() const { return width - left - right; }
    double plot_h() const { return height - top - bottom; }
};

inline void svg_header(std::string& out, const Frame& f, const std::string& title) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                  "viewBox=\"0 0 %.0f %.0f\">\n",
                  f.width, f.height, f.width, f.height);
    out += buf;
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.0f\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  f.width / 2, svg_escape(title).c_str());
    out += buf;
    // axes
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                  f.left, f.top, f.left, f.height - f.bottom);
    out += buf;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                  f.left, f.height - f.bottom, f.width - f.right, f.height - f.bottom);
    out += buf;
}

} // namespace detail

inline std::string line_chart_svg(const MetricsTable& table, const std::string& title) {
    detail::Frame f;
    std::string out;
    detail::svg_header(out, f, title);
    char buf[512];

    if (!table.steps.empty() && !table.columns.empty()) {
        const double x_min = static_cast<double>(table.steps.front());
        const double x_max = static_cast<double>(table.steps.back());
        double y_min = table.rows[0][0];
        double y_max = y_min;
        for (const auto& row : table.rows) {
            for (double v : row) {
                y_min = std::min(y_min, v);
                y_max = std::max(y_max, v);
            }
        }
        if (y_min == y_max) {
            y_min -= 1.0;
            y_max += 1.0;
        }
        const double y_pad = 0.05 * (y_max - y_min);
        y_min -= y_pad;
        y_max += y_pad;
        const double x_span = x_max > x_min ? x_max - x_min : 1.0;

        auto x_of = [&](double x) { return f.left + (x - x_min) / x_span * f.plot_w(); };
        auto y_of = [&](double y) {
            return f.height - f.bottom - (y - y_min) / (y_max - y_min) * f.plot_h();
        };

        for (int tick = 0; tick <= 4; ++tick) {
            const double xv = x_min + x_span * tick / 4.0;
            const double yv = y_min + (y_max - y_min) * tick / 4.0;
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
                          "text-anchor=\"middle\">%s</text>\n",
                          x_of(xv), f.height - f.bottom + 18, detail::fmt_num(xv).c_str());
            out += buf;
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
                          "text-anchor=\"end\">%s</text>\n",
                          f.left - 6, y_of(yv) + 4, detail::fmt_num(yv).c_str());
            out += buf;
            std::snprintf(buf, sizeof buf,
                          "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#dddddd\"/>\n",
                          f.left, y_of(yv), f.width - f.right, y_of(yv));
            out += buf;
        }

        for (size_t c = 0; c < table.columns.size(); ++c) {
            std::string points;
            for (size_t i = 0; i < table.size(); ++i) {
                std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x_of(static_cast<double>(table.steps[i])),
                              y_of(table.rows[i][c]));
                points += buf;
            }
            std::snprintf(buf, sizeof buf,
                          "<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"1.6\" points=\"%s\"/>\n",
                          detail::series_color(c), points.c_str());
            out += buf;
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" "
                          "fill=\"%s\">%s</text>\n",
                          f.width - f.right - 150.0, f.top + 16.0 * (c + 1), detail::series_color(c),
                          detail::svg_escape(table.columns[c]).c_str());
            out += buf;
        }
    }
    out += "</svg>\n";
    return out;
}

inline std::string bar_chart_svg(const std::vector<std::string>& labels,
                                 const std::vector<double>& values, const std::string& title) {
    require(labels.size() == values.size(), "format", "bar chart labels/values mismatch");
    detail::Frame f;
    std::string out;
    detail::svg_header(out, f, title);
    char buf[512];
    if (!values.empty()) {
        double y_min = std::min(0.0, *std::min_element(values.begin(), values.end()));
        double y_max = std::max(0.0, *std::max_element(values.begin(), values.end()));
        if (y_min == y_max) {
            y_max += 1.0;
        }
        const double pad = 0.08 * (y_max - y_min);
        y_max += pad;
        y_min -= pad;
        auto y_of = [&](double y) {
            return f.height - f.bottom - (y - y_min) / (y_max - y_min) * f.plot_h();
        };
        const double slot = f.plot_w() / static_cast<double>(values.size());
        const double bar_w = slot * 0.6;
        for (size_t i = 0; i < values.size(); ++i) {
            const double x = f.left + slot * (static_cast<double>(i) + 0.2);
            const double y0 = y_of(0.0);
            const double y1 = y_of(values[i]);
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\"/>\n",
                          x, std::min(y0, y1), bar_w, std::abs(y0 - y1), detail::series_color(i));
            out += buf;
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
                          "text-anchor=\"middle\">%s</text>\n",
                          x + bar_w / 2, f.height - f.bottom + 18,
                          detail::svg_escape(labels[i]).c_str());
            out += buf;
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
                          "text-anchor=\"middle\">%s</text>\n",
                          x + bar_w / 2, std::min(y0, y1) - 4, detail::fmt_num(values[i]).c_str());
            out += buf;
        }
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                      f.left, y_of(0.0), f.width - f.right, y_of(0.0));
        out += buf;
    }
    out += "</svg>\n";
    return out;
}

/// CSV first, then the SVG rendered from the re-parsed CSV so the two files
/// can never disagree.
inline void emit_plots(const MetricsTable& table, const std::string& out_base,
                       const std::string& title) {
    {
        std::ofstream csv(out_base + ".csv", std::ios::trunc);
        require(csv.is_open(), "io", "cannot write " + out_base + ".csv");
        csv << metrics_to_csv(table);
    }
    std::ifstream in(out_base + ".csv");
    std::stringstream buf;
    buf << in.rdbuf();
    const MetricsTable reparsed = metrics_from_csv(buf.str());
    std::ofstream svg(out_base + ".svg", std::ios::trunc);
    require(svg.is_open(), "io", "cannot write " + out_base + ".svg");
    svg << line_chart_svg(reparsed, title);
}

} // namespace umm
