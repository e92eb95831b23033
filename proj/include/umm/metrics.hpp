// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "umm/error.hpp"

namespace umm {

/// Step-indexed table of named scalar series. Steps are strictly increasing,
/// the column set is constant per table, and the CSV form round-trips doubles
/// bit-exactly.
struct MetricsTable {
    std::vector<std::string> columns;
    std::vector<int64_t> steps;
    std::vector<std::vector<double>> rows;

    void add_row(int64_t step, std::vector<double> values) {
        require(values.size() == columns.size(), "format", "metrics row width mismatch");
        require(steps.empty() || step > steps.back(), "format",
                "metrics steps must be strictly increasing");
        for (double v : values) {
            require(std::isfinite(v), "numeric", "metrics values must be finite");
        }
        steps.push_back(step);
        rows.push_back(std::move(values));
    }

    size_t size() const { return steps.size(); }

    std::vector<double> column(const std::string& name) const {
        for (size_t c = 0; c < columns.size(); ++c) {
            if (columns[c] == name) {
                std::vector<double> out;
                out.reserve(rows.size());
                for (const auto& row : rows) {
                    out.push_back(row[c]);
                }
                return out;
            }
        }
        fail("format", "unknown metrics column: " + name);
    }
};

inline std::string metrics_to_csv(const MetricsTable& table) {
    std::string out = "step";
    for (const std::string& c : table.columns) {
        out += ',';
        out += c;
    }
    out += '\n';
    char buf[64];
    for (size_t i = 0; i < table.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%" PRId64, table.steps[i]);
        out += buf;
        for (double v : table.rows[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

inline MetricsTable metrics_from_csv(const std::string& text) {
    MetricsTable table;
    size_t pos = 0;
    auto next_line = [&](std::string& line) {
        if (pos >= text.size()) {
            return false;
        }
        size_t end = text.find('\n', pos);
        if (end == std::string::npos) {
            end = text.size();
        }
        line = text.substr(pos, end - pos);
        pos = end + 1;
        return true;
    };
    std::string header;
    require(next_line(header), "format", "empty CSV");
    size_t start = 0;
    std::vector<std::string> names;
    while (start <= header.size()) {
        size_t comma = header.find(',', start);
        if (comma == std::string::npos) {
            comma = header.size();
        }
        names.push_back(header.substr(start, comma - start));
        start = comma + 1;
    }
    require(!names.empty() && names[0] == "step", "format", "CSV header must start with `step`");
    table.columns.assign(names.begin() + 1, names.end());

    std::string line;
    while (next_line(line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<double> values;
        int64_t step = 0;
        size_t field_start = 0;
        size_t field_index = 0;
        while (field_start <= line.size()) {
            size_t comma = line.find(',', field_start);
            if (comma == std::string::npos) {
                comma = line.size();
            }
            const std::string field = line.substr(field_start, comma - field_start);
            if (field_index == 0) {
                step = std::stoll(field);
            } else {
                size_t used = 0;
                values.push_back(std::stod(field, &used));
                require(used == field.size(), "format", "bad CSV number: " + field);
            }
            ++field_index;
            field_start = comma + 1;
        }
        require(field_index == names.size(), "format", "CSV row width mismatch");
        table.add_row(step, std::move(values));
    }
    return table;
}

/// Extracts scalar columns from a metrics.jsonl stream.
inline MetricsTable metrics_from_jsonl(const std::string& text,
                                       const std::vector<std::string>& columns) {
    MetricsTable table;
    table.columns = columns;
    size_t start = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) {
            continue;
        }
        const auto j = nlohmann::json::parse(line);
        std::vector<double> values;
        values.reserve(columns.size());
        for (const std::string& c : columns) {
            require(j.contains(c), "format", "metrics line missing column: " + c);
            values.push_back(j.at(c).get<double>());
        }
        table.add_row(j.at("step").get<int64_t>(), std::move(values));
    }
    return table;
}

} // namespace umm
