// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "umm/error.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Run configs are human-editable `key = value` text. '#' starts a comment.
// Unknown keys are rejected per command so a typo cannot silently fall back
// to a default.
// ---------------------------------------------------------------------------

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text) {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const size_t comment = line.find('#');
            if (comment != std::string::npos) {
                line = line.substr(0, comment);
            }
            const std::string trimmed = trim(line);
            if (trimmed.empty()) {
                continue;
            }
            const size_t eq = trimmed.find('=');
            require(eq != std::string::npos, "config",
                    "line " + std::to_string(line_no) + " is not `key = value`: " + trimmed);
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            require(!key.empty(), "config", "empty key on line " + std::to_string(line_no));
            require(cfg.values_.emplace(key, value).second, "config", "duplicate key: " + key);
        }
        return cfg;
    }

    static KeyValueConfig from_file(const std::string& path) {
        std::ifstream in(path);
        require(in.is_open(), "io", "cannot open config file: " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse(buf.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string get_required(const std::string& key) const {
        auto it = values_.find(key);
        require(it != values_.end(), "config", "missing required key: " + key);
        return it->second;
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            return fallback;
        }
        try {
            size_t used = 0;
            const int64_t v = std::stoll(it->second, &used);
            require(used == it->second.size(), "config", "not an integer: " + key + " = " + it->second);
            return v;
        } catch (const Error&) {
            throw;
        } catch (...) {
            fail("config", "not an integer: " + key + " = " + it->second);
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            return fallback;
        }
        try {
            size_t used = 0;
            const uint64_t v = std::stoull(it->second, &used);
            require(used == it->second.size(), "config", "not an integer: " + key + " = " + it->second);
            return v;
        } catch (const Error&) {
            throw;
        } catch (...) {
            fail("config", "not an integer: " + key + " = " + it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            return fallback;
        }
        try {
            size_t used = 0;
            const double v = std::stod(it->second, &used);
            require(used == it->second.size(), "config", "not a number: " + key + " = " + it->second);
            return v;
        } catch (const Error&) {
            throw;
        } catch (...) {
            fail("config", "not a number: " + key + " = " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            return fallback;
        }
        if (it->second == "true") {
            return true;
        }
        if (it->second == "false") {
            return false;
        }
        fail("config", "not a bool (true/false): " + key + " = " + it->second);
    }

    /// Strict schema check: every present key must be known.
    void require_known(const std::set<std::string>& known) const {
        for (const auto& [key, value] : values_) {
            (void)value;
            require(known.count(key) > 0, "config", "unknown config key: " + key);
        }
    }

    /// Canonical text form (sorted keys), written into run directories.
    std::string serialize() const {
        std::string out;
        for (const auto& [key, value] : values_) {
            out += key;
            out += " = ";
            out += value;
            out += '\n';
        }
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        size_t a = 0;
        size_t b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
            ++a;
        }
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
            --b;
        }
        return s.substr(a, b - a);
    }

    std::map<std::string, std::string> values_;
};

} // namespace umm
