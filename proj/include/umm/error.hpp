// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace umm {

/// Library error with a machine-readable kind ("io", "format", "config",
/// "numeric", "usage") plus a human-readable detail message.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& detail)
        : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)), detail_(detail) {}

    const std::string& kind() const noexcept { return kind_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(const std::string& kind, const std::string& detail) {
    throw Error(kind, detail);
}

inline void require(bool cond, const std::string& kind, const std::string& detail) {
    if (!cond) {
        fail(kind, detail);
    }
}

} // namespace umm
