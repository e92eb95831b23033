// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "umm/error.hpp"

namespace umm {

inline double mean_of(std::span<const double> xs) {
    require(!xs.empty(), "format", "mean of an empty range");
    double s = 0.0;
    for (double x : xs) {
        s += x;
    }
    return s / static_cast<double>(xs.size());
}

inline double population_std(std::span<const double> xs) {
    const double mu = mean_of(xs);
    double s = 0.0;
    for (double x : xs) {
        s += (x - mu) * (x - mu);
    }
    return std::sqrt(s / static_cast<double>(xs.size()));
}

/// Mean of the first / last `window` entries; window is clamped to the size.
inline double head_mean(std::span<const double> xs, size_t window) {
    window = std::min(window, xs.size());
    return mean_of(xs.subspan(0, window));
}

inline double tail_mean(std::span<const double> xs, size_t window) {
    window = std::min(window, xs.size());
    return mean_of(xs.subspan(xs.size() - window, window));
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> average_ranks(std::span<const double> xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) {
            ++j;
        }
        const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) {
            ranks[order[k]] = shared;
        }
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman_correlation(std::span<const double> xs, std::span<const double> ys) {
    require(xs.size() == ys.size() && xs.size() >= 2, "format",
            "spearman needs two equal-length series");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    const double mx = mean_of(rx);
    const double my = mean_of(ry);
    double cov = 0.0;
    double vx = 0.0;
    double vy = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    require(vx > 0.0 && vy > 0.0, "numeric", "spearman undefined for a constant series");
    return cov / std::sqrt(vx * vy);
}

/// One-sided sign test: p-value of seeing >= `negatives` negative deltas out
/// of the non-zero ones under the null of a symmetric-sign distribution.
inline double sign_test_p_value(std::span<const double> deltas) {
    int n = 0;
    int negatives = 0;
    for (double d : deltas) {
        if (d == 0.0) {
            continue;
        }
        ++n;
        negatives += d < 0.0 ? 1 : 0;
    }
    require(n > 0, "format", "sign test needs at least one non-zero delta");
    double p = 0.0;
    for (int k = negatives; k <= n; ++k) {
        const double log_choose =
            std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
        p += std::exp(log_choose - n * std::log(2.0));
    }
    return std::min(p, 1.0);
}

inline uint64_t fnv1a64(std::span<const int> values) {
    uint64_t h = 1469598103934665603ull;
    for (int v : values) {
        for (int byte = 0; byte < 4; ++byte) {
            h ^= static_cast<uint64_t>((static_cast<uint32_t>(v) >> (8 * byte)) & 0xff);
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace umm
