// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "umm/aligned.hpp"
#include "umm/error.hpp"

namespace umm {

/// Adam with bias correction. step() descends along the given gradient.
struct AdamState {
    dvec m, v;
    int64_t t = 0;

    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}

    void step(dvec& params, const dvec& grad, double lr, double beta1, double beta2, double eps) {
        require(params.size() == m.size() && grad.size() == m.size(), "format",
                "optimizer state size mismatch");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};

inline double grad_norm(const dvec& grad) {
    double s = 0.0;
    for (double g : grad) {
        s += g * g;
    }
    return std::sqrt(s);
}

} // namespace umm
