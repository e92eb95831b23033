// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "umm/aligned.hpp"
#include "umm/error.hpp"
#include "umm/rng.hpp"
#include "umm/vocab.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// The unified model: one small causal transformer over the joint vocabulary.
// Generation continues after BOI, understanding scores text after the image.
// Double precision throughout; backward passes are written out analytically
// and checked against central finite differences in the test suite.
// ---------------------------------------------------------------------------

using TokenSequence = std::vector<int>;

struct ModelConfig {
    int vocab_size = 0;
    int context = 128;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;

    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        require(vocab_size >= 2, "config", "vocab_size must be >= 2");
        require(context >= 2, "config", "context must be >= 2");
        require(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0, "config",
                "d_model must be a positive multiple of n_heads");
        require(n_layers >= 1, "config", "n_layers must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;
    size_t size = 0;
};

/// Flat parameter layout. Tensor order is fixed; it defines both the
/// checkpoint payload order and the initialization draw order.
struct ParamLayout {
    std::vector<TensorSpec> tensors;
    size_t total = 0;

    explicit ParamLayout(const ModelConfig& cfg) {
        cfg.validate();
        const int D = cfg.d_model;
        const int F = cfg.d_ff();
        const int V = cfg.vocab_size;
        auto add = [&](const std::string& name, std::vector<int> shape) {
            size_t size = 1;
            for (int dim : shape) {
                size *= static_cast<size_t>(dim);
            }
            tensors.push_back({name, std::move(shape), total, size});
            total += size;
        };
        add("wte", {V, D});
        add("wpe", {cfg.context, D});
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string blk = "blk" + std::to_string(l) + ".";
            add(blk + "ln1.g", {D});
            add(blk + "ln1.b", {D});
            add(blk + "attn.w_qkv", {D, 3 * D});
            add(blk + "attn.b_qkv", {3 * D});
            add(blk + "attn.w_out", {D, D});
            add(blk + "attn.b_out", {D});
            add(blk + "ln2.g", {D});
            add(blk + "ln2.b", {D});
            add(blk + "mlp.w_in", {D, F});
            add(blk + "mlp.b_in", {F});
            add(blk + "mlp.w_out", {F, D});
            add(blk + "mlp.b_out", {D});
        }
        add("lnf.g", {D});
        add("lnf.b", {D});
        add("head.w", {D, V});
        add("head.b", {V});
    }

    const TensorSpec& find(const std::string& name) const {
        for (const TensorSpec& t : tensors) {
            if (t.name == name) {
                return t;
            }
        }
        fail("format", "unknown tensor: " + name);
    }
};

namespace detail {

struct BlockOffsets {
    size_t ln1_g, ln1_b, w_qkv, b_qkv, w_att_out, b_att_out;
    size_t ln2_g, ln2_b, w_in, b_in, w_out, b_out;
};

struct ParamOffsets {
    size_t wte, wpe, lnf_g, lnf_b, head_w, head_b;
    std::vector<BlockOffsets> blocks;

    ParamOffsets() = default;
    explicit ParamOffsets(const ParamLayout& layout) {
        wte = layout.find("wte").offset;
        wpe = layout.find("wpe").offset;
        size_t n_layers = 0;
        for (const TensorSpec& t : layout.tensors) {
            if (t.name.starts_with("blk") && t.name.ends_with(".ln1.g")) {
                ++n_layers;
            }
        }
        for (size_t l = 0; l < n_layers; ++l) {
            const std::string blk = "blk" + std::to_string(l) + ".";
            blocks.push_back({layout.find(blk + "ln1.g").offset, layout.find(blk + "ln1.b").offset,
                              layout.find(blk + "attn.w_qkv").offset, layout.find(blk + "attn.b_qkv").offset,
                              layout.find(blk + "attn.w_out").offset, layout.find(blk + "attn.b_out").offset,
                              layout.find(blk + "ln2.g").offset, layout.find(blk + "ln2.b").offset,
                              layout.find(blk + "mlp.w_in").offset, layout.find(blk + "mlp.b_in").offset,
                              layout.find(blk + "mlp.w_out").offset, layout.find(blk + "mlp.b_out").offset});
        }
        lnf_g = layout.find("lnf.g").offset;
        lnf_b = layout.find("lnf.b").offset;
        head_w = layout.find("head.w").offset;
        head_b = layout.find("head.b").offset;
    }
};

} // namespace detail

/// All trainable tensors plus the hyperparameters that shape them.
struct PolicyParams {
    ModelConfig config;
    dvec data;

    PolicyParams() = default;
    explicit PolicyParams(const ModelConfig& cfg)
        : config(cfg), data(ParamLayout(cfg).total, 0.0), offsets_(ParamLayout(cfg)) {}

    double* ptr(size_t offset) { return data.data() + offset; }
    const double* ptr(size_t offset) const { return data.data() + offset; }
    const detail::ParamOffsets& offsets() const { return offsets_; }

    void rebuild_offsets() { offsets_ = detail::ParamOffsets(ParamLayout(config)); }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

private:
    detail::ParamOffsets offsets_;
};

using GradBuffer = dvec;

/// Deterministic small-scale initialization: N(0, 0.02) weights with
/// residual output projections damped by 1/sqrt(2 * n_layers), unit
/// layernorm gains, zero biases (including the final projection bias).
inline PolicyParams init_params(Rng& rng, const ModelConfig& cfg) {
    PolicyParams params(cfg);
    const ParamLayout layout(cfg);
    const double base_std = 0.02;
    const double residual_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    for (const TensorSpec& t : layout.tensors) {
        double* p = params.ptr(t.offset);
        const bool is_gain = t.name.ends_with("ln1.g") || t.name.ends_with("ln2.g") || t.name == "lnf.g";
        const bool is_bias = t.name.ends_with(".b") || t.name.ends_with("b_qkv") ||
                             t.name.ends_with("b_att_out") || t.name.ends_with("b_out") ||
                             t.name.ends_with("b_in");
        const bool is_residual_out = t.name.ends_with("attn.w_out") || t.name.ends_with("mlp.w_out");
        if (is_gain) {
            std::fill(p, p + t.size, 1.0);
        } else if (is_bias) {
            std::fill(p, p + t.size, 0.0);
        } else {
            const double std = is_residual_out ? residual_std : base_std;
            for (size_t i = 0; i < t.size; ++i) {
                p[i] = rng.normal(0.0, std);
            }
        }
    }
    return params;
}

// ------------------------------------------------------------- row softmax

namespace detail {

using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline double row_max(const double* row, int lo, int hi) {
    return ConstArrMap(row + lo, hi - lo).maxCoeff();
}

/// log(sum(exp(row[lo..hi) - m))) for max-subtracted stability.
inline double row_logsumexp(const double* row, int lo, int hi, double m) {
    return std::log((ConstArrMap(row + lo, hi - lo) - m).exp().sum());
}

inline double log_softmax_at(const double* row, int lo, int hi, int index) {
    const double m = row_max(row, lo, hi);
    return (row[index] - m) - row_logsumexp(row, lo, hi, m);
}

inline void softmax_row(const double* row, int lo, int hi, double* out) {
    const double m = row_max(row, lo, hi);
    ArrMap o(out, hi - lo);
    o = (ConstArrMap(row + lo, hi - lo) - m).exp();
    o *= 1.0 / o.sum();
}

} // namespace detail

/// Softmax probability of one token id given a row of logits (Eq. over the
/// full vocabulary, max-subtracted).
inline double token_prob(std::span<const double> logits, int target_id) {
    require(target_id >= 0 && target_id < static_cast<int>(logits.size()), "format",
            "target id outside the logits row");
    return std::exp(detail::log_softmax_at(logits.data(), 0, static_cast<int>(logits.size()), target_id));
}

// ------------------------------------------------------------ forward pass

struct ForwardCache {
    int T = 0;

    struct LayerCache {
        dvec ln1_out, ln1_mean, ln1_rstd;
        dvec qkv;        // [T, 3D]
        dvec att_probs;  // [H, T, T], zero above the diagonal
        dvec att_heads;  // [T, D]
        dvec x_mid;      // after the attention residual
        dvec ln2_out, ln2_mean, ln2_rstd;
        dvec fc1;        // [T, F], pre-activation
        dvec gelu_out;   // [T, F]
        dvec x_out;      // after the mlp residual
    };

    dvec x0; // embeddings, [T, D]
    std::vector<LayerCache> layers;
    dvec lnf_out, lnf_mean, lnf_rstd;
    dvec logits; // [T, V]

    // backward scratch
    dvec dx, d_branch, d_qkv, d_fc, d_fc2, d_probs;

    void resize(const ModelConfig& cfg, int seq_len) {
        T = seq_len;
        const size_t t = static_cast<size_t>(seq_len);
        const size_t D = static_cast<size_t>(cfg.d_model);
        const size_t F = static_cast<size_t>(cfg.d_ff());
        const size_t H = static_cast<size_t>(cfg.n_heads);
        x0.assign(t * D, 0.0);
        layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& layer : layers) {
            layer.ln1_out.assign(t * D, 0.0);
            layer.ln1_mean.assign(t, 0.0);
            layer.ln1_rstd.assign(t, 0.0);
            layer.qkv.assign(t * 3 * D, 0.0);
            layer.att_probs.assign(H * t * t, 0.0);
            layer.att_heads.assign(t * D, 0.0);
            layer.x_mid.assign(t * D, 0.0);
            layer.ln2_out.assign(t * D, 0.0);
            layer.ln2_mean.assign(t, 0.0);
            layer.ln2_rstd.assign(t, 0.0);
            layer.fc1.assign(t * F, 0.0);
            layer.gelu_out.assign(t * F, 0.0);
            layer.x_out.assign(t * D, 0.0);
        }
        lnf_out.assign(t * D, 0.0);
        lnf_mean.assign(t, 0.0);
        lnf_rstd.assign(t, 0.0);
        logits.assign(t * static_cast<size_t>(cfg.vocab_size), 0.0);
    }

    const double* logits_row(int t, int V) const { return logits.data() + static_cast<size_t>(t) * V; }
};

namespace detail {

constexpr double kLnEps = 1e-5;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

/// out[T,N] = in[T,M] @ w[M,N] + b
inline void matmul_forward(double* out, const double* in, const double* w, const double* b, int T,
                           int M, int N) {
    MatMap O(out, T, N);
    O.noalias() = ConstMatMap(in, T, M) * ConstMatMap(w, M, N);
    O.rowwise() += ConstVecMap(b, N).transpose();
}

/// din += dout @ w^T, dw += in^T @ dout, db += colsum(dout)
inline void matmul_backward(double* din, double* dw, double* db, const double* dout, const double* in,
                            const double* w, int T, int M, int N) {
    ConstMatMap DO(dout, T, N);
    if (din != nullptr) {
        MatMap(din, T, M).noalias() += DO * ConstMatMap(w, M, N).transpose();
    }
    MatMap(dw, M, N).noalias() += ConstMatMap(in, T, M).transpose() * DO;
    VecMap(db, N).noalias() += DO.colwise().sum();
}

inline void layernorm_forward(double* out, double* mean, double* rstd, const double* in,
                              const double* g, const double* b, int T, int D) {
    for (int t = 0; t < T; ++t) {
        const double* x = in + static_cast<size_t>(t) * D;
        double* o = out + static_cast<size_t>(t) * D;
        double mu = 0.0;
        for (int i = 0; i < D; ++i) {
            mu += x[i];
        }
        mu /= D;
        double var = 0.0;
        for (int i = 0; i < D; ++i) {
            const double d = x[i] - mu;
            var += d * d;
        }
        var /= D;
        const double s = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = s;
        for (int i = 0; i < D; ++i) {
            o[i] = (x[i] - mu) * s * g[i] + b[i];
        }
    }
}

/// dx += ..., dg += ..., db += ...
inline void layernorm_backward(double* dx, double* dg, double* db, const double* dout,
                               const double* in, const double* mean, const double* rstd,
                               const double* g, int T, int D) {
    for (int t = 0; t < T; ++t) {
        const double* x = in + static_cast<size_t>(t) * D;
        const double* do_ = dout + static_cast<size_t>(t) * D;
        double* dxt = dx + static_cast<size_t>(t) * D;
        const double mu = mean[t];
        const double s = rstd[t];
        double mean_dn = 0.0;
        double mean_dn_n = 0.0;
        for (int i = 0; i < D; ++i) {
            const double n = (x[i] - mu) * s;
            const double dn = do_[i] * g[i];
            mean_dn += dn;
            mean_dn_n += dn * n;
            dg[i] += do_[i] * n;
            db[i] += do_[i];
        }
        mean_dn /= D;
        mean_dn_n /= D;
        for (int i = 0; i < D; ++i) {
            const double n = (x[i] - mu) * s;
            const double dn = do_[i] * g[i];
            dxt[i] += s * (dn - mean_dn - n * mean_dn_n);
        }
    }
}

constexpr double kGeluScale = 0.7978845608028653558798921198687; // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
constexpr double kTanhClamp = 20.0; // tanh saturates to +-1 in double well before this

/// tanh(u) = 1 - 2 / (exp(2u) + 1) through Eigen's vectorized exp; the
/// backward pass uses the exact derivative of this same expression.
template <typename Derived>
auto vtanh(const Eigen::ArrayBase<Derived>& u) {
    return 1.0 - 2.0 / ((2.0 * u.cwiseMin(kTanhClamp).cwiseMax(-kTanhClamp)).exp() + 1.0);
}

inline void gelu_forward(double* out, const double* in, size_t n) {
    ArrMap o(out, static_cast<Eigen::Index>(n));
    ConstArrMap x(in, static_cast<Eigen::Index>(n));
    o = 0.5 * x * (1.0 + vtanh(kGeluScale * (x + kGeluCubic * x.cube())));
}

inline void gelu_backward(double* din, const double* in, const double* dout, size_t n) {
    ArrMap d(din, static_cast<Eigen::Index>(n));
    ConstArrMap x(in, static_cast<Eigen::Index>(n));
    ConstArrMap g(dout, static_cast<Eigen::Index>(n));
    const auto th = vtanh(kGeluScale * (x + kGeluCubic * x.cube())).eval();
    d = g * (0.5 * (1.0 + th) +
             0.5 * x * (1.0 - th.square()) * (kGeluScale * (1.0 + 3.0 * kGeluCubic * x.square())));
}

/// Causal multi-head attention over a cached qkv buffer.
inline void attention_forward(double* att_heads, double* att_probs, const double* qkv, int T, int D,
                              int H) {
    const int hd = D / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Eigen::OuterStride<> qkv_stride(3 * D);
    const Eigen::OuterStride<> out_stride(D);
    for (int h = 0; h < H; ++h) {
        ConstStridedMap Q(qkv + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        ConstStridedMap K(qkv + static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        ConstStridedMap Vv(qkv + 2 * static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd,
                           qkv_stride);
        double* probs = att_probs + static_cast<size_t>(h) * T * T;
        MatMap P(probs, T, T);
        P.noalias() = Q * K.transpose() * inv_sqrt;
        // causal softmax row by row; zero above the diagonal
        for (int t = 0; t < T; ++t) {
            double* row = probs + static_cast<size_t>(t) * T;
            softmax_row(row, 0, t + 1, row);
            for (int j = t + 1; j < T; ++j) {
                row[j] = 0.0;
            }
        }
        StridedMap O(att_heads + static_cast<size_t>(h) * hd, T, hd, out_stride);
        O.noalias() = ConstMatMap(probs, T, T) * Vv;
    }
}

/// d_qkv += attention gradients; d_probs is a [T, T] scratch buffer.
inline void attention_backward(double* d_qkv, double* d_probs_scratch, const double* d_att_heads,
                               const double* att_probs, const double* qkv, int T, int D, int H) {
    const int hd = D / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Eigen::OuterStride<> qkv_stride(3 * D);
    const Eigen::OuterStride<> out_stride(D);
    for (int h = 0; h < H; ++h) {
        ConstStridedMap Q(qkv + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        ConstStridedMap K(qkv + static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        ConstStridedMap Vv(qkv + 2 * static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd,
                           qkv_stride);
        ConstStridedMap DO(d_att_heads + static_cast<size_t>(h) * hd, T, hd, out_stride);
        ConstMatMap P(att_probs + static_cast<size_t>(h) * T * T, T, T);

        StridedMap dQ(d_qkv + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        StridedMap dK(d_qkv + static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd, qkv_stride);
        StridedMap dV(d_qkv + 2 * static_cast<size_t>(D) + static_cast<size_t>(h) * hd, T, hd,
                      qkv_stride);

        dV.noalias() += P.transpose() * DO;

        MatMap dP(d_probs_scratch, T, T);
        dP.noalias() = DO * Vv.transpose();
        // softmax backward; rows of P are zero above the diagonal, so dS is too
        for (int t = 0; t < T; ++t) {
            double rowdot = 0.0;
            const double* p = att_probs + static_cast<size_t>(h) * T * T + static_cast<size_t>(t) * T;
            double* dp = d_probs_scratch + static_cast<size_t>(t) * T;
            for (int j = 0; j <= t; ++j) {
                rowdot += p[j] * dp[j];
            }
            for (int j = 0; j <= t; ++j) {
                dp[j] = p[j] * (dp[j] - rowdot);
            }
            for (int j = t + 1; j < T; ++j) {
                dp[j] = 0.0;
            }
        }
        dQ.noalias() += MatMap(d_probs_scratch, T, T) * K * inv_sqrt;
        dK.noalias() += MatMap(d_probs_scratch, T, T).transpose() * Q * inv_sqrt;
    }
}

} // namespace detail

/// Full teacher-forced forward pass: one row of logits per input position,
/// causal by construction.
inline void forward(const PolicyParams& params, std::span<const int> seq, ForwardCache& cache) {
    const ModelConfig& cfg = params.config;
    const int T = static_cast<int>(seq.size());
    require(T >= 1, "format", "empty sequence");
    require(T <= cfg.context, "format", "sequence exceeds the model context");
    const int D = cfg.d_model;
    const int F = cfg.d_ff();
    const auto& off = params.offsets();
    cache.resize(cfg, T);

    for (int t = 0; t < T; ++t) {
        const int token = seq[t];
        require(token >= 0 && token < cfg.vocab_size, "format", "token id outside the vocabulary");
        const double* wte = params.ptr(off.wte) + static_cast<size_t>(token) * D;
        const double* wpe = params.ptr(off.wpe) + static_cast<size_t>(t) * D;
        double* x = cache.x0.data() + static_cast<size_t>(t) * D;
        for (int i = 0; i < D; ++i) {
            x[i] = wte[i] + wpe[i];
        }
    }

    const double* x_in = cache.x0.data();
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lc = cache.layers[static_cast<size_t>(l)];
        const auto& b = off.blocks[static_cast<size_t>(l)];
        detail::layernorm_forward(lc.ln1_out.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(), x_in,
                                  params.ptr(b.ln1_g), params.ptr(b.ln1_b), T, D);
        detail::matmul_forward(lc.qkv.data(), lc.ln1_out.data(), params.ptr(b.w_qkv),
                               params.ptr(b.b_qkv), T, D, 3 * D);
        detail::attention_forward(lc.att_heads.data(), lc.att_probs.data(), lc.qkv.data(), T, D,
                                  cfg.n_heads);
        detail::matmul_forward(lc.x_mid.data(), lc.att_heads.data(), params.ptr(b.w_att_out),
                               params.ptr(b.b_att_out), T, D, D);
        for (size_t i = 0; i < lc.x_mid.size(); ++i) {
            lc.x_mid[i] += x_in[i];
        }
        detail::layernorm_forward(lc.ln2_out.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(),
                                  lc.x_mid.data(), params.ptr(b.ln2_g), params.ptr(b.ln2_b), T, D);
        detail::matmul_forward(lc.fc1.data(), lc.ln2_out.data(), params.ptr(b.w_in), params.ptr(b.b_in),
                               T, D, F);
        detail::gelu_forward(lc.gelu_out.data(), lc.fc1.data(), lc.fc1.size());
        detail::matmul_forward(lc.x_out.data(), lc.gelu_out.data(), params.ptr(b.w_out),
                               params.ptr(b.b_out), T, F, D);
        for (size_t i = 0; i < lc.x_out.size(); ++i) {
            lc.x_out[i] += lc.x_mid[i];
        }
        x_in = lc.x_out.data();
    }

    detail::layernorm_forward(cache.lnf_out.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(), x_in,
                              params.ptr(off.lnf_g), params.ptr(off.lnf_b), T, D);
    detail::matmul_forward(cache.logits.data(), cache.lnf_out.data(), params.ptr(off.head_w),
                           params.ptr(off.head_b), T, D, cfg.vocab_size);
}

/// Accumulates d(objective)/d(params) into grads given d(objective)/d(logits).
inline void backward(const PolicyParams& params, std::span<const int> seq, ForwardCache& cache,
                     const dvec& dlogits, GradBuffer& grads) {
    const ModelConfig& cfg = params.config;
    const int T = cache.T;
    const int D = cfg.d_model;
    const int F = cfg.d_ff();
    const int V = cfg.vocab_size;
    const auto& off = params.offsets();
    require(grads.size() == params.data.size(), "format", "gradient buffer has the wrong size");
    require(dlogits.size() == cache.logits.size(), "format", "dlogits has the wrong size");

    const size_t tD = static_cast<size_t>(T) * D;
    cache.dx.assign(tD, 0.0);
    cache.d_branch.assign(tD, 0.0);
    cache.d_qkv.assign(static_cast<size_t>(T) * 3 * D, 0.0);
    cache.d_fc.assign(static_cast<size_t>(T) * F, 0.0);
    cache.d_fc2.assign(static_cast<size_t>(T) * F, 0.0);
    cache.d_probs.assign(static_cast<size_t>(T) * T, 0.0);

    // head and final layernorm
    detail::matmul_backward(cache.d_branch.data(), grads.data() + off.head_w,
                            grads.data() + off.head_b, dlogits.data(), cache.lnf_out.data(),
                            params.ptr(off.head_w), T, D, V);
    const double* last_x =
        cfg.n_layers > 0 ? cache.layers.back().x_out.data() : cache.x0.data();
    detail::layernorm_backward(cache.dx.data(), grads.data() + off.lnf_g, grads.data() + off.lnf_b,
                               cache.d_branch.data(), last_x, cache.lnf_mean.data(),
                               cache.lnf_rstd.data(), params.ptr(off.lnf_g), T, D);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        auto& lc = cache.layers[static_cast<size_t>(l)];
        const auto& b = off.blocks[static_cast<size_t>(l)];
        const double* x_in = l > 0 ? cache.layers[static_cast<size_t>(l - 1)].x_out.data()
                                   : cache.x0.data();

        // mlp branch: cache.dx currently holds d(x_out)
        std::fill(cache.d_fc.begin(), cache.d_fc.end(), 0.0);
        detail::matmul_backward(cache.d_fc.data(), grads.data() + b.w_out, grads.data() + b.b_out,
                                cache.dx.data(), lc.gelu_out.data(), params.ptr(b.w_out), T, F, D);
        detail::gelu_backward(cache.d_fc2.data(), lc.fc1.data(), cache.d_fc.data(),
                              static_cast<size_t>(T) * F);
        std::fill(cache.d_branch.begin(), cache.d_branch.end(), 0.0);
        detail::matmul_backward(cache.d_branch.data(), grads.data() + b.w_in, grads.data() + b.b_in,
                                cache.d_fc2.data(), lc.ln2_out.data(), params.ptr(b.w_in), T, D, F);
        // residual: d(x_mid) = d(x_out) + ln2 backward contribution
        detail::layernorm_backward(cache.dx.data(), grads.data() + b.ln2_g, grads.data() + b.ln2_b,
                                   cache.d_branch.data(), lc.x_mid.data(), lc.ln2_mean.data(),
                                   lc.ln2_rstd.data(), params.ptr(b.ln2_g), T, D);

        // attention branch: cache.dx now holds d(x_mid)
        std::fill(cache.d_branch.begin(), cache.d_branch.end(), 0.0);
        detail::matmul_backward(cache.d_branch.data(), grads.data() + b.w_att_out,
                                grads.data() + b.b_att_out, cache.dx.data(), lc.att_heads.data(),
                                params.ptr(b.w_att_out), T, D, D);
        std::fill(cache.d_qkv.begin(), cache.d_qkv.end(), 0.0);
        detail::attention_backward(cache.d_qkv.data(), cache.d_probs.data(), cache.d_branch.data(),
                                   lc.att_probs.data(), lc.qkv.data(), T, D, cfg.n_heads);
        std::fill(cache.d_branch.begin(), cache.d_branch.end(), 0.0);
        detail::matmul_backward(cache.d_branch.data(), grads.data() + b.w_qkv,
                                grads.data() + b.b_qkv, cache.d_qkv.data(), lc.ln1_out.data(),
                                params.ptr(b.w_qkv), T, D, 3 * D);
        detail::layernorm_backward(cache.dx.data(), grads.data() + b.ln1_g, grads.data() + b.ln1_b,
                                   cache.d_branch.data(), x_in, lc.ln1_mean.data(), lc.ln1_rstd.data(),
                                   params.ptr(b.ln1_g), T, D);
    }

    for (int t = 0; t < T; ++t) {
        const double* dxt = cache.dx.data() + static_cast<size_t>(t) * D;
        double* dwte = grads.data() + off.wte + static_cast<size_t>(seq[t]) * D;
        double* dwpe = grads.data() + off.wpe + static_cast<size_t>(t) * D;
        for (int i = 0; i < D; ++i) {
            dwte[i] += dxt[i];
            dwpe[i] += dxt[i];
        }
    }
}

// -------------------------------------------------------------- objectives

/// A differentiable scalar built from the logits matrix. Fills
/// d(scalar)/d(logits) (accumulating) and returns the scalar.
using LogitObjective =
    std::function<double(const dvec& logits, int T, int V, dvec& dlogits)>;

/// Value + exact gradient of an objective over one sequence. Gradients are
/// accumulated into `grads` so batched objectives sum naturally.
inline double loss_and_grad(const PolicyParams& params, std::span<const int> seq,
                            const LogitObjective& objective, GradBuffer& grads, ForwardCache& cache) {
    forward(params, seq, cache);
    dvec dlogits(cache.logits.size(), 0.0);
    const double value = objective(cache.logits, cache.T, params.config.vocab_size, dlogits);
    require(std::isfinite(value), "numeric", "objective evaluated to a non-finite value");
    backward(params, seq, cache, dlogits, grads);
    return value;
}

inline double loss_and_grad(const PolicyParams& params, std::span<const int> seq,
                            const LogitObjective& objective, GradBuffer& grads) {
    ForwardCache cache;
    return loss_and_grad(params, seq, objective, grads, cache);
}

/// Objective value alone (no gradient). The finite-difference oracle in the
/// tests is built on this path.
inline double objective_value(const PolicyParams& params, std::span<const int> seq,
                              const LogitObjective& objective, ForwardCache& cache) {
    forward(params, seq, cache);
    dvec dlogits(cache.logits.size(), 0.0);
    return objective(cache.logits, cache.T, params.config.vocab_size, dlogits);
}

/// Teacher-forced cross-entropy at the given target positions:
/// scale * sum_p -log softmax(logits[p-1])[target_p].
inline LogitObjective masked_cross_entropy(std::vector<int> positions, std::vector<int> targets,
                                           double scale) {
    require(positions.size() == targets.size(), "format", "positions/targets size mismatch");
    return [positions = std::move(positions), targets = std::move(targets), scale](
               const dvec& logits, int T, int V, dvec& dlogits) {
        double loss = 0.0;
        dvec probs(static_cast<size_t>(V), 0.0);
        for (size_t i = 0; i < positions.size(); ++i) {
            const int pos = positions[i];
            const int target = targets[i];
            require(pos >= 1 && pos < T, "format", "cross-entropy position out of range");
            require(target >= 0 && target < V, "format", "cross-entropy target out of range");
            const double* row = logits.data() + static_cast<size_t>(pos - 1) * V;
            loss -= detail::log_softmax_at(row, 0, V, target);
            detail::softmax_row(row, 0, V, probs.data());
            double* drow = dlogits.data() + static_cast<size_t>(pos - 1) * V;
            for (int v = 0; v < V; ++v) {
                drow[v] += scale * probs[static_cast<size_t>(v)];
            }
            drow[target] -= scale;
        }
        return scale * loss;
    };
}

/// Sum of objectives; the gradient of a sum is the sum of gradients.
inline LogitObjective sum_objectives(std::vector<LogitObjective> parts) {
    return [parts = std::move(parts)](const dvec& logits, int T, int V, dvec& dlogits) {
        double total = 0.0;
        for (const LogitObjective& part : parts) {
            total += part(logits, T, V, dlogits);
        }
        return total;
    };
}

// ----------------------------------------------------- teacher-forced probs

/// log p(seq[pos] | seq[<pos]) over the full vocabulary at each requested
/// position (positions must be >= 1).
inline std::vector<double> sequence_logprobs(const PolicyParams& params, std::span<const int> seq,
                                             std::span<const int> positions, ForwardCache& cache) {
    forward(params, seq, cache);
    const int V = params.config.vocab_size;
    std::vector<double> out;
    out.reserve(positions.size());
    for (int pos : positions) {
        require(pos >= 1 && pos < cache.T, "format", "logprob position out of range");
        out.push_back(detail::log_softmax_at(cache.logits_row(pos - 1, V), 0, V, seq[pos]));
    }
    return out;
}

inline std::vector<double> sequence_logprobs(const PolicyParams& params, std::span<const int> seq,
                                             std::span<const int> positions) {
    ForwardCache cache;
    return sequence_logprobs(params, seq, positions, cache);
}

/// Same, but with the next-token distribution restricted to [lo, hi) — the
/// convention for image tokens, whose sampling distribution is range-masked.
inline std::vector<double> restricted_logprobs(const PolicyParams& params, std::span<const int> seq,
                                               std::span<const int> positions, int lo, int hi,
                                               ForwardCache& cache) {
    forward(params, seq, cache);
    const int V = params.config.vocab_size;
    require(lo >= 0 && hi <= V && lo < hi, "format", "bad restriction range");
    std::vector<double> out;
    out.reserve(positions.size());
    for (int pos : positions) {
        require(pos >= 1 && pos < cache.T, "format", "logprob position out of range");
        require(seq[pos] >= lo && seq[pos] < hi, "format", "target outside the restricted range");
        out.push_back(detail::log_softmax_at(cache.logits_row(pos - 1, V), lo, hi, seq[pos]));
    }
    return out;
}

// ------------------------------------------------------ incremental decode

/// Straightforward KV cache for incremental decoding.
struct KvCache {
    ModelConfig cfg;
    int len = 0;
    std::vector<dvec> k, v; // per layer, [context, D]
    dvec x, ln, qkv_row, att_row, scores, fc_row, gelu_row;
    dvec logits;

    explicit KvCache(const ModelConfig& config) : cfg(config) {
        const size_t D = static_cast<size_t>(cfg.d_model);
        const size_t ctx = static_cast<size_t>(cfg.context);
        k.assign(static_cast<size_t>(cfg.n_layers), dvec(ctx * D, 0.0));
        v.assign(static_cast<size_t>(cfg.n_layers), dvec(ctx * D, 0.0));
        x.assign(D, 0.0);
        ln.assign(D, 0.0);
        qkv_row.assign(3 * D, 0.0);
        att_row.assign(D, 0.0);
        scores.assign(ctx, 0.0);
        fc_row.assign(static_cast<size_t>(cfg.d_ff()), 0.0);
        gelu_row.assign(static_cast<size_t>(cfg.d_ff()), 0.0);
        logits.assign(static_cast<size_t>(cfg.vocab_size), 0.0);
    }

    void reset() { len = 0; }
};

namespace detail {

inline void layernorm_row(double* out, const double* x, const double* g, const double* b, int D) {
    double mu = 0.0;
    for (int i = 0; i < D; ++i) {
        mu += x[i];
    }
    mu /= D;
    double var = 0.0;
    for (int i = 0; i < D; ++i) {
        const double d = x[i] - mu;
        var += d * d;
    }
    var /= D;
    const double s = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < D; ++i) {
        out[i] = (x[i] - mu) * s * g[i] + b[i];
    }
}

} // namespace detail

/// Feeds one token; afterwards kv.logits holds the next-token logits row.
inline void step_forward(const PolicyParams& params, int token, KvCache& kv) {
    const ModelConfig& cfg = params.config;
    require(kv.len < cfg.context, "format", "KV cache is full");
    require(token >= 0 && token < cfg.vocab_size, "format", "token id outside the vocabulary");
    const int D = cfg.d_model;
    const int F = cfg.d_ff();
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& off = params.offsets();
    const int pos = kv.len;

    const double* wte = params.ptr(off.wte) + static_cast<size_t>(token) * D;
    const double* wpe = params.ptr(off.wpe) + static_cast<size_t>(pos) * D;
    for (int i = 0; i < D; ++i) {
        kv.x[i] = wte[i] + wpe[i];
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& b = off.blocks[static_cast<size_t>(l)];
        detail::layernorm_row(kv.ln.data(), kv.x.data(), params.ptr(b.ln1_g), params.ptr(b.ln1_b), D);
        {
            detail::ConstMatMap W(params.ptr(b.w_qkv), D, 3 * D);
            detail::VecMap(kv.qkv_row.data(), 3 * D).noalias() =
                W.transpose() * detail::ConstVecMap(kv.ln.data(), D);
            for (int i = 0; i < 3 * D; ++i) {
                kv.qkv_row[i] += params.ptr(b.b_qkv)[i];
            }
        }
        double* krow = kv.k[static_cast<size_t>(l)].data() + static_cast<size_t>(pos) * D;
        double* vrow = kv.v[static_cast<size_t>(l)].data() + static_cast<size_t>(pos) * D;
        for (int i = 0; i < D; ++i) {
            krow[i] = kv.qkv_row[D + i];
            vrow[i] = kv.qkv_row[2 * D + i];
        }
        // attention over the cached keys, in position order
        for (int h = 0; h < H; ++h) {
            const double* q = kv.qkv_row.data() + static_cast<size_t>(h) * hd;
            double* scores = kv.scores.data();
            for (int j = 0; j <= pos; ++j) {
                const double* kj =
                    kv.k[static_cast<size_t>(l)].data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * hd;
                double s = 0.0;
                for (int i = 0; i < hd; ++i) {
                    s += q[i] * kj[i];
                }
                scores[j] = s * inv_sqrt;
            }
            detail::softmax_row(scores, 0, pos + 1, scores);
            double* o = kv.att_row.data() + static_cast<size_t>(h) * hd;
            std::fill(o, o + hd, 0.0);
            for (int j = 0; j <= pos; ++j) {
                const double* vj =
                    kv.v[static_cast<size_t>(l)].data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * hd;
                const double w = scores[j];
                for (int i = 0; i < hd; ++i) {
                    o[i] += w * vj[i];
                }
            }
        }
        {
            detail::ConstMatMap W(params.ptr(b.w_att_out), D, D);
            detail::VecMap(kv.ln.data(), D).noalias() =
                W.transpose() * detail::ConstVecMap(kv.att_row.data(), D);
            for (int i = 0; i < D; ++i) {
                kv.x[i] += kv.ln[i] + params.ptr(b.b_att_out)[i];
            }
        }
        detail::layernorm_row(kv.ln.data(), kv.x.data(), params.ptr(b.ln2_g), params.ptr(b.ln2_b), D);
        {
            detail::ConstMatMap W(params.ptr(b.w_in), D, F);
            detail::VecMap(kv.fc_row.data(), F).noalias() =
                W.transpose() * detail::ConstVecMap(kv.ln.data(), D);
            for (int i = 0; i < F; ++i) {
                kv.fc_row[i] += params.ptr(b.b_in)[i];
            }
            detail::gelu_forward(kv.gelu_row.data(), kv.fc_row.data(), static_cast<size_t>(F));
            detail::ConstMatMap W2(params.ptr(b.w_out), F, D);
            detail::VecMap(kv.ln.data(), D).noalias() =
                W2.transpose() * detail::ConstVecMap(kv.gelu_row.data(), F);
            for (int i = 0; i < D; ++i) {
                kv.x[i] += kv.ln[i] + params.ptr(b.b_out)[i];
            }
        }
    }

    detail::layernorm_row(kv.ln.data(), kv.x.data(), params.ptr(off.lnf_g), params.ptr(off.lnf_b), D);
    {
        detail::ConstMatMap W(params.ptr(off.head_w), D, cfg.vocab_size);
        detail::VecMap(kv.logits.data(), cfg.vocab_size).noalias() =
            W.transpose() * detail::ConstVecMap(kv.ln.data(), D);
        for (int i = 0; i < cfg.vocab_size; ++i) {
            kv.logits[i] += params.ptr(off.head_b)[i];
        }
    }
    ++kv.len;
}

// ----------------------------------------------------------------- sampling

/// One sampled image-generation rollout with the log-probabilities needed by
/// the trainer's importance ratio.
struct Trajectory {
    PromptTokens prompt;
    ImageTokens image;
    std::vector<double> old_logprobs; // unscaled (temperature-1) policy logprobs
    uint64_t seed = 0;
    double temperature = 1.0;
};

/// Samples L_I image tokens after [BOS, T, BOI], with logits restricted to
/// the image-token range. Sampling uses temperature-scaled probabilities;
/// old_logprobs always record the unscaled policy.
inline Trajectory sample_image_tokens(const PolicyParams& params, const PromptTokens& prompt,
                                      const Vocab& vocab, uint64_t seed, double temperature,
                                      KvCache& kv) {
    require(temperature > 0.0, "config", "temperature must be positive");
    const GenerationLayout layout = assemble_generation_sequence(prompt, vocab, params.config.context);
    Rng rng(seed);
    kv.reset();
    for (int token : layout.prefix) {
        step_forward(params, token, kv);
    }

    const int lo = vocab.image_lo();
    const int hi = vocab.image_hi();
    const int n = hi - lo;
    Trajectory traj;
    traj.prompt = prompt;
    traj.seed = seed;
    traj.temperature = temperature;
    std::vector<double> probs(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < layout.image_len; ++j) {
        const double* row = kv.logits.data();
        const double m = detail::row_max(row, lo, hi);
        double z1 = 0.0; // unscaled normalizer
        double zt = 0.0; // temperature-scaled normalizer
        for (int i = 0; i < n; ++i) {
            z1 += std::exp(row[lo + i] - m);
            probs[static_cast<size_t>(i)] = std::exp((row[lo + i] - m) / temperature);
            zt += probs[static_cast<size_t>(i)];
        }
        const double u = rng.uniform01() * zt;
        int pick = n - 1;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            acc += probs[static_cast<size_t>(i)];
            if (u < acc) {
                pick = i;
                break;
            }
        }
        const int token = lo + pick;
        traj.image.ids.push_back(token);
        traj.old_logprobs.push_back((row[token] - m) - std::log(z1));
        step_forward(params, token, kv);
    }
    return traj;
}

/// Per-step argmax decoding over the image range (the temperature -> 0 limit).
inline ImageTokens greedy_decode_image(const PolicyParams& params, const PromptTokens& prompt,
                                       const Vocab& vocab, KvCache& kv) {
    const GenerationLayout layout = assemble_generation_sequence(prompt, vocab, params.config.context);
    kv.reset();
    for (int token : layout.prefix) {
        step_forward(params, token, kv);
    }
    ImageTokens image;
    for (int j = 0; j < layout.image_len; ++j) {
        int best = vocab.image_lo();
        for (int i = vocab.image_lo() + 1; i < vocab.image_hi(); ++i) {
            if (kv.logits[static_cast<size_t>(i)] > kv.logits[static_cast<size_t>(best)]) {
                best = i;
            }
        }
        image.ids.push_back(best);
        step_forward(params, best, kv);
    }
    return image;
}

} // namespace umm
