// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "support/gradcheck.hpp"
#include "umm/grpo.hpp"
#include "umm/model.hpp"

using namespace umm;

namespace {

// Random tiny configurations keep the finite-difference sweep affordable
// while still covering multi-head, multi-layer shapes.
ModelConfig random_tiny_config(Rng& rng) {
    ModelConfig cfg;
    cfg.vocab_size = 6 + rng.below_int(7); // 6..12
    cfg.context = 12 + rng.below_int(5);   // 12..16
    cfg.n_heads = 1 + rng.below_int(2);    // 1..2
    cfg.d_model = cfg.n_heads * (2 + rng.below_int(3)); // head_dim 2..4
    cfg.n_layers = 1 + rng.below_int(2);   // 1..2
    return cfg;
}

} // namespace

TEST_CASE("analytic cross-entropy gradients match central finite differences") {
    Rng rng(2024);
    for (int trial = 0; trial < 5; ++trial) {
        const ModelConfig cfg = random_tiny_config(rng);
        PolicyParams params = init_params(rng, cfg);
        // larger-than-init weights exercise nonlinear regions
        for (double& w : params.data) {
            w += 0.25 * rng.normal();
        }
        const int len = 6 + rng.below_int(cfg.context - 6);
        TokenSequence seq;
        for (int i = 0; i < len; ++i) {
            seq.push_back(rng.below_int(cfg.vocab_size));
        }
        std::vector<int> positions;
        std::vector<int> targets;
        for (int p = 1; p < len; p += 2) {
            positions.push_back(p);
            targets.push_back(seq[p]);
        }
        const LogitObjective objective =
            masked_cross_entropy(positions, targets, 1.0 / positions.size());
        const auto result = testing::check_gradient(params, seq, objective, 1e-4);
        CAPTURE(trial, cfg.vocab_size, cfg.d_model, cfg.n_layers, result.worst_index,
                result.analytic, result.numeric);
        REQUIRE(result.max_rel_err < 1e-4);
    }
}

TEST_CASE("clipped-surrogate and KL gradients match central finite differences") {
    Rng rng(4096);
    for (int trial = 0; trial < 5; ++trial) {
        const ModelConfig cfg = random_tiny_config(rng);
        PolicyParams params = init_params(rng, cfg);
        PolicyParams reference = init_params(rng, cfg);
        for (double& w : params.data) {
            w += 0.25 * rng.normal();
        }
        for (double& w : reference.data) {
            w += 0.25 * rng.normal();
        }
        const int len = 8 + rng.below_int(cfg.context - 8);
        // restrict the "image range" to an arbitrary middle band of the vocab
        const int lo = 1;
        const int hi = cfg.vocab_size - 1;
        TokenSequence seq;
        for (int i = 0; i < len; ++i) {
            seq.push_back(lo + rng.below_int(hi - lo));
        }
        std::vector<int> positions;
        std::vector<int> targets;
        std::vector<double> old_lps;
        for (int p = 2; p < len; p += 2) {
            positions.push_back(p);
            targets.push_back(seq[p]);
            old_lps.push_back(-1.0 - rng.uniform01()); // keep most ratios inside the clip band
        }
        // mix of positive and negative advantages across trials
        const double advantage = (trial % 2 == 0 ? 1.0 : -1.0) * (0.5 + rng.uniform01());
        const bool sequence_mode = trial == 4;
        const LogitObjective surrogate =
            clipped_surrogate_objective(positions, targets, old_lps, advantage, 0.2, lo, hi,
                                        sequence_mode, 1.0 / positions.size());
        const auto surr_result = testing::check_gradient(params, seq, surrogate, 1e-4);
        CAPTURE(trial, sequence_mode, advantage, surr_result.analytic, surr_result.numeric);
        REQUIRE(surr_result.max_rel_err < 1e-4);

        // KL penalty against the frozen reference rows
        ForwardCache ref_cache;
        forward(reference, seq, ref_cache);
        const int V = cfg.vocab_size;
        std::vector<double> ref_rows(positions.size() * static_cast<size_t>(V), 0.0);
        for (size_t k = 0; k < positions.size(); ++k) {
            const double* row = ref_cache.logits_row(positions[k] - 1, V);
            const double m = detail::row_max(row, 0, V);
            const double lz = detail::row_logsumexp(row, 0, V, m);
            for (int v = 0; v < V; ++v) {
                ref_rows[k * static_cast<size_t>(V) + static_cast<size_t>(v)] = (row[v] - m) - lz;
            }
        }
        const LogitObjective kl =
            kl_penalty_objective(positions, ref_rows, 1.0 / positions.size());
        const auto kl_result = testing::check_gradient(params, seq, kl, 1e-4);
        CAPTURE(trial, kl_result.analytic, kl_result.numeric);
        REQUIRE(kl_result.max_rel_err < 1e-4);
    }
}
