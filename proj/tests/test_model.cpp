// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "umm/model.hpp"
#include "umm/scene.hpp"
#include "umm/vocab.hpp"

using namespace umm;

namespace {

ModelConfig tiny_config(int vocab_size = 12) {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.context = 16;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    return cfg;
}

TokenSequence random_sequence(Rng& rng, int len, int vocab_size) {
    TokenSequence seq;
    for (int i = 0; i < len; ++i) {
        seq.push_back(rng.below_int(vocab_size));
    }
    return seq;
}

} // namespace

TEST_CASE("init is deterministic and produces finite logits") {
    const ModelConfig cfg = tiny_config();
    Rng a(1);
    Rng b(1);
    const PolicyParams pa = init_params(a, cfg);
    const PolicyParams pb = init_params(b, cfg);
    REQUIRE(pa.data == pb.data);

    Rng rng(2);
    const TokenSequence seq = random_sequence(rng, 10, cfg.vocab_size);
    ForwardCache cache;
    forward(pa, seq, cache);
    REQUIRE(cache.T == 10);
    REQUIRE(cache.logits.size() == 10u * cfg.vocab_size);
    for (double v : cache.logits) {
        REQUIRE(std::isfinite(v));
    }
}

TEST_CASE("softmax of every logits row sums to one") {
    const ModelConfig cfg = tiny_config();
    Rng rng(3);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, 12, cfg.vocab_size);
    ForwardCache cache;
    forward(params, seq, cache);
    std::vector<double> probs(static_cast<size_t>(cfg.vocab_size));
    for (int t = 0; t < cache.T; ++t) {
        detail::softmax_row(cache.logits_row(t, cfg.vocab_size), 0, cfg.vocab_size, probs.data());
        double sum = 0.0;
        for (double p : probs) {
            sum += p;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("softmax helpers survive extreme logits") {
    std::vector<double> row = {700.0, -700.0, 650.0, 0.0};
    std::vector<double> probs(4);
    detail::softmax_row(row.data(), 0, 4, probs.data());
    double sum = 0.0;
    for (double p : probs) {
        REQUIRE(std::isfinite(p));
        sum += p;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(token_prob(row, 0) > 0.0);
}

TEST_CASE("fresh params give a near-uniform next-token distribution") {
    ModelConfig cfg;
    cfg.vocab_size = 59;
    Rng rng(5);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, 100, cfg.vocab_size);
    ForwardCache cache;
    forward(params, seq, cache);
    double mean_prob = 0.0;
    int n = 0;
    for (int t = 0; t < cache.T; ++t) {
        const int target = rng.below_int(cfg.vocab_size);
        mean_prob += token_prob(
            std::span<const double>(cache.logits_row(t, cfg.vocab_size), cfg.vocab_size), target);
        ++n;
    }
    mean_prob /= n;
    const double uniform = 1.0 / cfg.vocab_size;
    REQUIRE(mean_prob > 0.7 * uniform);
    REQUIRE(mean_prob < 1.3 * uniform);
}

TEST_CASE("logits are causal: suffix edits never change earlier rows") {
    const ModelConfig cfg = tiny_config();
    Rng rng(7);
    const PolicyParams params = init_params(rng, cfg);
    for (int trial = 0; trial < 20; ++trial) {
        TokenSequence seq = random_sequence(rng, 12, cfg.vocab_size);
        ForwardCache base_cache;
        forward(params, seq, base_cache);

        const int edit_at = 1 + rng.below_int(11);
        TokenSequence edited = seq;
        for (int j = edit_at; j < 12; ++j) {
            edited[j] = rng.below_int(cfg.vocab_size);
        }
        ForwardCache edited_cache;
        forward(params, edited, edited_cache);
        for (int t = 0; t < edit_at; ++t) {
            for (int v = 0; v < cfg.vocab_size; ++v) {
                const double a = base_cache.logits_row(t, cfg.vocab_size)[v];
                const double b = edited_cache.logits_row(t, cfg.vocab_size)[v];
                REQUIRE(a == Catch::Approx(b).margin(1e-12));
            }
        }

        // appending a token is a pure extension
        TokenSequence longer = seq;
        longer.push_back(rng.below_int(cfg.vocab_size));
        ForwardCache longer_cache;
        forward(params, longer, longer_cache);
        for (int t = 0; t < 12; ++t) {
            for (int v = 0; v < cfg.vocab_size; ++v) {
                const double a = base_cache.logits_row(t, cfg.vocab_size)[v];
                const double b = longer_cache.logits_row(t, cfg.vocab_size)[v];
                REQUIRE(a == Catch::Approx(b).margin(1e-12));
            }
        }
    }
}

TEST_CASE("context overflow is rejected") {
    const ModelConfig cfg = tiny_config();
    Rng rng(9);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, cfg.context + 1, cfg.vocab_size);
    ForwardCache cache;
    REQUIRE_THROWS_AS(forward(params, seq, cache), Error);
}

TEST_CASE("incremental decoding matches the full forward pass") {
    const ModelConfig cfg = tiny_config();
    Rng rng(11);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, 14, cfg.vocab_size);

    ForwardCache cache;
    forward(params, seq, cache);
    KvCache kv(cfg);
    for (int t = 0; t < 14; ++t) {
        step_forward(params, seq[t], kv);
        for (int v = 0; v < cfg.vocab_size; ++v) {
            REQUIRE(kv.logits[static_cast<size_t>(v)] ==
                    Catch::Approx(cache.logits_row(t, cfg.vocab_size)[v]).margin(1e-10));
        }
    }
}

TEST_CASE("sequence_logprobs agrees with step-by-step softmax selection") {
    const ModelConfig cfg = tiny_config();
    Rng rng(13);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, 12, cfg.vocab_size);
    std::vector<int> positions = {1, 3, 7, 11};
    const auto lps = sequence_logprobs(params, seq, positions);
    REQUIRE(lps.size() == positions.size());

    KvCache kv(cfg);
    std::vector<double> by_steps;
    for (int t = 0; t < 12; ++t) {
        if (t > 0 && std::find(positions.begin(), positions.end(), t) != positions.end()) {
            by_steps.push_back(std::log(token_prob(kv.logits, seq[t])));
        }
        step_forward(params, seq[t], kv);
    }
    REQUIRE(by_steps.size() == lps.size());
    for (size_t i = 0; i < lps.size(); ++i) {
        REQUIRE(lps[i] == Catch::Approx(by_steps[i]).margin(1e-10));
        REQUIRE(std::exp(lps[i]) > 0.0);
        REQUIRE(std::exp(lps[i]) <= 1.0);
    }
}

TEST_CASE("zeroed output projection gives exactly uniform logprobs") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    Rng rng(15);
    PolicyParams params = init_params(rng, cfg);
    const ParamLayout layout(cfg);
    const TensorSpec& head_w = layout.find("head.w");
    const TensorSpec& head_b = layout.find("head.b");
    std::fill_n(params.ptr(head_w.offset), head_w.size, 0.0);
    std::fill_n(params.ptr(head_b.offset), head_b.size, 0.0);

    const TokenSequence seq = random_sequence(rng, 9, cfg.vocab_size);
    std::vector<int> positions = {1, 4, 8};
    for (double lp : sequence_logprobs(params, seq, positions)) {
        REQUIRE(lp == Catch::Approx(-std::log(static_cast<double>(cfg.vocab_size))).margin(1e-12));
    }
}

TEST_CASE("image sampling is deterministic, in range, and greedy at the cold limit") {
    WorldConfig world;
    const Vocab vocab = build_vocab(world);
    ModelConfig cfg;
    cfg.vocab_size = vocab.size;
    Rng rng(17);
    const PolicyParams params = init_params(rng, cfg);
    const PromptTokens prompt = encode_text("one red square in the top left", vocab);

    KvCache kv(cfg);
    const Trajectory a = sample_image_tokens(params, prompt, vocab, 99, 1.0, kv);
    const Trajectory b = sample_image_tokens(params, prompt, vocab, 99, 1.0, kv);
    REQUIRE(a.image.ids == b.image.ids);
    REQUIRE(a.old_logprobs == b.old_logprobs);
    REQUIRE(a.image.length() == world.n_cells());
    for (double lp : a.old_logprobs) {
        REQUIRE(lp <= 0.0);
    }
    REQUIRE_NOTHROW(decode_image(a.image, vocab));

    const Trajectory cold = sample_image_tokens(params, prompt, vocab, 123, 1e-9, kv);
    const ImageTokens greedy = greedy_decode_image(params, prompt, vocab, kv);
    REQUIRE(cold.image.ids == greedy.ids);
    // old_logprobs record the unscaled policy even at cold temperature
    const auto layout = assemble_generation_sequence(prompt, vocab, cfg.context);
    const auto seq = layout.with_image(cold.image, vocab);
    std::vector<int> positions;
    for (int j = 0; j < layout.image_len; ++j) {
        positions.push_back(layout.image_begin() + j);
    }
    ForwardCache cache;
    const auto new_lps =
        restricted_logprobs(params, seq, positions, vocab.image_lo(), vocab.image_hi(), cache);
    REQUIRE(new_lps.size() == cold.old_logprobs.size());
    for (size_t i = 0; i < new_lps.size(); ++i) {
        REQUIRE(new_lps[i] == Catch::Approx(cold.old_logprobs[i]).margin(1e-10));
    }
}

TEST_CASE("masked objectives compose linearly") {
    const ModelConfig cfg = tiny_config();
    Rng rng(19);
    const PolicyParams params = init_params(rng, cfg);
    const TokenSequence seq = random_sequence(rng, 10, cfg.vocab_size);

    const LogitObjective a = masked_cross_entropy({1, 2}, {seq[1], seq[2]}, 0.5);
    const LogitObjective b = masked_cross_entropy({5, 7}, {seq[5], seq[7]}, 0.5);
    const LogitObjective both = sum_objectives({a, b});

    GradBuffer grad_a(params.data.size(), 0.0);
    GradBuffer grad_b(params.data.size(), 0.0);
    GradBuffer grad_both(params.data.size(), 0.0);
    const double va = loss_and_grad(params, seq, a, grad_a);
    const double vb = loss_and_grad(params, seq, b, grad_b);
    const double vboth = loss_and_grad(params, seq, both, grad_both);
    REQUIRE(vboth == Catch::Approx(va + vb).margin(1e-12));
    for (size_t i = 0; i < grad_both.size(); ++i) {
        REQUIRE(grad_both[i] == Catch::Approx(grad_a[i] + grad_b[i]).margin(1e-10));
    }

    // constant objective -> zero gradient
    const LogitObjective constant = [](const dvec&, int, int, dvec&) { return 3.25; };
    GradBuffer grad_c(params.data.size(), 0.0);
    const double vc = loss_and_grad(params, seq, constant, grad_c);
    REQUIRE(vc == 3.25);
    for (double g : grad_c) {
        REQUIRE(g == 0.0);
    }
}
