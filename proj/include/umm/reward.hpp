// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "umm/model.hpp"
#include "umm/scene.hpp"
#include "umm/stats.hpp"
#include "umm/vocab.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Token-level model-intrinsic reward: teacher-forced probabilities of the
// ground-truth prompt conditioned on a generated image, aggregated by
// geometric mean so the reward is length-invariant.
// ---------------------------------------------------------------------------

struct RewardReport {
    std::vector<double> per_token_probs; // in (0, 1]
    double reward = 0.0;                 // geometric mean, in (0, 1]
    int prompt_length = 0;
    std::string scorer_id;
};

/// Geometric mean accumulated in log space; never underflows to zero for
/// finite logits.
inline double geometric_mean(std::span<const double> probs) {
    require(!probs.empty(), "format", "geometric mean of an empty range");
    double log_sum = 0.0;
    for (double p : probs) {
        require(p > 0.0, "numeric", "geometric mean requires positive probabilities");
        log_sum += std::log(p);
    }
    return std::exp(log_sum / static_cast<double>(probs.size()));
}

inline RewardReport intrinsic_reward(const PolicyParams& scorer, const SystemPrefix& sys,
                                     const ImageTokens& image, const PromptTokens& prompt,
                                     const Vocab& vocab, ForwardCache& cache,
                                     const std::string& scorer_id = "") {
    const ScoringLayout layout =
        assemble_scoring_sequence(sys, image, prompt, vocab, scorer.config.context);
    const auto logprobs = sequence_logprobs(scorer, layout.ids, layout.target_positions, cache);

    RewardReport report;
    report.prompt_length = prompt.length();
    report.scorer_id = scorer_id;
    report.per_token_probs.reserve(logprobs.size());
    double log_sum = 0.0;
    for (double lp : logprobs) {
        report.per_token_probs.push_back(std::exp(lp));
        log_sum += lp;
    }
    report.reward = std::exp(log_sum / static_cast<double>(logprobs.size()));
    return report;
}

inline RewardReport intrinsic_reward(const PolicyParams& scorer, const SystemPrefix& sys,
                                     const ImageTokens& image, const PromptTokens& prompt,
                                     const Vocab& vocab, const std::string& scorer_id = "") {
    ForwardCache cache;
    return intrinsic_reward(scorer, sys, image, prompt, vocab, cache, scorer_id);
}

/// Rewards for a group of G images of the same prompt. Items are independent,
/// so the batched path may run them on parallel workers; per-item results are
/// identical to sequential evaluation.
inline std::vector<double> group_rewards(const PolicyParams& scorer, const SystemPrefix& sys,
                                         const PromptTokens& prompt,
                                         const std::vector<ImageTokens>& images, const Vocab& vocab,
                                         bool parallel = true) {
    std::vector<double> rewards(images.size(), 0.0);
#pragma omp parallel for schedule(dynamic) if (parallel)
    for (long i = 0; i < static_cast<long>(images.size()); ++i) {
        ForwardCache cache;
        rewards[static_cast<size_t>(i)] =
            intrinsic_reward(scorer, sys, images[static_cast<size_t>(i)], prompt, vocab, cache).reward;
    }
    return rewards;
}

// ------------------------------------------------------- semantics ablation

struct SensitivityEntry {
    std::string category;      // "color", "count", "position", or "combined"
    bool applicable = false;   // false when ablation left the prompt unchanged
    std::string ablated_prompt;
    double reward = 0.0;
    double delta = 0.0;        // reward - full_reward
    double relative = 0.0;     // reward / full_reward
};

struct SensitivityReport {
    std::string prompt;
    double full_reward = 0.0;
    std::vector<SensitivityEntry> entries; // one per category plus "combined"
};

/// Reward deltas after deleting count / color / region terms, plus the
/// all-categories ablation.
inline SensitivityReport sensitivity_sweep(const PolicyParams& scorer, const SystemPrefix& sys,
                                           const std::string& prompt, const ImageTokens& image,
                                           const Vocab& vocab,
                                           std::span<const PromptCategory> categories) {
    ForwardCache cache;
    SensitivityReport report;
    report.prompt = prompt;
    report.full_reward =
        intrinsic_reward(scorer, sys, image, encode_text(prompt, vocab), vocab, cache).reward;

    auto evaluate = [&](const std::string& name, const std::string& ablated) {
        SensitivityEntry entry;
        entry.category = name;
        entry.ablated_prompt = ablated;
        entry.applicable = ablated != prompt;
        if (entry.applicable) {
            entry.reward =
                intrinsic_reward(scorer, sys, image, encode_text(ablated, vocab), vocab, cache).reward;
        } else {
            entry.reward = report.full_reward;
        }
        entry.delta = entry.reward - report.full_reward;
        entry.relative = entry.reward / report.full_reward;
        report.entries.push_back(entry);
    };

    std::string combined = prompt;
    for (PromptCategory category : categories) {
        evaluate(prompt_category_name(category), ablate_prompt(prompt, category, vocab.world));
        combined = ablate_prompt(combined, category, vocab.world);
    }
    evaluate("combined", combined);
    return report;
}

// ---------------------------------------------------------------- JSON line

/// One JSON-lines record per reward evaluation.
inline std::string reward_report_jsonl(const RewardReport& report, const std::string& prompt,
                                       const ImageTokens& image) {
    nlohmann::ordered_json j;
    j["prompt"] = prompt;
    j["image_hash"] = hex64(fnv1a64(image.ids));
    j["per_token_probs"] = report.per_token_probs;
    j["reward"] = report.reward;
    j["scorer"] = report.scorer_id;
    return j.dump();
}

} // namespace umm
