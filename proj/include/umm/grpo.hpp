// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "umm/checkpoint.hpp"
#include "umm/error.hpp"
#include "umm/model.hpp"
#include "umm/optim.hpp"
#include "umm/pretrain.hpp"
#include "umm/reward.hpp"
#include "umm/stats.hpp"
#include "umm/vocab.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Self-supervised GRPO: group rollouts scored by the model's own
// understanding branch, within-group standardized advantages, a clipped
// importance-ratio surrogate, and an exact full-vocabulary KL penalty to the
// frozen pretrained reference. No value function, no external reward model.
// ---------------------------------------------------------------------------

struct GrpoConfig {
    int group_size = 8;       // G
    double clip_eps = 0.2;    // epsilon
    double kl_weight = 0.01;  // beta
    double learning_rate = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int updates_per_batch = 1;
    int total_steps = 300;
    uint64_t seed = 1;
    double temperature = 1.0; // rollout sampling; rewards always use the unscaled policy
    bool sequence_ratio = false;          // trajectory-level ratio instead of per-token
    bool reward_with_live_policy = false; // score with the live policy instead of the snapshot
    int checkpoint_every = 0;             // 0 disables periodic checkpoints
    int eval_every = 0;                   // 0 disables periodic mini-GenEval evals
    int eval_records = 64;
    int eval_samples_per_prompt = 2;
    uint64_t eval_seed = 9000;

    void validate() const {
        require(group_size >= 2, "config", "group_size must be >= 2");
        require(clip_eps > 0.0 && clip_eps < 1.0, "config", "clip_eps must be in (0, 1)");
        require(kl_weight >= 0.0, "config", "kl_weight must be >= 0");
        require(learning_rate > 0.0, "config", "learning_rate must be positive");
        require(updates_per_batch >= 1, "config", "updates_per_batch must be >= 1");
        require(total_steps >= 1, "config", "total_steps must be >= 1");
        require(temperature > 0.0, "config", "temperature must be positive");
        require(eval_records >= 1 && eval_samples_per_prompt >= 1, "config",
                "eval sizes must be >= 1");
    }
};

/// The pi_theta / pi_old / pi_ref triple. The snapshot is refreshed only at
/// rollout boundaries; the reference is never touched.
struct PolicyHandles {
    PolicyParams live;
    PolicyParams rollout_snapshot;
    PolicyParams reference;

    static PolicyHandles from_base(const PolicyParams& base) {
        return PolicyHandles{base, base, base};
    }
};

// ------------------------------------------------------------ advantages

inline constexpr double kAdvantageStdFloor = 1e-8;

/// Group-standardized rewards with population std and an additive floor.
/// Degenerate (all-equal) groups yield the zero vector.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
    require(rewards.size() >= 2, "config", "advantage groups need at least two rewards");
    const double mu = mean_of(rewards);
    const double sigma = population_std(rewards);
    std::vector<double> advantages(rewards.size(), 0.0);
    for (size_t i = 0; i < rewards.size(); ++i) {
        advantages[i] = (rewards[i] - mu) / (sigma + kAdvantageStdFloor);
    }
    return advantages;
}

/// Elementwise importance ratio exp(new - old); exactly 1 where new == old.
inline std::vector<double> policy_ratio(std::span<const double> new_logprobs,
                                        std::span<const double> old_logprobs) {
    require(new_logprobs.size() == old_logprobs.size(), "format",
            "ratio vectors have different lengths");
    std::vector<double> ratios(new_logprobs.size(), 0.0);
    for (size_t i = 0; i < ratios.size(); ++i) {
        ratios[i] = std::exp(new_logprobs[i] - old_logprobs[i]);
    }
    return ratios;
}

// --------------------------------------------------------------- exact KL

/// KL(live || reference) over the full vocabulary of the next-token
/// distribution at each target position (the row that predicts it).
inline std::vector<double> exact_kl(const PolicyParams& live, const PolicyParams& reference,
                                    std::span<const int> seq, std::span<const int> positions) {
    ForwardCache live_cache;
    ForwardCache ref_cache;
    forward(live, seq, live_cache);
    forward(reference, seq, ref_cache);
    const int V = live.config.vocab_size;
    dvec p(static_cast<size_t>(V), 0.0);
    std::vector<double> out;
    out.reserve(positions.size());
    for (int pos : positions) {
        require(pos >= 1 && pos < live_cache.T, "format", "KL position out of range");
        const double* live_row = live_cache.logits_row(pos - 1, V);
        const double* ref_row = ref_cache.logits_row(pos - 1, V);
        detail::softmax_row(live_row, 0, V, p.data());
        const double live_m = detail::row_max(live_row, 0, V);
        const double live_lz = detail::row_logsumexp(live_row, 0, V, live_m);
        const double ref_m = detail::row_max(ref_row, 0, V);
        const double ref_lz = detail::row_logsumexp(ref_row, 0, V, ref_m);
        double kl = 0.0;
        for (int v = 0; v < V; ++v) {
            const double log_p = (live_row[v] - live_m) - live_lz;
            const double log_q = (ref_row[v] - ref_m) - ref_lz;
            kl += p[static_cast<size_t>(v)] * (log_p - log_q);
        }
        out.push_back(kl);
    }
    return out;
}

// -------------------------------------------------------------- objectives

/// Clipped surrogate contribution of one trajectory, as an objective over the
/// live policy's logits (to be maximized):
///
///   token mode:    scale * sum_t min(r_t A, clip(r_t, 1-e, 1+e) A)
///   sequence mode: scale * min(r A, clip(r, 1-e, 1+e) A),  r = prod_t r_t
///
/// r_t = exp(new_lp_t - old_lp_t) with new_lp_t the image-range-restricted
/// log-probability of the sampled token.
inline LogitObjective clipped_surrogate_objective(std::vector<int> positions,
                                                  std::vector<int> targets,
                                                  std::vector<double> old_logprobs, double advantage,
                                                  double clip_eps, int lo, int hi, bool sequence_mode,
                                                  double scale) {
    require(positions.size() == targets.size() && positions.size() == old_logprobs.size(), "format",
            "surrogate inputs have mismatched lengths");
    return [positions = std::move(positions), targets = std::move(targets),
            old_logprobs = std::move(old_logprobs), advantage, clip_eps, lo, hi, sequence_mode,
            scale](const dvec& logits, int T, int V, dvec& dlogits) {
        const size_t n = positions.size();
        std::vector<double> new_lps(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            const int pos = positions[i];
            require(pos >= 1 && pos < T, "format", "surrogate position out of range");
            new_lps[i] = detail::log_softmax_at(logits.data() + static_cast<size_t>(pos - 1) * V, lo,
                                                hi, targets[i]);
        }

        // d(objective)/d(new_lp_t); also the objective value
        std::vector<double> d_lp(n, 0.0);
        double value = 0.0;
        if (sequence_mode) {
            double log_ratio = 0.0;
            for (size_t i = 0; i < n; ++i) {
                log_ratio += new_lps[i] - old_logprobs[i];
            }
            const double r = std::exp(log_ratio);
            const double clipped = std::min(std::max(r, 1.0 - clip_eps), 1.0 + clip_eps);
            value = scale * std::min(r * advantage, clipped * advantage);
            const bool active = advantage >= 0.0 ? r <= 1.0 + clip_eps : r >= 1.0 - clip_eps;
            if (active) {
                for (size_t i = 0; i < n; ++i) {
                    d_lp[i] = scale * advantage * r;
                }
            }
        } else {
            for (size_t i = 0; i < n; ++i) {
                const double r = std::exp(new_lps[i] - old_logprobs[i]);
                const double clipped = std::min(std::max(r, 1.0 - clip_eps), 1.0 + clip_eps);
                value += scale * std::min(r * advantage, clipped * advantage);
                const bool active = advantage >= 0.0 ? r <= 1.0 + clip_eps : r >= 1.0 - clip_eps;
                d_lp[i] = active ? scale * advantage * r : 0.0;
            }
        }

        // d(new_lp)/d(logits): one-hot minus the restricted softmax
        dvec probs(static_cast<size_t>(hi - lo), 0.0);
        for (size_t i = 0; i < n; ++i) {
            if (d_lp[i] == 0.0) {
                continue;
            }
            const int pos = positions[i];
            const double* row = logits.data() + static_cast<size_t>(pos - 1) * V;
            detail::softmax_row(row, lo, hi, probs.data());
            double* drow = dlogits.data() + static_cast<size_t>(pos - 1) * V;
            for (int v = lo; v < hi; ++v) {
                drow[v] -= d_lp[i] * probs[static_cast<size_t>(v - lo)];
            }
            drow[targets[i]] += d_lp[i];
        }
        return value;
    };
}

/// scale * sum_p KL(live || ref) at the given target positions, differentiable
/// through the live logits. ref_log_rows holds the reference log-softmax rows
/// (positions.size() x V), which are constants. raw_total, when given,
/// receives the unscaled KL sum for metrics.
inline LogitObjective kl_penalty_objective(std::vector<int> positions,
                                           std::vector<double> ref_log_rows, double scale,
                                           std::shared_ptr<double> raw_total = nullptr) {
    return [positions = std::move(positions), ref_log_rows = std::move(ref_log_rows), scale,
            raw_total](const dvec& logits, int T, int V, dvec& dlogits) {
        require(ref_log_rows.size() == positions.size() * static_cast<size_t>(V), "format",
                "reference rows have the wrong size");
        dvec p(static_cast<size_t>(V), 0.0);
        double total = 0.0;
        for (size_t i = 0; i < positions.size(); ++i) {
            const int pos = positions[i];
            require(pos >= 1 && pos < T, "format", "KL position out of range");
            const double* row = logits.data() + static_cast<size_t>(pos - 1) * V;
            const double* ref = ref_log_rows.data() + i * static_cast<size_t>(V);
            const double m = detail::row_max(row, 0, V);
            const double lz = detail::row_logsumexp(row, 0, V, m);
            detail::softmax_row(row, 0, V, p.data());
            double kl = 0.0;
            for (int v = 0; v < V; ++v) {
                kl += p[static_cast<size_t>(v)] * ((row[v] - m) - lz - ref[v]);
            }
            total += kl;
            // dKL/dz_v = p_v * (log p_v - log q_v - KL)
            double* drow = dlogits.data() + static_cast<size_t>(pos - 1) * V;
            for (int v = 0; v < V; ++v) {
                drow[v] += scale * p[static_cast<size_t>(v)] * ((row[v] - m) - lz - ref[v] - kl);
            }
        }
        if (raw_total != nullptr) {
            *raw_total = total;
        }
        return scale * total;
    };
}

// ------------------------------------------------------------- step records

struct StepRecord {
    int64_t step = 0;
    std::vector<double> rewards;
    std::vector<double> advantages;
    double mean_reward = 0.0;
    double objective = 0.0;
    double kl = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0; // logged separately; not part of the metrics file
};

inline nlohmann::ordered_json step_record_to_json(const StepRecord& record) {
    nlohmann::ordered_json j;
    j["step"] = record.step;
    j["rewards"] = record.rewards;
    j["advantages"] = record.advantages;
    j["mean_reward"] = record.mean_reward;
    j["objective"] = record.objective;
    j["kl"] = record.kl;
    j["grad_norm"] = record.grad_norm;
    return j;
}

// ----------------------------------------------------------------- trainer

struct GrpoStats {
    double objective = 0.0;
    double mean_kl = 0.0;
};

namespace detail {

struct TrajectoryWorkspace {
    std::vector<Trajectory> trajectories;
    std::vector<GradBuffer> grads;
    std::vector<ForwardCache> caches;
    std::vector<double> objectives;
    std::vector<double> kls;
};

} // namespace detail

/// The GRPO objective over one group (Eq.-style clipped surrogate minus the
/// KL penalty), with gradients with respect to the live policy accumulated
/// into `grads` when it is non-null. Returns the objective value.
inline double grpo_objective(PolicyHandles& handles, const std::vector<Trajectory>& group,
                             std::span<const double> advantages, const GrpoConfig& cfg,
                             const Vocab& vocab, GradBuffer* grads, GrpoStats* stats = nullptr,
                             detail::TrajectoryWorkspace* ws = nullptr) {
    cfg.validate();
    require(group.size() == advantages.size() && !group.empty(), "format",
            "group/advantage size mismatch");
    const int G = static_cast<int>(group.size());
    const int lo = vocab.image_lo();
    const int hi = vocab.image_hi();

    detail::TrajectoryWorkspace local;
    detail::TrajectoryWorkspace& w = ws != nullptr ? *ws : local;
    w.grads.resize(group.size());
    w.caches.resize(group.size());
    w.objectives.assign(group.size(), 0.0);
    w.kls.assign(group.size(), 0.0);

#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(group.size()); ++i) {
        const Trajectory& traj = group[static_cast<size_t>(i)];
        const GenerationLayout layout =
            assemble_generation_sequence(traj.prompt, vocab, handles.live.config.context);
        const TokenSequence seq = layout.with_image(traj.image, vocab);
        std::vector<int> positions;
        std::vector<int> targets;
        for (int j = 0; j < layout.image_len; ++j) {
            positions.push_back(layout.image_begin() + j);
            targets.push_back(seq[static_cast<size_t>(layout.image_begin() + j)]);
        }
        const int L = layout.image_len;
        const double surr_scale = cfg.sequence_ratio ? 1.0 / G : 1.0 / (static_cast<double>(G) * L);

        std::vector<LogitObjective> parts;
        parts.push_back(clipped_surrogate_objective(positions, targets, traj.old_logprobs,
                                                    advantages[static_cast<size_t>(i)], cfg.clip_eps,
                                                    lo, hi, cfg.sequence_ratio, surr_scale));
        auto raw_kl = std::make_shared<double>(0.0);
        if (cfg.kl_weight > 0.0) {
            ForwardCache ref_cache;
            forward(handles.reference, seq, ref_cache);
            const int V = handles.reference.config.vocab_size;
            std::vector<double> ref_rows(positions.size() * static_cast<size_t>(V), 0.0);
            for (size_t k = 0; k < positions.size(); ++k) {
                const double* row = ref_cache.logits_row(positions[k] - 1, V);
                const double m = detail::row_max(row, 0, V);
                const double lz = detail::row_logsumexp(row, 0, V, m);
                for (int v = 0; v < V; ++v) {
                    ref_rows[k * static_cast<size_t>(V) + static_cast<size_t>(v)] = (row[v] - m) - lz;
                }
            }
            const double kl_scale = -cfg.kl_weight / (static_cast<double>(G) * L);
            parts.push_back(kl_penalty_objective(positions, std::move(ref_rows), kl_scale, raw_kl));
        }
        const LogitObjective objective = sum_objectives(std::move(parts));

        auto& cache = w.caches[static_cast<size_t>(i)];
        if (grads != nullptr) {
            auto& g = w.grads[static_cast<size_t>(i)];
            g.assign(handles.live.data.size(), 0.0);
            w.objectives[static_cast<size_t>(i)] =
                loss_and_grad(handles.live, seq, objective, g, cache);
        } else {
            w.objectives[static_cast<size_t>(i)] = objective_value(handles.live, seq, objective, cache);
        }
        w.kls[static_cast<size_t>(i)] = *raw_kl / L; // mean per position
    }

    double objective_value_total = 0.0;
    double kl_total = 0.0;
    for (size_t i = 0; i < group.size(); ++i) {
        objective_value_total += w.objectives[i];
        kl_total += w.kls[i];
        if (grads != nullptr) {
            const GradBuffer& g = w.grads[i];
            for (size_t k = 0; k < grads->size(); ++k) {
                (*grads)[k] += g[k];
            }
        }
    }
    require(std::isfinite(objective_value_total), "numeric", "GRPO objective is non-finite");
    if (stats != nullptr) {
        stats->objective = objective_value_total;
        stats->mean_kl = kl_total / static_cast<double>(G);
    }
    return objective_value_total;
}

class GrpoTrainer {
public:
    GrpoTrainer(PolicyHandles handles, GrpoConfig cfg, Vocab vocab)
        : handles_(std::move(handles)),
          cfg_(cfg),
          vocab_(std::move(vocab)),
          adam_(handles_.live.data.size()),
          grad_(handles_.live.data.size(), 0.0) {
        cfg_.validate();
    }

    /// One GRPO step: refresh the rollout snapshot, sample a group, score it
    /// with the intrinsic reward, standardize advantages, then apply
    /// updates_per_batch ascent steps on the live policy.
    StepRecord train_step(const std::string& prompt_text, int64_t step_index) {
        const PromptTokens prompt = encode_text(prompt_text, vocab_);
        handles_.rollout_snapshot = handles_.live;

        // rollouts from the frozen snapshot, one child seed per trajectory
        std::vector<Trajectory> group(static_cast<size_t>(cfg_.group_size));
#pragma omp parallel for schedule(dynamic)
        for (long i = 0; i < static_cast<long>(group.size()); ++i) {
            KvCache kv(handles_.rollout_snapshot.config);
            const uint64_t child = Rng::mix(
                {cfg_.seed, 0x726f6c6cull, static_cast<uint64_t>(step_index), static_cast<uint64_t>(i)});
            group[static_cast<size_t>(i)] = sample_image_tokens(
                handles_.rollout_snapshot, prompt, vocab_, child, cfg_.temperature, kv);
        }

        // intrinsic rewards from the scorer policy (snapshot by default)
        const PolicyParams& scorer =
            cfg_.reward_with_live_policy ? handles_.live : handles_.rollout_snapshot;
        std::vector<ImageTokens> images;
        images.reserve(group.size());
        for (const Trajectory& t : group) {
            images.push_back(t.image);
        }
        const std::vector<double> rewards =
            group_rewards(scorer, vocab_.system_prefix, prompt, images, vocab_);
        const std::vector<double> advantages = compute_advantages(rewards);

        StepRecord record;
        record.step = step_index;
        record.rewards = rewards;
        record.advantages = advantages;
        record.mean_reward = mean_of(rewards);

        GrpoStats stats;
        for (int update = 0; update < cfg_.updates_per_batch; ++update) {
            std::fill(grad_.begin(), grad_.end(), 0.0);
            grpo_objective(handles_, group, advantages, cfg_, vocab_, &grad_, &stats, &ws_);
            // ascend the objective: Adam descends, so feed the negated gradient
            for (double& g : grad_) {
                g = -g;
            }
            adam_.step(handles_.live.data, grad_, cfg_.learning_rate, cfg_.adam_beta1,
                       cfg_.adam_beta2, cfg_.adam_eps);
            require(handles_.live.all_finite(), "numeric",
                    "non-finite parameters after step " + std::to_string(step_index));
        }
        record.objective = stats.objective;
        record.kl = stats.mean_kl;
        record.grad_norm = grad_norm(grad_);
        return record;
    }

    PolicyHandles& handles() { return handles_; }
    const PolicyHandles& handles() const { return handles_; }
    const GrpoConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }

private:
    PolicyHandles handles_;
    GrpoConfig cfg_;
    Vocab vocab_;
    AdamState adam_;
    GradBuffer grad_;
    detail::TrajectoryWorkspace ws_;
};

// --------------------------------------------------------------- train loop

using PromptSampler = std::function<std::string(int64_t step)>;

/// Uniform-difficulty prompt stream over the scene world.
inline PromptSampler scene_prompt_sampler(const WorldConfig& world, uint64_t seed) {
    return [world, seed](int64_t step) {
        Rng rng(Rng::mix({seed, 0x70726f6dull, static_cast<uint64_t>(step)}));
        const Difficulty difficulty = kAllDifficulties[rng.below(kAllDifficulties.size())];
        return describe_scene(sample_scene(rng, difficulty, world), world);
    };
}

struct TrainLoopResult {
    std::vector<StepRecord> records;
    std::vector<std::pair<int64_t, GenerationReport>> evals;
};

/// Runs the configured number of steps, streaming step records to
/// metrics.jsonl (wall time goes to timing.jsonl so the metrics file is
/// bit-reproducible), periodic checkpoints, and periodic mini-GenEval
/// evaluations on a fixed eval set.
inline TrainLoopResult train_loop(GrpoTrainer& trainer, const PromptSampler& prompts,
                                  const std::string& run_dir, const Metadata& ckpt_metadata = {}) {
    namespace fs = std::filesystem;
    const GrpoConfig& cfg = trainer.config();
    fs::create_directories(run_dir);
    std::ofstream metrics(run_dir + "/metrics.jsonl", std::ios::trunc);
    std::ofstream timing(run_dir + "/timing.jsonl", std::ios::trunc);
    std::ofstream evals(run_dir + "/evals.jsonl", std::ios::trunc);
    require(metrics.is_open() && timing.is_open() && evals.is_open(), "io",
            "cannot open run files in " + run_dir);

    std::vector<PairRecord> eval_set;
    if (cfg.eval_every > 0) {
        Rng rng(cfg.eval_seed);
        PairDataset d = make_pair_dataset(rng, cfg.eval_records, trainer.vocab().world);
        eval_set = d.train;
        eval_set.insert(eval_set.end(), d.heldout.begin(), d.heldout.end());
    }

    TrainLoopResult result;
    auto run_eval = [&](int64_t step) {
        const GenerationReport report =
            evaluate_generation(trainer.handles().live, eval_set, cfg.eval_samples_per_prompt,
                                cfg.eval_seed, trainer.vocab());
        nlohmann::ordered_json j;
        j["step"] = step;
        j["mini_geneval"] = generation_report_to_json(report);
        evals << j.dump() << '\n';
        evals.flush();
        result.evals.emplace_back(step, report);
    };

    for (int64_t step = 0; step < cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        StepRecord record = trainer.train_step(prompts(step), step);
        record.wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
        metrics << step_record_to_json(record).dump() << '\n';
        timing << "{\"step\":" << record.step << ",\"wall_ms\":" << record.wall_ms << "}\n";
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "/ckpt_%06lld.bin", static_cast<long long>(step + 1));
            save_checkpoint(trainer.handles().live, trainer.vocab(), ckpt_metadata, run_dir + name);
        }
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            run_eval(step + 1);
        }
        result.records.push_back(std::move(record));
    }
    save_checkpoint(trainer.handles().live, trainer.vocab(), ckpt_metadata,
                    run_dir + "/ckpt_final.bin");
    metrics.flush();
    require(metrics.good() && timing.good() && evals.good(), "io",
            "failed writing run files in " + run_dir);
    return result;
}

} // namespace umm
