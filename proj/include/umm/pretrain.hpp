// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "umm/checkpoint.hpp"
#include "umm/error.hpp"
#include "umm/model.hpp"
#include "umm/optim.hpp"
#include "umm/reward.hpp"
#include "umm/rng.hpp"
#include "umm/scene.hpp"
#include "umm/stats.hpp"
#include "umm/vocab.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Supervised pretraining on (prompt, grid) pairs. Two profiles manufacture
// the understanding/generation asymmetry: the weak base sees far fewer
// generation batches than the regular base.
// ---------------------------------------------------------------------------

struct PairRecord {
    Scene scene;
    std::string prompt;
    SceneGrid grid;
    Difficulty difficulty = Difficulty::single;
};

struct PairDataset {
    WorldConfig world;
    std::vector<PairRecord> train;
    std::vector<PairRecord> heldout;
};

/// n consistent (scene, prompt, grid) triples with a 90/10 split, disjoint by
/// scene identity. Difficulties are drawn uniformly unless a mix is given.
inline PairDataset make_pair_dataset(Rng& rng, int n, const WorldConfig& world,
                                     std::span<const double> difficulty_mix = {}) {
    require(n >= 2, "config", "dataset needs at least two records");
    std::vector<double> mix(difficulty_mix.begin(), difficulty_mix.end());
    if (mix.empty()) {
        mix.assign(kAllDifficulties.size(), 1.0);
    }
    require(mix.size() == kAllDifficulties.size(), "config", "difficulty mix needs 5 weights");
    double mix_total = 0.0;
    for (double w : mix) {
        require(w >= 0.0, "config", "difficulty weights must be non-negative");
        mix_total += w;
    }
    require(mix_total > 0.0, "config", "difficulty mix must have positive total weight");

    PairDataset dataset;
    dataset.world = world;
    std::set<std::string> seen;
    std::vector<PairRecord> records;
    while (static_cast<int>(records.size()) < n) {
        double u = rng.uniform01() * mix_total;
        size_t pick = 0;
        for (; pick + 1 < mix.size(); ++pick) {
            if (u < mix[pick]) {
                break;
            }
            u -= mix[pick];
        }
        PairRecord record;
        record.difficulty = kAllDifficulties[pick];
        record.scene = sample_scene(rng, record.difficulty, world);
        if (!seen.insert(scene_key(record.scene, world)).second) {
            continue; // duplicate scene; split disjointness is by scene identity
        }
        record.prompt = describe_scene(record.scene, world);
        record.grid = render_scene(record.scene, world);
        records.push_back(std::move(record));
    }
    rng.shuffle(records);
    const size_t n_train = (records.size() * 9) / 10;
    dataset.train.assign(records.begin(), records.begin() + static_cast<long>(n_train));
    dataset.heldout.assign(records.begin() + static_cast<long>(n_train), records.end());
    return dataset;
}

inline std::string dataset_to_jsonl(const PairDataset& dataset) {
    std::string out;
    auto dump = [&](const PairRecord& r, const char* split) {
        nlohmann::ordered_json j;
        j["scene"] = scene_to_json(r.scene, dataset.world);
        j["prompt"] = r.prompt;
        j["difficulty"] = difficulty_name(r.difficulty);
        j["split"] = split;
        out += j.dump();
        out += '\n';
    };
    for (const PairRecord& r : dataset.train) {
        dump(r, "train");
    }
    for (const PairRecord& r : dataset.heldout) {
        dump(r, "heldout");
    }
    return out;
}

inline PairDataset dataset_from_jsonl(const std::string& text, const WorldConfig& world) {
    PairDataset dataset;
    dataset.world = world;
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
        PairRecord r;
        r.scene = scene_from_json(j.at("scene"), world);
        r.prompt = j.at("prompt").get<std::string>();
        r.difficulty = difficulty_from_name(j.at("difficulty").get<std::string>());
        r.grid = render_scene(r.scene, world);
        require(r.prompt == describe_scene(r.scene, world), "format",
                "dataset prompt does not match its scene");
        const std::string split = j.at("split").get<std::string>();
        if (split == "train") {
            dataset.train.push_back(std::move(r));
        } else if (split == "heldout") {
            dataset.heldout.push_back(std::move(r));
        } else {
            fail("format", "unknown split tag: " + split);
        }
    }
    return dataset;
}

// ------------------------------------------------------------------ profiles

struct BaseProfile {
    std::string name;
    int understanding_steps = 0;
    int generation_steps = 0;
};

inline BaseProfile regular_profile() { return {"regular", 6000, 6000}; }
inline BaseProfile weak_profile() { return {"weak", 6000, 1000}; }

inline BaseProfile profile_by_name(const std::string& name) {
    if (name == "regular") {
        return regular_profile();
    }
    if (name == "weak") {
        return weak_profile();
    }
    fail("config", "unknown base profile: " + name);
}

/// The weak base must train generation strictly less, understanding at least
/// as much.
inline void validate_profile_pair(const BaseProfile& weak, const BaseProfile& regular) {
    require(weak.generation_steps < regular.generation_steps, "config",
            "weak profile must have strictly fewer generation steps");
    require(weak.understanding_steps >= regular.understanding_steps, "config",
            "weak profile must have at least as many understanding steps");
}

struct PretrainConfig {
    int batch_size = 32;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 42;
    int log_every = 50;

    void validate() const {
        require(batch_size >= 1, "config", "batch_size must be >= 1");
        require(learning_rate > 0.0, "config", "learning_rate must be positive");
    }
};

enum class Branch { understanding, generation };

/// Even interleave of generation steps among understanding steps.
inline Branch branch_at(int step, int understanding_steps, int generation_steps) {
    const int64_t total = understanding_steps + generation_steps;
    const int64_t before = static_cast<int64_t>(step) * generation_steps / total;
    const int64_t after = static_cast<int64_t>(step + 1) * generation_steps / total;
    return after > before ? Branch::generation : Branch::understanding;
}

struct LossPoint {
    int step;
    double loss; // mean per-token cross-entropy of the batch
};

struct PretrainResult {
    std::vector<LossPoint> understanding_curve;
    std::vector<LossPoint> generation_curve;
    int total_steps = 0;
};

namespace detail {

struct BatchWorkspace {
    std::vector<GradBuffer> grads;
    std::vector<ForwardCache> caches;
    std::vector<double> losses;
    std::vector<int> token_counts;

    void resize(int batch, size_t n_params) {
        grads.assign(static_cast<size_t>(batch), GradBuffer(n_params, 0.0));
        caches.resize(static_cast<size_t>(batch));
        losses.assign(static_cast<size_t>(batch), 0.0);
        token_counts.assign(static_cast<size_t>(batch), 0);
    }
};

} // namespace detail

/// Interleaved teacher-forced cross-entropy training. Understanding batches
/// score prompt tokens in the scoring layout; generation batches score image
/// tokens in the generation layout. Trains `params` in place.
inline PretrainResult pretrain_base(PolicyParams& params, const PairDataset& dataset,
                                    const BaseProfile& profile, const PretrainConfig& cfg,
                                    const Vocab& vocab) {
    cfg.validate();
    require(!dataset.train.empty(), "config", "empty training split");
    require(profile.understanding_steps >= 0 && profile.generation_steps >= 0, "config",
            "profile step counts must be non-negative");

    Rng rng(cfg.seed);
    AdamState adam(params.data.size());
    GradBuffer total_grad(params.data.size(), 0.0);
    detail::BatchWorkspace ws;
    ws.resize(cfg.batch_size, params.data.size());

    PretrainResult result;
    result.total_steps = profile.understanding_steps + profile.generation_steps;

    for (int step = 0; step < result.total_steps; ++step) {
        const Branch branch = branch_at(step, profile.understanding_steps, profile.generation_steps);
        std::vector<const PairRecord*> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        for (int i = 0; i < cfg.batch_size; ++i) {
            batch.push_back(&dataset.train[rng.below(dataset.train.size())]);
        }

#pragma omp parallel for schedule(dynamic)
        for (long i = 0; i < static_cast<long>(batch.size()); ++i) {
            const PairRecord& record = *batch[static_cast<size_t>(i)];
            auto& grads = ws.grads[static_cast<size_t>(i)];
            std::fill(grads.begin(), grads.end(), 0.0);
            const PromptTokens prompt = encode_text(record.prompt, vocab);
            TokenSequence seq;
            std::vector<int> positions;
            if (branch == Branch::understanding) {
                const ScoringLayout layout = assemble_scoring_sequence(
                    vocab.system_prefix, encode_image(record.grid, vocab), prompt, vocab,
                    params.config.context);
                seq = layout.ids;
                positions = layout.target_positions;
            } else {
                const GenerationLayout layout =
                    assemble_generation_sequence(prompt, vocab, params.config.context);
                seq = layout.with_image(encode_image(record.grid, vocab), vocab);
                for (int j = 0; j < layout.image_len; ++j) {
                    positions.push_back(layout.image_begin() + j);
                }
            }
            std::vector<int> targets;
            targets.reserve(positions.size());
            for (int p : positions) {
                targets.push_back(seq[static_cast<size_t>(p)]);
            }
            ws.token_counts[static_cast<size_t>(i)] = static_cast<int>(positions.size());
            const LogitObjective objective = masked_cross_entropy(positions, targets, 1.0);
            ws.losses[static_cast<size_t>(i)] = loss_and_grad(
                params, seq, objective, grads, ws.caches[static_cast<size_t>(i)]);
        }

        // deterministic reduction in batch order, independent of thread count
        std::fill(total_grad.begin(), total_grad.end(), 0.0);
        double loss_sum = 0.0;
        int token_sum = 0;
        for (size_t i = 0; i < batch.size(); ++i) {
            loss_sum += ws.losses[i];
            token_sum += ws.token_counts[i];
            const GradBuffer& g = ws.grads[i];
            for (size_t k = 0; k < total_grad.size(); ++k) {
                total_grad[k] += g[k];
            }
        }
        const double scale = 1.0 / static_cast<double>(token_sum);
        for (double& g : total_grad) {
            g *= scale;
        }
        const double batch_loss = loss_sum * scale;
        require(std::isfinite(batch_loss), "numeric",
                "pretraining diverged at step " + std::to_string(step));

        adam.step(params.data, total_grad, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                  cfg.adam_eps);
        require(params.all_finite(), "numeric",
                "non-finite parameters after step " + std::to_string(step));

        auto& curve =
            branch == Branch::understanding ? result.understanding_curve : result.generation_curve;
        curve.push_back({step, batch_loss});
    }
    return result;
}

// ---------------------------------------------------------------- probes

/// Single-attribute corruptions of one group: a color flip, a count change,
/// and a region move. Used as discrimination-probe distractors.
namespace detail {

inline Scene scene_from_groups(const std::map<std::tuple<int, int, int>, int>& groups,
                               const WorldConfig& world) {
    Scene scene;
    scene.grid_size = world.grid_size;
    PlacementState state(world.grid_size);
    for (const auto& [key, count] : groups) {
        const auto [region, shape, color] = key;
        auto cells = region_cells(region, world.grid_size);
        // deterministic placement: first free cells of the region
        int placed = 0;
        for (const auto& [row, col] : cells) {
            if (placed == count) {
                break;
            }
            bool occupied = false;
            for (const ObjectSpec& o : scene.objects) {
                if (o.row == row && o.col == col) {
                    occupied = true;
                    break;
                }
            }
            if (!occupied) {
                scene.objects.push_back({shape, color, row, col});
                ++placed;
            }
        }
        require(placed == count, "format", "group does not fit its region");
    }
    return scene;
}

} // namespace detail

/// Three distractor prompts for a scene, one per attribute family. Never
/// equal to the true prompt.
inline std::vector<std::string> make_distractor_prompts(const Scene& scene, const WorldConfig& world,
                                                        Rng& rng) {
    const auto groups = detail::scene_groups(scene);
    std::vector<std::tuple<int, int, int>> keys;
    for (const auto& [key, count] : groups) {
        (void)count;
        keys.push_back(key);
    }
    const std::string truth = describe_scene(scene, world);
    std::vector<std::string> distractors;

    // color flip: merged groups must stay within max_count
    {
        auto edited = groups;
        bool done = false;
        for (size_t attempt = 0; attempt < 4 * keys.size() && !done; ++attempt) {
            const auto key = keys[rng.below(keys.size())];
            const auto [region, shape, color] = key;
            const int count = groups.at(key);
            std::vector<int> candidates;
            for (int c = 0; c < world.n_colors(); ++c) {
                if (c == color) {
                    continue;
                }
                const auto merged = std::make_tuple(region, shape, c);
                const int existing = groups.count(merged) ? groups.at(merged) : 0;
                if (existing + count <= world.max_count) {
                    candidates.push_back(c);
                }
            }
            if (candidates.empty()) {
                continue;
            }
            const int new_color = candidates[rng.below(candidates.size())];
            edited = groups;
            edited.erase(key);
            edited[{region, shape, new_color}] += count;
            done = true;
        }
        require(done, "format", "no color distractor available");
        distractors.push_back(describe_scene(detail::scene_from_groups(edited, world), world));
    }

    // count change within the region's capacity
    {
        auto edited = groups;
        bool done = false;
        for (size_t attempt = 0; attempt < 4 * keys.size() && !done; ++attempt) {
            const auto key = keys[rng.below(keys.size())];
            const auto [region, shape, color] = key;
            const int count = groups.at(key);
            int used = 0;
            for (const auto& [other, n] : groups) {
                if (std::get<0>(other) == region) {
                    used += n;
                }
            }
            const int capacity = static_cast<int>(region_cells(region, world.grid_size).size());
            const int max_here = std::min(world.max_count, capacity - (used - count));
            std::vector<int> candidates;
            for (int c = 1; c <= max_here; ++c) {
                if (c != count) {
                    candidates.push_back(c);
                }
            }
            if (candidates.empty()) {
                continue;
            }
            edited = groups;
            edited[key] = candidates[rng.below(candidates.size())];
            done = true;
        }
        require(done, "format", "no count distractor available");
        distractors.push_back(describe_scene(detail::scene_from_groups(edited, world), world));
    }

    // region move
    {
        auto edited = groups;
        bool done = false;
        for (size_t attempt = 0; attempt < 4 * keys.size() && !done; ++attempt) {
            const auto key = keys[rng.below(keys.size())];
            const auto [region, shape, color] = key;
            const int count = groups.at(key);
            std::vector<int> candidates;
            for (int r = 0; r < 9; ++r) {
                if (r == region) {
                    continue;
                }
                int used = 0;
                for (const auto& [other, n] : groups) {
                    if (std::get<0>(other) == r) {
                        used += n;
                    }
                }
                const int capacity = static_cast<int>(region_cells(r, world.grid_size).size());
                const auto merged = std::make_tuple(r, shape, color);
                const int existing = edited.count(merged) ? edited.at(merged) : 0;
                if (capacity - used >= count && existing + count <= world.max_count) {
                    candidates.push_back(r);
                }
            }
            if (candidates.empty()) {
                continue;
            }
            const int new_region = candidates[rng.below(candidates.size())];
            edited = groups;
            edited.erase(key);
            edited[{new_region, shape, color}] += count;
            done = true;
        }
        require(done, "format", "no position distractor available");
        distractors.push_back(describe_scene(detail::scene_from_groups(edited, world), world));
    }

    for (const std::string& d : distractors) {
        require(d != truth, "format", "distractor equals the true prompt");
    }
    return distractors;
}

/// Scoring callable: reward of a (prompt, grid) pair. Lets tests probe with
/// oracle scorers.
using PairScorer = std::function<double(const std::string& prompt, const SceneGrid& grid)>;

/// Fraction of records where the true prompt outscores all three distractors.
inline double discrimination_probe_accuracy(const PairScorer& scorer,
                                            std::span<const PairRecord> records,
                                            const WorldConfig& world, uint64_t seed) {
    require(!records.empty(), "config", "probe needs at least one record");
    int correct = 0;
    std::vector<int> outcome(records.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(records.size()); ++i) {
        const PairRecord& record = records[static_cast<size_t>(i)];
        Rng rng(Rng::mix({seed, static_cast<uint64_t>(i)}));
        const auto distractors = make_distractor_prompts(record.scene, world, rng);
        const double truth = scorer(record.prompt, record.grid);
        bool win = true;
        for (const std::string& d : distractors) {
            if (scorer(d, record.grid) >= truth) {
                win = false;
                break;
            }
        }
        outcome[static_cast<size_t>(i)] = win ? 1 : 0;
    }
    for (int o : outcome) {
        correct += o;
    }
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

struct UnderstandingReport {
    double mean_token_logprob = 0.0; // ground-truth prompts given ground-truth grids
    double probe_accuracy = 0.0;
    int n_records = 0;
};

inline UnderstandingReport evaluate_understanding(const PolicyParams& params,
                                                  std::span<const PairRecord> records,
                                                  const Vocab& vocab, uint64_t probe_seed) {
    require(!records.empty(), "config", "understanding evaluation needs records");
    UnderstandingReport report;
    report.n_records = static_cast<int>(records.size());

    std::vector<double> sums(records.size(), 0.0);
    std::vector<int> counts(records.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(records.size()); ++i) {
        const PairRecord& record = records[static_cast<size_t>(i)];
        ForwardCache cache;
        const PromptTokens prompt = encode_text(record.prompt, vocab);
        const ScoringLayout layout =
            assemble_scoring_sequence(vocab.system_prefix, encode_image(record.grid, vocab), prompt,
                                      vocab, params.config.context);
        const auto lps = sequence_logprobs(params, layout.ids, layout.target_positions, cache);
        double s = 0.0;
        for (double lp : lps) {
            s += lp;
        }
        sums[static_cast<size_t>(i)] = s;
        counts[static_cast<size_t>(i)] = static_cast<int>(lps.size());
    }
    double total = 0.0;
    int n_tokens = 0;
    for (size_t i = 0; i < sums.size(); ++i) {
        total += sums[i];
        n_tokens += counts[i];
    }
    report.mean_token_logprob = total / n_tokens;

    const PairScorer model_scorer = [&](const std::string& prompt, const SceneGrid& grid) {
        ForwardCache cache;
        return intrinsic_reward(params, vocab.system_prefix, encode_image(grid, vocab),
                                encode_text(prompt, vocab), vocab, cache)
            .reward;
    };
    report.probe_accuracy =
        discrimination_probe_accuracy(model_scorer, records, vocab.world, probe_seed);
    return report;
}

// ------------------------------------------------------------- generation

struct GenerationReport {
    struct CategoryStat {
        int n_records = 0;
        int n_samples = 0;
        double mean_overall = 0.0;
    };
    std::map<std::string, CategoryStat> per_category;
    double overall = 0.0;
    int n_records = 0;
    int samples_per_prompt = 0;
};

/// Mini-GenEval: samples images for each record's prompt, scores them with
/// the exact oracle, and aggregates per difficulty category.
inline GenerationReport evaluate_generation(const PolicyParams& params,
                                            std::span<const PairRecord> records,
                                            int samples_per_prompt, uint64_t seed, const Vocab& vocab,
                                            double temperature = 1.0) {
    require(!records.empty(), "config", "generation evaluation needs records");
    require(samples_per_prompt >= 1, "config", "samples_per_prompt must be >= 1");
    GenerationReport report;
    report.n_records = static_cast<int>(records.size());
    report.samples_per_prompt = samples_per_prompt;

    std::vector<double> record_means(records.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(records.size()); ++i) {
        const PairRecord& record = records[static_cast<size_t>(i)];
        KvCache kv(params.config);
        const PromptTokens prompt = encode_text(record.prompt, vocab);
        double sum = 0.0;
        for (int j = 0; j < samples_per_prompt; ++j) {
            const uint64_t child = Rng::mix({seed, static_cast<uint64_t>(i), static_cast<uint64_t>(j)});
            const Trajectory traj = sample_image_tokens(params, prompt, vocab, child, temperature, kv);
            const SceneGrid grid = decode_image(traj.image, vocab);
            sum += score_alignment(grid, record.scene, vocab.world).overall;
        }
        record_means[static_cast<size_t>(i)] = sum / samples_per_prompt;
    }

    double total = 0.0;
    for (size_t i = 0; i < records.size(); ++i) {
        total += record_means[i];
        auto& stat = report.per_category[difficulty_name(records[i].difficulty)];
        stat.n_records += 1;
        stat.n_samples += samples_per_prompt;
        stat.mean_overall += record_means[i];
    }
    for (auto& [name, stat] : report.per_category) {
        (void)name;
        stat.mean_overall /= stat.n_records;
    }
    report.overall = total / static_cast<double>(records.size());
    return report;
}

/// Monte-Carlo baseline: oracle score of uniformly random grids against the
/// same records.
inline double random_grid_baseline(std::span<const PairRecord> records, int samples_per_prompt,
                                   uint64_t seed, const WorldConfig& world) {
    require(!records.empty(), "config", "baseline needs records");
    double total = 0.0;
    Rng rng(seed);
    for (const PairRecord& record : records) {
        for (int j = 0; j < samples_per_prompt; ++j) {
            SceneGrid grid;
            grid.grid_size = world.grid_size;
            for (int c = 0; c < world.n_cells(); ++c) {
                grid.cells.push_back(rng.below_int(world.n_cell_values()));
            }
            total += score_alignment(grid, record.scene, world).overall;
        }
    }
    return total / (static_cast<double>(records.size()) * samples_per_prompt);
}

inline nlohmann::ordered_json generation_report_to_json(const GenerationReport& report) {
    nlohmann::ordered_json j;
    j["overall"] = report.overall;
    j["n_records"] = report.n_records;
    j["samples_per_prompt"] = report.samples_per_prompt;
    j["per_category"] = nlohmann::ordered_json::object();
    for (const auto& [name, stat] : report.per_category) {
        nlohmann::ordered_json s;
        s["n_records"] = stat.n_records;
        s["n_samples"] = stat.n_samples;
        s["mean_overall"] = stat.mean_overall;
        j["per_category"][name] = s;
    }
    return j;
}

} // namespace umm
