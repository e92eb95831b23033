// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "umm/checkpoint.hpp"
#include "umm/config.hpp"
#include "umm/grpo.hpp"
#include "umm/metrics.hpp"
#include "umm/plot.hpp"
#include "umm/pretrain.hpp"
#include "umm/reward.hpp"
#include "umm/stats.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Experiment runner: pretrain | rl | eval | sensitivity | compare-bases |
// plot. Every command materializes a self-describing run directory: the
// exact effective config plus deterministic outputs for the given seeds.
// ---------------------------------------------------------------------------

namespace harness {

namespace fs = std::filesystem;

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    require(out.is_open(), "io", "cannot write " + path);
    out << text;
    out.flush();
    require(out.good(), "io", "failed writing " + path);
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path);
    require(in.is_open(), "io", "cannot read " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    write_text(path, j.dump(2) + "\n");
}

inline std::string out_dir(const KeyValueConfig& cfg) {
    const std::string out = cfg.get_required("out");
    fs::create_directories(out);
    return out;
}

/// The effective config (defaults resolved by the caller) goes into the run
/// directory verbatim.
inline void snapshot_config(const KeyValueConfig& cfg, const std::string& dir) {
    write_text(dir + "/config.cfg", cfg.serialize());
}

inline GrpoConfig grpo_config_from(const KeyValueConfig& cfg) {
    GrpoConfig g;
    g.group_size = static_cast<int>(cfg.get_int("group_size", g.group_size));
    g.clip_eps = cfg.get_double("clip_eps", g.clip_eps);
    g.kl_weight = cfg.get_double("kl_weight", g.kl_weight);
    g.learning_rate = cfg.get_double("learning_rate", g.learning_rate);
    g.updates_per_batch = static_cast<int>(cfg.get_int("updates_per_batch", g.updates_per_batch));
    g.total_steps = static_cast<int>(cfg.get_int("total_steps", g.total_steps));
    g.seed = cfg.get_u64("seed", g.seed);
    g.temperature = cfg.get_double("temperature", g.temperature);
    g.sequence_ratio = cfg.get_bool("sequence_ratio", g.sequence_ratio);
    g.reward_with_live_policy = cfg.get_bool("reward_with_live_policy", g.reward_with_live_policy);
    g.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every", g.checkpoint_every));
    g.eval_every = static_cast<int>(cfg.get_int("eval_every", g.eval_every));
    g.eval_records = static_cast<int>(cfg.get_int("eval_records", g.eval_records));
    g.eval_samples_per_prompt =
        static_cast<int>(cfg.get_int("eval_samples_per_prompt", g.eval_samples_per_prompt));
    g.eval_seed = cfg.get_u64("eval_seed", g.eval_seed);
    g.validate();
    return g;
}

inline const std::set<std::string> kGrpoKeys = {
    "group_size",      "clip_eps",     "kl_weight",    "learning_rate",
    "updates_per_batch", "total_steps", "seed",        "temperature",
    "sequence_ratio",  "reward_with_live_policy",      "checkpoint_every",
    "eval_every",      "eval_records", "eval_samples_per_prompt", "eval_seed"};

// --------------------------------------------------------------- pretrain

inline const std::set<std::string> kPretrainKeys = {
    "out",       "seed",          "profile",       "understanding_steps", "generation_steps",
    "dataset_size", "dataset_seed", "batch_size",  "learning_rate",       "eval_samples",
    "probe_seed", "write_dataset"};

inline int cmd_pretrain(const KeyValueConfig& cfg) {
    cfg.require_known(kPretrainKeys);
    const std::string dir = out_dir(cfg);

    const WorldConfig world;
    const Vocab vocab = build_vocab(world);

    BaseProfile profile = profile_by_name(cfg.get_string("profile", "regular"));
    if (cfg.has("understanding_steps") || cfg.has("generation_steps")) {
        profile.name = "custom";
        profile.understanding_steps =
            static_cast<int>(cfg.get_int("understanding_steps", profile.understanding_steps));
        profile.generation_steps =
            static_cast<int>(cfg.get_int("generation_steps", profile.generation_steps));
    }

    PretrainConfig pcfg;
    pcfg.batch_size = static_cast<int>(cfg.get_int("batch_size", pcfg.batch_size));
    pcfg.learning_rate = cfg.get_double("learning_rate", pcfg.learning_rate);
    pcfg.seed = cfg.get_u64("seed", pcfg.seed);

    const int dataset_size = static_cast<int>(cfg.get_int("dataset_size", 4096));
    const uint64_t dataset_seed = cfg.get_u64("dataset_seed", 1234);
    Rng data_rng(dataset_seed);
    const PairDataset dataset = make_pair_dataset(data_rng, dataset_size, world);
    if (cfg.get_bool("write_dataset", true)) {
        write_text(dir + "/dataset.jsonl", dataset_to_jsonl(dataset));
    }

    ModelConfig mcfg;
    mcfg.vocab_size = vocab.size;
    Rng init_rng(pcfg.seed);
    PolicyParams params = init_params(init_rng, mcfg);

    const PretrainResult result = pretrain_base(params, dataset, profile, pcfg, vocab);

    const int eval_samples = static_cast<int>(cfg.get_int("eval_samples", 2));
    const uint64_t probe_seed = cfg.get_u64("probe_seed", 777);
    const UnderstandingReport und =
        evaluate_understanding(params, dataset.heldout, vocab, probe_seed);
    const GenerationReport gen =
        evaluate_generation(params, dataset.heldout, eval_samples, probe_seed, vocab);

    Metadata meta;
    meta["profile"] = profile.name;
    meta["understanding_steps"] = std::to_string(profile.understanding_steps);
    meta["generation_steps"] = std::to_string(profile.generation_steps);
    meta["seed"] = std::to_string(pcfg.seed);
    meta["dataset_seed"] = std::to_string(dataset_seed);
    meta["dataset_size"] = std::to_string(dataset_size);
    meta["scorer_id"] = profile.name + "-base-" + std::to_string(pcfg.seed);
    save_checkpoint(params, vocab, meta, dir + "/checkpoint.bin");

    nlohmann::ordered_json report;
    report["profile"] = profile.name;
    report["understanding_steps"] = profile.understanding_steps;
    report["generation_steps"] = profile.generation_steps;
    report["heldout_understanding_logprob"] = und.mean_token_logprob;
    report["heldout_probe_accuracy"] = und.probe_accuracy;
    report["heldout_mini_geneval"] = generation_report_to_json(gen);
    report["final_understanding_loss"] =
        result.understanding_curve.empty() ? 0.0 : result.understanding_curve.back().loss;
    report["final_generation_loss"] =
        result.generation_curve.empty() ? 0.0 : result.generation_curve.back().loss;
    write_json(dir + "/pretrain_report.json", report);

    // loss curves: separate tables since the two branches tick on different steps
    MetricsTable und_curve;
    und_curve.columns = {"understanding_loss"};
    for (const LossPoint& p : result.understanding_curve) {
        und_curve.add_row(p.step, {p.loss});
    }
    emit_plots(und_curve, dir + "/understanding_loss", "understanding branch training loss");
    MetricsTable gen_curve;
    gen_curve.columns = {"generation_loss"};
    for (const LossPoint& p : result.generation_curve) {
        gen_curve.add_row(p.step, {p.loss});
    }
    emit_plots(gen_curve, dir + "/generation_loss", "generation branch training loss");

    snapshot_config(cfg, dir);
    return 0;
}

// --------------------------------------------------------------------- rl

inline std::set<std::string> rl_keys() {
    std::set<std::string> keys = kGrpoKeys;
    keys.insert("out");
    keys.insert("base");
    return keys;
}

inline int cmd_rl(const KeyValueConfig& cfg) {
    cfg.require_known(rl_keys());
    const std::string dir = out_dir(cfg);
    const Checkpoint base = load_checkpoint(cfg.get_required("base"));
    const GrpoConfig gcfg = grpo_config_from(cfg);

    GrpoTrainer trainer(PolicyHandles::from_base(base.params), gcfg, base.vocab);
    Metadata meta = base.metadata;
    meta["rl_seed"] = std::to_string(gcfg.seed);
    meta["rl_steps"] = std::to_string(gcfg.total_steps);
    meta["scorer_id"] = meta.count("scorer_id") ? meta["scorer_id"] + "+rl" : "rl";

    const auto result =
        train_loop(trainer, scene_prompt_sampler(base.vocab.world, gcfg.seed), dir, meta);

    // reward curve (Fig.-style): smoothed mean intrinsic reward per step
    MetricsTable reward_curve;
    reward_curve.columns = {"mean_reward", "smoothed_reward"};
    std::vector<double> rewards;
    for (const StepRecord& r : result.records) {
        rewards.push_back(r.mean_reward);
        const size_t window = std::min<size_t>(rewards.size(), 50);
        reward_curve.add_row(r.step, {r.mean_reward, tail_mean(rewards, window)});
    }
    emit_plots(reward_curve, dir + "/reward_curve", "intrinsic reward during RL");

    if (!result.evals.empty()) {
        MetricsTable eval_curve;
        eval_curve.columns = {"mini_geneval_overall"};
        for (const auto& [step, report] : result.evals) {
            eval_curve.add_row(step, {report.overall});
        }
        emit_plots(eval_curve, dir + "/mini_geneval_curve", "mini-GenEval during RL");
    }

    snapshot_config(cfg, dir);
    return 0;
}

// ------------------------------------------------------------------- eval

inline const std::set<std::string> kEvalKeys = {"out",        "checkpoint",  "eval_records",
                                                "samples_per_prompt", "eval_seed", "probe_seed",
                                                "seed"};

inline nlohmann::ordered_json eval_report(const PolicyParams& params, const Vocab& vocab,
                                          int eval_records, int samples_per_prompt,
                                          uint64_t eval_seed, uint64_t probe_seed) {
    Rng rng(eval_seed);
    PairDataset d = make_pair_dataset(rng, eval_records, vocab.world);
    std::vector<PairRecord> records = d.train;
    records.insert(records.end(), d.heldout.begin(), d.heldout.end());

    const GenerationReport gen =
        evaluate_generation(params, records, samples_per_prompt, eval_seed, vocab);
    const UnderstandingReport und = evaluate_understanding(params, records, vocab, probe_seed);
    const double baseline = random_grid_baseline(records, samples_per_prompt, eval_seed, vocab.world);

    nlohmann::ordered_json j;
    j["eval_records"] = eval_records;
    j["samples_per_prompt"] = samples_per_prompt;
    j["eval_seed"] = eval_seed;
    j["probe_seed"] = probe_seed;
    j["mini_geneval"] = generation_report_to_json(gen);
    j["random_grid_baseline"] = baseline;
    j["understanding_logprob"] = und.mean_token_logprob;
    j["probe_accuracy"] = und.probe_accuracy;
    return j;
}

inline int cmd_eval(const KeyValueConfig& cfg) {
    cfg.require_known(kEvalKeys);
    const std::string dir = out_dir(cfg);
    const Checkpoint ckpt = load_checkpoint(cfg.get_required("checkpoint"));
    const auto j = eval_report(ckpt.params, ckpt.vocab,
                               static_cast<int>(cfg.get_int("eval_records", 128)),
                               static_cast<int>(cfg.get_int("samples_per_prompt", 2)),
                               cfg.get_u64("eval_seed", 9000), cfg.get_u64("probe_seed", 777));
    write_json(dir + "/eval_report.json", j);
    snapshot_config(cfg, dir);
    return 0;
}

// ------------------------------------------------------------ sensitivity

inline const std::set<std::string> kSensitivityKeys = {"out", "checkpoint", "n_samples", "seed"};

struct SensitivitySummary {
    // mean rewards and drops per category over faithful pairs
    std::map<std::string, double> mean_reward;
    std::map<std::string, double> mean_delta;
    std::map<std::string, double> mean_relative;
    std::map<std::string, double> sign_test_p;
    double mean_full_reward = 0.0;
    int n_samples = 0;
};

/// Scores n faithful (prompt, oracle render) pairs under every ablation.
inline SensitivitySummary sensitivity_summary(const PolicyParams& scorer, const Vocab& vocab,
                                              int n_samples, uint64_t seed,
                                              std::vector<SensitivityReport>* reports = nullptr) {
    require(n_samples >= 1, "config", "n_samples must be >= 1");
    const WorldConfig& world = vocab.world;
    std::vector<SensitivityReport> all(static_cast<size_t>(n_samples));
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(n_samples); ++i) {
        Rng rng(Rng::mix({seed, 0x73656e73ull, static_cast<uint64_t>(i)}));
        const Difficulty difficulty = kAllDifficulties[rng.below(kAllDifficulties.size())];
        const Scene scene = sample_scene(rng, difficulty, world);
        const std::string prompt = describe_scene(scene, world);
        const ImageTokens image = encode_image(render_scene(scene, world), vocab);
        all[static_cast<size_t>(i)] = sensitivity_sweep(scorer, vocab.system_prefix, prompt, image,
                                                        vocab, kAllPromptCategories);
    }

    SensitivitySummary summary;
    summary.n_samples = n_samples;
    std::map<std::string, std::vector<double>> deltas;
    std::map<std::string, std::vector<double>> rewards;
    std::map<std::string, std::vector<double>> relatives;
    double full_sum = 0.0;
    for (const SensitivityReport& r : all) {
        full_sum += r.full_reward;
        for (const SensitivityEntry& e : r.entries) {
            if (!e.applicable) {
                continue;
            }
            deltas[e.category].push_back(e.delta);
            rewards[e.category].push_back(e.reward);
            relatives[e.category].push_back(e.relative);
        }
    }
    summary.mean_full_reward = full_sum / n_samples;
    for (const auto& [category, ds] : deltas) {
        summary.mean_delta[category] = mean_of(ds);
        summary.mean_reward[category] = mean_of(rewards.at(category));
        summary.mean_relative[category] = mean_of(relatives.at(category));
        summary.sign_test_p[category] = sign_test_p_value(ds);
    }
    if (reports != nullptr) {
        *reports = std::move(all);
    }
    return summary;
}

inline int cmd_sensitivity(const KeyValueConfig& cfg) {
    cfg.require_known(kSensitivityKeys);
    const std::string dir = out_dir(cfg);
    const Checkpoint ckpt = load_checkpoint(cfg.get_required("checkpoint"));
    const int n_samples = static_cast<int>(cfg.get_int("n_samples", 200));
    const uint64_t seed = cfg.get_u64("seed", 31);

    std::vector<SensitivityReport> reports;
    const SensitivitySummary summary =
        sensitivity_summary(ckpt.params, ckpt.vocab, n_samples, seed, &reports);

    nlohmann::ordered_json j;
    j["n_samples"] = summary.n_samples;
    j["mean_full_reward"] = summary.mean_full_reward;
    for (const auto& [category, delta] : summary.mean_delta) {
        nlohmann::ordered_json row;
        row["mean_reward"] = summary.mean_reward.at(category);
        row["mean_delta"] = delta;
        row["mean_relative"] = summary.mean_relative.at(category);
        row["sign_test_p"] = summary.sign_test_p.at(category);
        j["categories"][category] = row;
    }
    write_json(dir + "/sensitivity.json", j);

    // reward-relative bars in a fixed category order, as a table + SVG
    const std::vector<std::string> order = {"color", "count", "position", "combined"};
    std::vector<std::string> labels;
    std::vector<double> values;
    std::string csv = "category,mean_reward,mean_delta,mean_relative,sign_test_p\n";
    char buf[256];
    for (const std::string& c : order) {
        if (!summary.mean_delta.count(c)) {
            continue;
        }
        labels.push_back(c);
        values.push_back(summary.mean_relative.at(c));
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", c.c_str(),
                      summary.mean_reward.at(c), summary.mean_delta.at(c),
                      summary.mean_relative.at(c), summary.sign_test_p.at(c));
        csv += buf;
    }
    write_text(dir + "/sensitivity.csv", csv);
    write_text(dir + "/sensitivity.svg",
               bar_chart_svg(labels, values, "intrinsic reward relative to the full prompt"));

    // one JSON line per full-prompt evaluation
    std::string jsonl;
    for (const SensitivityReport& r : reports) {
        RewardReport rr;
        rr.reward = r.full_reward;
        rr.prompt_length = 0;
        rr.scorer_id = ckpt.metadata.count("scorer_id") ? ckpt.metadata.at("scorer_id") : "";
        nlohmann::ordered_json line;
        line["prompt"] = r.prompt;
        line["full_reward"] = r.full_reward;
        for (const SensitivityEntry& e : r.entries) {
            line["ablations"][e.category] = {{"applicable", e.applicable},
                                             {"prompt", e.ablated_prompt},
                                             {"reward", e.reward},
                                             {"delta", e.delta}};
        }
        jsonl += line.dump();
        jsonl += '\n';
    }
    write_text(dir + "/sensitivity.jsonl", jsonl);
    snapshot_config(cfg, dir);
    return 0;
}

// ---------------------------------------------------------- compare-bases

inline std::set<std::string> compare_keys() {
    std::set<std::string> keys = kGrpoKeys;
    keys.insert("out");
    keys.insert("weak_checkpoint");
    keys.insert("regular_checkpoint");
    keys.insert("samples_per_prompt");
    return keys;
}

struct CompareBasesResult {
    double weak_before = 0.0, weak_after = 0.0, weak_rel = 0.0;
    double regular_before = 0.0, regular_after = 0.0, regular_rel = 0.0;
    bool gap_ordering_ok = false;
};

inline CompareBasesResult compare_bases(const Checkpoint& weak, const Checkpoint& regular,
                                        const GrpoConfig& gcfg, int samples_per_prompt,
                                        const std::string& dir) {
    // fixed eval set shared by all four measurements
    Rng rng(gcfg.eval_seed);
    PairDataset d = make_pair_dataset(rng, gcfg.eval_records, weak.vocab.world);
    std::vector<PairRecord> records = d.train;
    records.insert(records.end(), d.heldout.begin(), d.heldout.end());

    auto run_one = [&](const Checkpoint& base, const std::string& tag, double& before,
                       double& after) {
        before = evaluate_generation(base.params, records, samples_per_prompt, gcfg.eval_seed,
                                     base.vocab)
                     .overall;
        GrpoTrainer trainer(PolicyHandles::from_base(base.params), gcfg, base.vocab);
        Metadata meta = base.metadata;
        meta["compare_tag"] = tag;
        train_loop(trainer, scene_prompt_sampler(base.vocab.world, gcfg.seed), dir + "/" + tag, meta);
        after = evaluate_generation(trainer.handles().live, records, samples_per_prompt,
                                    gcfg.eval_seed, base.vocab)
                    .overall;
    };

    CompareBasesResult r;
    run_one(weak, "weak", r.weak_before, r.weak_after);
    run_one(regular, "regular", r.regular_before, r.regular_after);
    r.weak_rel = (r.weak_after - r.weak_before) / r.weak_before;
    r.regular_rel = (r.regular_after - r.regular_before) / r.regular_before;
    r.gap_ordering_ok = r.weak_rel > r.regular_rel;
    return r;
}

inline int cmd_compare_bases(const KeyValueConfig& cfg) {
    cfg.require_known(compare_keys());
    const std::string dir = out_dir(cfg);
    const Checkpoint weak = load_checkpoint(cfg.get_required("weak_checkpoint"));
    const Checkpoint regular = load_checkpoint(cfg.get_required("regular_checkpoint"));
    if (weak.metadata.count("understanding_steps") && regular.metadata.count("understanding_steps")) {
        validate_profile_pair(
            BaseProfile{"weak", std::stoi(weak.metadata.at("understanding_steps")),
                        std::stoi(weak.metadata.at("generation_steps"))},
            BaseProfile{"regular", std::stoi(regular.metadata.at("understanding_steps")),
                        std::stoi(regular.metadata.at("generation_steps"))});
    }
    const GrpoConfig gcfg = grpo_config_from(cfg);
    const int samples = static_cast<int>(cfg.get_int("samples_per_prompt", 2));
    const CompareBasesResult r = compare_bases(weak, regular, gcfg, samples, dir);

    nlohmann::ordered_json j;
    j["weak"] = {{"before", r.weak_before},
                 {"after", r.weak_after},
                 {"relative_improvement", r.weak_rel}};
    j["regular"] = {{"before", r.regular_before},
                    {"after", r.regular_after},
                    {"relative_improvement", r.regular_rel}};
    j["gap_ordering_ok"] = r.gap_ordering_ok;
    write_json(dir + "/compare_report.json", j);
    write_text(dir + "/compare.svg",
               bar_chart_svg({"weak", "regular"}, {r.weak_rel, r.regular_rel},
                             "relative mini-GenEval improvement after RL"));
    snapshot_config(cfg, dir);
    return 0;
}

// ------------------------------------------------------------------- plot

inline const std::set<std::string> kPlotKeys = {"out", "run", "csv", "columns", "title"};

inline int cmd_plot(const KeyValueConfig& cfg) {
    cfg.require_known(kPlotKeys);
    const std::string dir = out_dir(cfg);
    MetricsTable table;
    if (cfg.has("csv")) {
        table = metrics_from_csv(read_text(cfg.get_required("csv")));
    } else {
        const std::string run = cfg.get_required("run");
        std::vector<std::string> columns;
        std::string spec = cfg.get_string("columns", "mean_reward,objective,kl,grad_norm");
        size_t start = 0;
        while (start <= spec.size()) {
            size_t comma = spec.find(',', start);
            if (comma == std::string::npos) {
                comma = spec.size();
            }
            columns.push_back(spec.substr(start, comma - start));
            start = comma + 1;
        }
        table = metrics_from_jsonl(read_text(run + "/metrics.jsonl"), columns);
    }
    emit_plots(table, dir + "/plot", cfg.get_string("title", "metrics"));
    return 0;
}

} // namespace harness

} // namespace umm
