// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "umm/harness.hpp"

using namespace umm;
namespace fs = std::filesystem;

namespace {

struct HarnessDir {
    fs::path root;
    HarnessDir() {
        root = fs::temp_directory_path() / ("umm_harness_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~HarnessDir() {
        std::error_code ec;
        fs::remove_all(root, ec);
    }
    std::string sub(const std::string& name) const { return (root / name).string(); }
};

KeyValueConfig tiny_pretrain_cfg(const std::string& out) {
    KeyValueConfig cfg;
    cfg.set("out", out);
    cfg.set("seed", "42");
    cfg.set("profile", "regular");
    cfg.set("understanding_steps", "30");
    cfg.set("generation_steps", "30");
    cfg.set("dataset_size", "96");
    cfg.set("batch_size", "4");
    cfg.set("eval_samples", "1");
    return cfg;
}

} // namespace

TEST_CASE("pretrain, eval, rl, sensitivity, and plot commands produce run directories") {
    HarnessDir tmp;
    const std::string pre = tmp.sub("pretrain");
    REQUIRE(harness::cmd_pretrain(tiny_pretrain_cfg(pre)) == 0);
    REQUIRE(fs::exists(pre + "/checkpoint.bin"));
    REQUIRE(fs::exists(pre + "/pretrain_report.json"));
    REQUIRE(fs::exists(pre + "/dataset.jsonl"));
    REQUIRE(fs::exists(pre + "/understanding_loss.csv"));
    REQUIRE(fs::exists(pre + "/understanding_loss.svg"));
    REQUIRE(fs::exists(pre + "/config.cfg"));

    // the dataset file reloads against the same world
    const PairDataset dataset =
        dataset_from_jsonl(harness::read_text(pre + "/dataset.jsonl"), WorldConfig{});
    REQUIRE(dataset.train.size() + dataset.heldout.size() == 96);

    // eval is deterministic: two runs produce byte-identical reports
    KeyValueConfig ecfg;
    ecfg.set("checkpoint", pre + "/checkpoint.bin");
    ecfg.set("eval_records", "24");
    ecfg.set("samples_per_prompt", "1");
    ecfg.set("out", tmp.sub("eval_a"));
    REQUIRE(harness::cmd_eval(ecfg) == 0);
    ecfg.set("out", tmp.sub("eval_b"));
    REQUIRE(harness::cmd_eval(ecfg) == 0);
    const std::string report_a = harness::read_text(tmp.sub("eval_a") + "/eval_report.json");
    const std::string report_b = harness::read_text(tmp.sub("eval_b") + "/eval_report.json");
    REQUIRE(report_a == report_b);
    REQUIRE(nlohmann::json::parse(report_a).contains("mini_geneval"));

    // a short RL run from the pretrained base
    KeyValueConfig rcfg;
    rcfg.set("base", pre + "/checkpoint.bin");
    rcfg.set("out", tmp.sub("rl"));
    rcfg.set("seed", "5");
    rcfg.set("group_size", "2");
    rcfg.set("total_steps", "3");
    REQUIRE(harness::cmd_rl(rcfg) == 0);
    REQUIRE(fs::exists(tmp.sub("rl") + "/metrics.jsonl"));
    REQUIRE(fs::exists(tmp.sub("rl") + "/reward_curve.csv"));
    REQUIRE(fs::exists(tmp.sub("rl") + "/reward_curve.svg"));
    REQUIRE(fs::exists(tmp.sub("rl") + "/ckpt_final.bin"));

    // plot from the run directory; CSV and SVG agree through the re-parse path
    KeyValueConfig plcfg;
    plcfg.set("run", tmp.sub("rl"));
    plcfg.set("columns", "mean_reward,kl");
    plcfg.set("out", tmp.sub("plots"));
    REQUIRE(harness::cmd_plot(plcfg) == 0);
    const MetricsTable plotted =
        metrics_from_csv(harness::read_text(tmp.sub("plots") + "/plot.csv"));
    REQUIRE(plotted.size() == 3);
    REQUIRE(plotted.columns == std::vector<std::string>{"mean_reward", "kl"});

    // sensitivity on the tiny checkpoint
    KeyValueConfig scfg;
    scfg.set("checkpoint", pre + "/checkpoint.bin");
    scfg.set("n_samples", "8");
    scfg.set("seed", "3");
    scfg.set("out", tmp.sub("sens"));
    REQUIRE(harness::cmd_sensitivity(scfg) == 0);
    REQUIRE(fs::exists(tmp.sub("sens") + "/sensitivity.json"));
    REQUIRE(fs::exists(tmp.sub("sens") + "/sensitivity.csv"));
    REQUIRE(fs::exists(tmp.sub("sens") + "/sensitivity.svg"));
    const auto sens = nlohmann::json::parse(harness::read_text(tmp.sub("sens") + "/sensitivity.json"));
    REQUIRE(sens.at("n_samples").get<int>() == 8);
    REQUIRE(sens.at("categories").contains("combined"));
}

TEST_CASE("rl metrics are bit-identical across repeated runs") {
    HarnessDir tmp;
    const std::string pre = tmp.sub("pretrain");
    KeyValueConfig pcfg = tiny_pretrain_cfg(pre);
    pcfg.set("understanding_steps", "10");
    pcfg.set("generation_steps", "10");
    REQUIRE(harness::cmd_pretrain(pcfg) == 0);

    KeyValueConfig rcfg;
    rcfg.set("base", pre + "/checkpoint.bin");
    rcfg.set("seed", "9");
    rcfg.set("group_size", "2");
    rcfg.set("total_steps", "4");
    rcfg.set("out", tmp.sub("rl_a"));
    REQUIRE(harness::cmd_rl(rcfg) == 0);
    rcfg.set("out", tmp.sub("rl_b"));
    REQUIRE(harness::cmd_rl(rcfg) == 0);
    REQUIRE(harness::read_text(tmp.sub("rl_a") + "/metrics.jsonl") ==
            harness::read_text(tmp.sub("rl_b") + "/metrics.jsonl"));
}

TEST_CASE("commands fail with structured errors") {
    HarnessDir tmp;
    KeyValueConfig cfg;
    cfg.set("out", tmp.sub("x"));
    cfg.set("base", tmp.sub("missing.bin"));
    try {
        harness::cmd_rl(cfg);
        FAIL("missing checkpoint must throw");
    } catch (const Error& e) {
        REQUIRE(e.kind() == "io");
    }

    KeyValueConfig bad = tiny_pretrain_cfg(tmp.sub("y"));
    bad.set("gruop_size", "8");
    try {
        harness::cmd_pretrain(bad);
        FAIL("unknown key must be rejected");
    } catch (const Error& e) {
        REQUIRE(e.kind() == "config");
    }
}
