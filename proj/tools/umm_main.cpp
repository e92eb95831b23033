// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner for the self-teaching scene-world model: supervised
// pretraining, self-supervised GRPO, oracle evaluations, reward-sensitivity
// ablations, base comparisons, and plotting.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "umm/harness.hpp"

namespace {

umm::KeyValueConfig load_config(const std::string& config_path, const std::string& seed,
                                const std::string& out) {
    umm::KeyValueConfig cfg = config_path.empty() ? umm::KeyValueConfig()
                                                  : umm::KeyValueConfig::from_file(config_path);
    if (!seed.empty()) {
        cfg.set("seed", seed);
    }
    if (!out.empty()) {
        cfg.set("out", out);
    }
    return cfg;
}

void apply_thread_env() {
#ifdef _OPENMP
    if (const char* env = std::getenv("UMM_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            omp_set_num_threads(n);
        }
    }
#endif
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified-model self-teaching experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::string seed;
    std::string out;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key = value config file");
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--out", out, "override the output directory");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "train a base checkpoint");
    CLI::App* rl = app.add_subcommand("rl", "self-supervised GRPO from a base checkpoint");
    CLI::App* eval = app.add_subcommand("eval", "mini-GenEval + understanding reports");
    CLI::App* sensitivity =
        app.add_subcommand("sensitivity", "reward drop under prompt-term ablations");
    CLI::App* compare =
        app.add_subcommand("compare-bases", "paired RL runs on the weak and regular bases");
    CLI::App* plot = app.add_subcommand("plot", "CSV + SVG from run metrics");
    for (CLI::App* sub : {pretrain, rl, eval, sensitivity, compare, plot}) {
        add_common(sub);
    }

    CLI11_PARSE(app, argc, argv);
    apply_thread_env();

    try {
        const umm::KeyValueConfig cfg = load_config(config_path, seed, out);
        if (pretrain->parsed()) {
            return umm::harness::cmd_pretrain(cfg);
        }
        if (rl->parsed()) {
            return umm::harness::cmd_rl(cfg);
        }
        if (eval->parsed()) {
            return umm::harness::cmd_eval(cfg);
        }
        if (sensitivity->parsed()) {
            return umm::harness::cmd_sensitivity(cfg);
        }
        if (compare->parsed()) {
            return umm::harness::cmd_compare_bases(cfg);
        }
        if (plot->parsed()) {
            return umm::harness::cmd_plot(cfg);
        }
    } catch (const umm::Error& e) {
        std::cerr << "{\"error\":\"" << e.kind() << "\",\"detail\":" << nlohmann::json(e.detail())
                  << "}" << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "{\"error\":\"internal\",\"detail\":" << nlohmann::json(std::string(e.what()))
                  << "}" << std::endl;
        return 2;
    }
    return 0;
}
