// t1lab: data generation, SFT, RL training, evaluation and analysis driver.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "t1lab/cli.hpp"

namespace {

using t1lab::cli::Options;

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "run config (INI)")->required();
    cmd->add_option("--seed", o.seed, "override run.seed");
    cmd->add_option("--out", o.out, "runs root directory (overrides run.out)");
    cmd->add_flag("--quiet", o.quiet, "suppress progress output");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"t1lab: RL scaling experiments on synthetic reasoning tasks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", T1LAB_VERSION);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "generate instance splits and the SFT trace corpus");
    add_common(gen, o);
    auto* filter = app.add_subcommand("filter", "pass-rate filter the RL split with a policy");
    add_common(filter, o);
    filter->add_option("--checkpoint", o.checkpoint, "policy checkpoint (default: checkpoints/sft.t1pk)");
    auto* sft = app.add_subcommand("sft", "supervised fine-tuning on the trace corpus");
    add_common(sft, o);
    auto* train = app.add_subcommand("train", "RL training");
    add_common(train, o);
    train->add_option("--checkpoint", o.checkpoint, "initial policy (default: checkpoints/sft.t1pk)");
    train->add_option("--resume", o.resume, "resume from a step checkpoint (any of its files)");
    auto* eval = app.add_subcommand("eval", "greedy accuracy on the eval split");
    add_common(eval, o);
    eval->add_option("--checkpoint", o.checkpoint, "policy checkpoint (default: checkpoints/final.t1pk)");
    auto* scaling = app.add_subcommand("scaling", "truncated inference-scaling curve and key-step report");
    add_common(scaling, o);
    scaling->add_option("--checkpoint", o.checkpoint, "policy checkpoint (default: checkpoints/final.t1pk)");
    auto* detect = app.add_subcommand("detect", "run the penalty detectors over a trajectory dump");
    add_common(detect, o);
    detect->add_option("--input", o.input, "trajectory dump (JSONL)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? t1lab::cli::kExitOk : t1lab::cli::kExitConfig;
    }

    namespace c = t1lab::cli;
    try {
        if (*gen) return c::cmd_gen_data(o);
        if (*filter) return c::cmd_filter(o);
        if (*sft) return c::cmd_sft(o);
        if (*train) return c::cmd_train(o);
        if (*eval) return c::cmd_eval(o);
        if (*scaling) return c::cmd_scaling(o);
        if (*detect) return c::cmd_detect(o);
    } catch (const t1lab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return c::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return c::kExitRuntime;
    }
    return c::kExitConfig;
}
