// Command-line front end: every subcommand loads a JSON experiment config,
// applies --seed/--out overrides, and runs one pipeline stage (or all of
// them). Failures print a single JSON line on stderr and exit nonzero.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "stepwise/error.hpp"
#include "stepwise/harness.hpp"

namespace {

using nlohmann::json;
using stepwise::ExperimentConfig;
using stepwise::StageRecord;

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

CLI::App* add_stage_command(CLI::App& app, CommonArgs& args, const char* name,
                            const char* description) {
    CLI::App* cmd = app.add_subcommand(name, description);
    cmd->add_option("--config", args.config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    args.seed_opt = cmd->add_option("--seed", args.seed, "override the master seed");
    args.out_opt = cmd->add_option("--out", args.out_dir, "override the output directory");
    return cmd;
}

ExperimentConfig load_with_overrides(const CommonArgs& args) {
    ExperimentConfig config = stepwise::load_config(args.config_path);
    if (args.seed_opt->count() > 0) {
        config.seed = args.seed;
    }
    if (args.out_opt->count() > 0) {
        config.out_dir = args.out_dir;
    }
    stepwise::validate_experiment(config);
    return config;
}

void print_record(const StageRecord& record) {
    if (record.status == "complete") {
        std::printf("%-9s %s (%.2fs)\n", record.name.c_str(), record.status.c_str(),
                    record.seconds);
    } else {
        std::printf("%-9s %s\n", record.name.c_str(), record.status.c_str());
    }
}

void run_single_stage(const ExperimentConfig& config, const char* name,
                      StageRecord (*stage)(const ExperimentConfig&)) {
    stepwise::prepare_run_dir(config);
    try {
        const StageRecord record = stage(config);
        stepwise::record_stage(config, record);
        print_record(record);
    } catch (const stepwise::Error& e) {
        StageRecord failed;
        failed.name = name;
        failed.status = std::string("failed: ") + e.what();
        stepwise::record_stage(config, failed);
        throw;
    }
}

int fail(const char* category, const json& extra) {
    json line = extra;
    line["error"] = category;
    std::cerr << line.dump() << "\n";
    return 0;  // caller supplies the exit code
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"step-level reasoning pipeline over synthetic arithmetic tasks"};
    app.require_subcommand(1);

    CommonArgs args[6];
    CLI::App* gen = add_stage_command(app, args[0], "gen-tasks",
                                      "generate train/eval/demo task sets");
    CLI::App* star = add_stage_command(app, args[1], "star",
                                       "bootstrap the policy and run self-taught rationales");
    CLI::App* prm = add_stage_command(app, args[2], "train-prm",
                                      "train the process reward model");
    CLI::App* grpo = add_stage_command(app, args[3], "train-grpo",
                                       "tune the policy with group-relative RL");
    CLI::App* decode = add_stage_command(app, args[4], "decode-eval",
                                         "evaluate decode strategies on the eval set");
    CLI::App* pipeline = add_stage_command(app, args[5], "pipeline",
                                           "run every enabled stage in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help and friends
        }
        fail("usage", json{{"message", e.what()}});
        return 64;
    }

    try {
        if (gen->parsed()) {
            run_single_stage(load_with_overrides(args[0]), "gen-tasks", stepwise::run_gen_tasks);
        } else if (star->parsed()) {
            run_single_stage(load_with_overrides(args[1]), "star", stepwise::run_star_stage);
        } else if (prm->parsed()) {
            run_single_stage(load_with_overrides(args[2]), "prm", stepwise::run_prm_stage);
        } else if (grpo->parsed()) {
            run_single_stage(load_with_overrides(args[3]), "grpo", stepwise::run_grpo_stage);
        } else if (decode->parsed()) {
            run_single_stage(load_with_overrides(args[4]), "decode", stepwise::run_decode_stage);
        } else if (pipeline->parsed()) {
            const stepwise::RunManifest manifest =
                stepwise::run_pipeline(load_with_overrides(args[5]));
            for (const StageRecord& record : manifest.stages) {
                print_record(record);
            }
        }
    } catch (const stepwise::ConfigError& e) {
        fail("config", json{{"key", e.key()}, {"message", e.what()}});
        return 2;
    } catch (const stepwise::PreconditionError& e) {
        fail("precondition", json{{"message", e.what()}});
        return 3;
    } catch (const stepwise::RecordError& e) {
        fail("record", json{{"line", e.line()}, {"message", e.what()}});
        return 4;
    } catch (const stepwise::Error& e) {
        fail("runtime", json{{"message", e.what()}});
        return 5;
    } catch (const std::exception& e) {
        fail("internal", json{{"message", e.what()}});
        return 70;
    }
    return 0;
}
