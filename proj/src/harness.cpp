#include "stepwise/harness.hpp"

#include <chrono>
#include <cstdio>
#include <set>
#include <utility>

#include <json.hpp>

#include "stepwise/error.hpp"
#include "stepwise/io.hpp"
#include "stepwise/rng.hpp"

namespace stepwise {

using nlohmann::json;
namespace fs = std::filesystem;

// ============================================================================
// Names
// ============================================================================

std::string rl_algorithm_name(RlAlgorithm algorithm) {
    return algorithm == RlAlgorithm::PpoRlhf ? "ppo_rlhf" : "grpo";
}

RlAlgorithm rl_algorithm_from_name(std::string_view name) {
    if (name == "grpo") {
        return RlAlgorithm::Grpo;
    }
    if (name == "ppo_rlhf") {
        return RlAlgorithm::PpoRlhf;
    }
    throw ConfigError("algorithm", "unknown RL algorithm '" + std::string(name) + "'");
}

// ============================================================================
// Strict config parsing
// ============================================================================

namespace {

// Tracks which keys a section consumed; anything left over is a typo and
// fatal. Key paths are dotted for error messages.
class Section {
public:
    Section(const json& object, std::string path) : object_(object), path_(std::move(path)) {
        if (!object_.is_object()) {
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected a JSON object");
        }
    }

    std::string key_path(const char* key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const char* key) const { return object_.contains(key); }

    int get_int(const char* key, int fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_number_integer()) {
            throw ConfigError(key_path(key), "expected an integer");
        }
        return v->get<int>();
    }

    std::uint64_t get_u64(const char* key, std::uint64_t fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() &&
                                        v->get<std::int64_t>() < 0)) {
            throw ConfigError(key_path(key), "expected a non-negative integer");
        }
        return v->get<std::uint64_t>();
    }

    double get_double(const char* key, double fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_number()) {
            throw ConfigError(key_path(key), "expected a number");
        }
        return v->get<double>();
    }

    bool get_bool(const char* key, bool fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_boolean()) {
            throw ConfigError(key_path(key), "expected a boolean");
        }
        return v->get<bool>();
    }

    std::string get_string(const char* key, const std::string& fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_string()) {
            throw ConfigError(key_path(key), "expected a string");
        }
        return v->get<std::string>();
    }

    std::vector<int> get_int_list(const char* key, std::vector<int> fallback) {
        const json* v = lookup(key);
        if (v == nullptr) {
            return fallback;
        }
        if (!v->is_array()) {
            throw ConfigError(key_path(key), "expected an array of integers");
        }
        std::vector<int> out;
        for (const json& item : *v) {
            if (!item.is_number_integer()) {
                throw ConfigError(key_path(key), "expected an array of integers");
            }
            out.push_back(item.get<int>());
        }
        return out;
    }

    // Child object, or nullptr when absent (caller keeps defaults).
    const json* child(const char* key) {
        const json* v = lookup(key);
        if (v != nullptr && !v->is_object()) {
            throw ConfigError(key_path(key), "expected a JSON object");
        }
        return v;
    }

    const json* child_array(const char* key) {
        const json* v = lookup(key);
        if (v != nullptr && !v->is_array()) {
            throw ConfigError(key_path(key), "expected a JSON array");
        }
        return v;
    }

    // Unknown-key sweep; call after all fields were claimed.
    void done() const {
        for (const auto& item : object_.items()) {
            if (!seen_.contains(item.key())) {
                throw ConfigError(key_path(item.key().c_str()), "unknown key");
            }
        }
    }

private:
    const json* lookup(const char* key) {
        seen_.insert(key);
        const auto it = object_.find(key);
        return it == object_.end() ? nullptr : &*it;
    }

    const json& object_;
    std::string path_;
    std::set<std::string> seen_;
};

// Rethrows a module validator's ConfigError with the dotted path prefix.
template <typename Fn>
void scoped(const std::string& prefix, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + "." + e.key(), e.what());
    }
}

// ----------------------------------------------------------------------------
// Shared fragments
// ----------------------------------------------------------------------------

Limits parse_limits(const json& object, const std::string& path, Limits fallback) {
    Section s(object, path);
    Limits out = fallback;
    out.max_step_tokens = s.get_int("max_step_tokens", fallback.max_step_tokens);
    out.max_context_tokens = s.get_int("max_context_tokens", fallback.max_context_tokens);
    out.max_actions = s.get_int("max_actions", fallback.max_actions);
    s.done();
    return out;
}

json limits_to_json(const Limits& limits) {
    return json{{"max_step_tokens", limits.max_step_tokens},
                {"max_context_tokens", limits.max_context_tokens},
                {"max_actions", limits.max_actions}};
}

UniverseConfig parse_universe(const json& object, const std::string& path,
                              UniverseConfig fallback) {
    Section s(object, path);
    UniverseConfig out = fallback;
    out.step_deltas = s.get_int_list("step_deltas", fallback.step_deltas);
    out.answer_deltas = s.get_int_list("answer_deltas", fallback.answer_deltas);
    out.premature_answers = s.get_bool("premature_answers", fallback.premature_answers);
    s.done();
    return out;
}

json universe_to_json(const UniverseConfig& universe) {
    return json{{"step_deltas", universe.step_deltas},
                {"answer_deltas", universe.answer_deltas},
                {"premature_answers", universe.premature_answers}};
}

RewardConfig parse_rewards(const json& object, const std::string& path,
                           RewardConfig fallback) {
    Section s(object, path);
    RewardConfig out = fallback;
    out.step_correct = s.get_double("step_correct", fallback.step_correct);
    out.step_incorrect = s.get_double("step_incorrect", fallback.step_incorrect);
    out.final_correct = s.get_double("final_correct", fallback.final_correct);
    out.final_incorrect = s.get_double("final_incorrect", fallback.final_incorrect);
    s.done();
    return out;
}

json rewards_to_json(const RewardConfig& rewards) {
    return json{{"step_correct", rewards.step_correct},
                {"step_incorrect", rewards.step_incorrect},
                {"final_correct", rewards.final_correct},
                {"final_incorrect", rewards.final_incorrect}};
}

// ----------------------------------------------------------------------------
// Sections
// ----------------------------------------------------------------------------

TaskGenConfig parse_task_gen(const json& object, const std::string& path,
                             TaskGenConfig fallback) {
    Section s(object, path);
    TaskGenConfig out = fallback;
    if (s.has("kind")) {
        const std::string name = s.get_string("kind", "");
        try {
            out.kind = task_kind_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("kind"), "unknown task kind '" + name + "'");
        }
    }
    out.count = s.get_int("count", fallback.count);
    out.operand_count = s.get_int("operand_count", fallback.operand_count);
    out.min_operand = s.get_int("min_operand", fallback.min_operand);
    out.max_operand = s.get_int("max_operand", fallback.max_operand);
    out.min_modulus = s.get_int("min_modulus", fallback.min_modulus);
    out.max_modulus = s.get_int("max_modulus", fallback.max_modulus);
    out.unique_questions = s.get_bool("unique_questions", fallback.unique_questions);
    s.done();
    return out;
}

json task_gen_to_json(const TaskGenConfig& config) {
    return json{{"kind", task_kind_name(config.kind)},
                {"count", config.count},
                {"operand_count", config.operand_count},
                {"min_operand", config.min_operand},
                {"max_operand", config.max_operand},
                {"min_modulus", config.min_modulus},
                {"max_modulus", config.max_modulus},
                {"unique_questions", config.unique_questions}};
}

PolicyConfig parse_policy(const json& object, const std::string& path, PolicyConfig fallback) {
    Section s(object, path);
    PolicyConfig out = fallback;
    out.context_window = s.get_int("context_window", fallback.context_window);
    out.hint_positions = s.get_int("hint_positions", fallback.hint_positions);
    out.hidden_dim = s.get_int("hidden_dim", fallback.hidden_dim);
    out.init_scale = s.get_double("init_scale", fallback.init_scale);
    s.done();
    return out;
}

json policy_to_json(const PolicyConfig& config) {
    return json{{"context_window", config.context_window},
                {"hint_positions", config.hint_positions},
                {"hidden_dim", config.hidden_dim},
                {"init_scale", config.init_scale}};
}

BootstrapConfig parse_bootstrap(const json& object, const std::string& path,
                                BootstrapConfig fallback) {
    Section s(object, path);
    BootstrapConfig out = fallback;
    out.demo_count = s.get_int("demo_count", fallback.demo_count);
    out.lr = s.get_double("lr", fallback.lr);
    out.epochs = s.get_int("epochs", fallback.epochs);
    s.done();
    return out;
}

json bootstrap_to_json(const BootstrapConfig& config) {
    return json{{"demo_count", config.demo_count}, {"lr", config.lr}, {"epochs", config.epochs}};
}

StarConfig parse_star(const json& object, const std::string& path, StarConfig fallback) {
    Section s(object, path);
    StarConfig out = fallback;
    out.samples_per_question = s.get_int("samples_per_question", fallback.samples_per_question);
    out.temperature = s.get_double("temperature", fallback.temperature);
    if (s.has("mode")) {
        const std::string name = s.get_string("mode", "");
        try {
            out.mode = star_mode_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("mode"), "unknown mode '" + name + "'");
        }
    }
    out.max_iterations = s.get_int("max_iterations", fallback.max_iterations);
    out.accept_cap_per_question =
        s.get_int("accept_cap_per_question", fallback.accept_cap_per_question);
    out.min_steps = s.get_int("min_steps", fallback.min_steps);
    out.rationalize_fallback = s.get_bool("rationalize_fallback", fallback.rationalize_fallback);
    out.validate_with_policy = s.get_bool("validate_with_policy", fallback.validate_with_policy);
    out.finetune_lr = s.get_double("finetune_lr", fallback.finetune_lr);
    out.finetune_epochs = s.get_int("finetune_epochs", fallback.finetune_epochs);
    if (const json* limits = s.child("limits")) {
        out.limits = parse_limits(*limits, s.key_path("limits"), fallback.limits);
    }
    s.done();
    return out;
}

json star_to_json(const StarConfig& config) {
    return json{{"samples_per_question", config.samples_per_question},
                {"temperature", config.temperature},
                {"mode", star_mode_name(config.mode)},
                {"max_iterations", config.max_iterations},
                {"accept_cap_per_question", config.accept_cap_per_question},
                {"min_steps", config.min_steps},
                {"rationalize_fallback", config.rationalize_fallback},
                {"validate_with_policy", config.validate_with_policy},
                {"finetune_lr", config.finetune_lr},
                {"finetune_epochs", config.finetune_epochs},
                {"limits", limits_to_json(config.limits)}};
}

PrmStageConfig parse_prm_stage(const json& object, const std::string& path,
                               PrmStageConfig fallback) {
    Section s(object, path);
    PrmStageConfig out = fallback;
    out.model.context_window = s.get_int("context_window", fallback.model.context_window);
    out.model.hidden_dim = s.get_int("hidden_dim", fallback.model.hidden_dim);
    out.model.init_scale = s.get_double("init_scale", fallback.model.init_scale);
    if (s.has("mode")) {
        const std::string name = s.get_string("mode", "");
        try {
            out.model.mode = value_mode_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("mode"), "unknown value mode '" + name + "'");
        }
    }
    out.lr = s.get_double("lr", fallback.lr);
    out.epochs = s.get_int("epochs", fallback.epochs);
    if (const json* td = s.child("td")) {
        Section t(*td, s.key_path("td"));
        out.td.gamma = t.get_double("gamma", fallback.td.gamma);
        out.td.sweeps = t.get_int("sweeps", fallback.td.sweeps);
        out.td.epochs_per_sweep = t.get_int("epochs_per_sweep", fallback.td.epochs_per_sweep);
        out.td.lr = t.get_double("lr", fallback.td.lr);
        if (const json* limits = t.child("limits")) {
            out.td.limits = parse_limits(*limits, t.key_path("limits"), fallback.td.limits);
        }
        t.done();
    }
    if (const json* universe = s.child("universe")) {
        out.universe = parse_universe(*universe, s.key_path("universe"), fallback.universe);
    }
    if (const json* rewards = s.child("rewards")) {
        out.rewards = parse_rewards(*rewards, s.key_path("rewards"), fallback.rewards);
    }
    s.done();
    return out;
}

json prm_stage_to_json(const PrmStageConfig& config) {
    return json{{"context_window", config.model.context_window},
                {"hidden_dim", config.model.hidden_dim},
                {"init_scale", config.model.init_scale},
                {"mode", value_mode_name(config.model.mode)},
                {"lr", config.lr},
                {"epochs", config.epochs},
                {"td",
                 json{{"gamma", config.td.gamma},
                      {"sweeps", config.td.sweeps},
                      {"epochs_per_sweep", config.td.epochs_per_sweep},
                      {"lr", config.td.lr},
                      {"limits", limits_to_json(config.td.limits)}}},
                {"universe", universe_to_json(config.universe)},
                {"rewards", rewards_to_json(config.rewards)}};
}

GrpoStageConfig parse_grpo_stage(const json& object, const std::string& path,
                                 GrpoStageConfig fallback) {
    Section s(object, path);
    GrpoStageConfig out = fallback;
    if (s.has("algorithm")) {
        const std::string name = s.get_string("algorithm", "");
        try {
            out.algorithm = rl_algorithm_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("algorithm"), "unknown RL algorithm '" + name + "'");
        }
    }
    out.groups = s.get_int("groups", fallback.groups);
    out.ref_refresh_groups = s.get_int("ref_refresh_groups", fallback.ref_refresh_groups);
    out.grpo.group_size = s.get_int("group_size", fallback.grpo.group_size);
    out.grpo.temperature = s.get_double("temperature", fallback.grpo.temperature);
    out.grpo.clip_epsilon = s.get_double("clip_epsilon", fallback.grpo.clip_epsilon);
    out.grpo.kl_beta = s.get_double("kl_beta", fallback.grpo.kl_beta);
    out.grpo.updates_per_group = s.get_int("updates_per_group", fallback.grpo.updates_per_group);
    out.grpo.lr = s.get_double("lr", fallback.grpo.lr);
    out.grpo.std_epsilon = s.get_double("std_epsilon", fallback.grpo.std_epsilon);
    out.grpo.logratio_clamp = s.get_double("logratio_clamp", fallback.grpo.logratio_clamp);
    if (const json* limits = s.child("limits")) {
        out.grpo.limits = parse_limits(*limits, s.key_path("limits"), fallback.grpo.limits);
    }
    if (const json* rewards = s.child("rewards")) {
        out.grpo.rewards = parse_rewards(*rewards, s.key_path("rewards"), fallback.grpo.rewards);
    }
    // The trajectory-level baseline shares the sampling fields.
    out.ppo.group_size = out.grpo.group_size;
    out.ppo.temperature = out.grpo.temperature;
    out.ppo.kl_beta = out.grpo.kl_beta;
    out.ppo.lr = out.grpo.lr;
    out.ppo.limits = out.grpo.limits;
    out.ppo.rewards = out.grpo.rewards;
    s.done();
    return out;
}

json grpo_stage_to_json(const GrpoStageConfig& config) {
    return json{{"algorithm", rl_algorithm_name(config.algorithm)},
                {"groups", config.groups},
                {"ref_refresh_groups", config.ref_refresh_groups},
                {"group_size", config.grpo.group_size},
                {"temperature", config.grpo.temperature},
                {"clip_epsilon", config.grpo.clip_epsilon},
                {"kl_beta", config.grpo.kl_beta},
                {"updates_per_group", config.grpo.updates_per_group},
                {"lr", config.grpo.lr},
                {"std_epsilon", config.grpo.std_epsilon},
                {"logratio_clamp", config.grpo.logratio_clamp},
                {"limits", limits_to_json(config.grpo.limits)},
                {"rewards", rewards_to_json(config.grpo.rewards)}};
}

DecodeBudget parse_budget(const json& object, const std::string& path, DecodeBudget fallback) {
    Section s(object, path);
    DecodeBudget out = fallback;
    if (s.has("strategy")) {
        const std::string name = s.get_string("strategy", "");
        try {
            out.strategy = decode_strategy_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("strategy"), "unknown strategy '" + name + "'");
        }
    }
    out.n = s.get_int("n", fallback.n);
    out.beam_width = s.get_int("beam_width", fallback.beam_width);
    out.simulations = s.get_int("simulations", fallback.simulations);
    out.c_puct = s.get_double("c_puct", fallback.c_puct);
    out.expansion_width = s.get_int("expansion_width", fallback.expansion_width);
    out.temperature = s.get_double("temperature", fallback.temperature);
    out.lambda = s.get_double("lambda", fallback.lambda);
    if (s.has("expansion")) {
        const std::string name = s.get_string("expansion", "");
        try {
            out.expansion = expansion_source_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("expansion"), "unknown expansion source '" + name + "'");
        }
    }
    if (s.has("bon_scorer")) {
        const std::string name = s.get_string("bon_scorer", "");
        try {
            out.bon_scorer = bon_scorer_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError(s.key_path("bon_scorer"), "unknown scorer '" + name + "'");
        }
    }
    if (const json* universe = s.child("universe")) {
        out.universe = parse_universe(*universe, s.key_path("universe"), fallback.universe);
    }
    if (const json* limits = s.child("limits")) {
        out.limits = parse_limits(*limits, s.key_path("limits"), fallback.limits);
    }
    s.done();
    return out;
}

json budget_to_json(const DecodeBudget& budget) {
    return json{{"strategy", decode_strategy_name(budget.strategy)},
                {"n", budget.n},
                {"beam_width", budget.beam_width},
                {"simulations", budget.simulations},
                {"c_puct", budget.c_puct},
                {"expansion_width", budget.expansion_width},
                {"temperature", budget.temperature},
                {"lambda", budget.lambda},
                {"expansion", expansion_source_name(budget.expansion)},
                {"bon_scorer", bon_scorer_name(budget.bon_scorer)},
                {"universe", universe_to_json(budget.universe)},
                {"limits", limits_to_json(budget.limits)}};
}

StageToggles parse_stages(const json& object, const std::string& path, StageToggles fallback) {
    Section s(object, path);
    StageToggles out = fallback;
    out.star = s.get_bool("star", fallback.star);
    out.prm = s.get_bool("prm", fallback.prm);
    out.grpo = s.get_bool("grpo", fallback.grpo);
    out.decode = s.get_bool("decode", fallback.decode);
    s.done();
    return out;
}

json stages_to_json(const StageToggles& stages) {
    return json{{"star", stages.star},
                {"prm", stages.prm},
                {"grpo", stages.grpo},
                {"decode", stages.decode}};
}

void check_task_gen(const std::string& prefix, const TaskGenConfig& config) {
    if (config.count < 1) {
        throw ConfigError(prefix + ".count", "must be at least 1");
    }
    if (config.operand_count < 2) {
        throw ConfigError(prefix + ".operand_count", "must be at least 2");
    }
    if (config.min_operand < 0 || config.min_operand > config.max_operand) {
        throw ConfigError(prefix + ".min_operand", "need 0 <= min_operand <= max_operand");
    }
    if (config.kind == TaskKind::ModularChain &&
        (config.min_modulus < 2 || config.min_modulus > config.max_modulus)) {
        throw ConfigError(prefix + ".min_modulus", "need 2 <= min_modulus <= max_modulus");
    }
}

}  // namespace

ExperimentConfig default_experiment() {
    ExperimentConfig config;
    config.decode.push_back(DecodeBudget{});  // greedy
    return config;
}

ExperimentConfig parse_config(const std::string& text) {
    const json root_json = json::parse(text, nullptr, false);
    if (root_json.is_discarded()) {
        throw ConfigError("<root>", "not valid JSON");
    }
    Section root(root_json, "");
    const ExperimentConfig base = default_experiment();
    ExperimentConfig out = base;
    out.decode.clear();

    if (const json* v = root.child("train_tasks")) {
        out.train_tasks = parse_task_gen(*v, "train_tasks", base.train_tasks);
    }
    if (const json* v = root.child("eval_tasks")) {
        out.eval_tasks = parse_task_gen(*v, "eval_tasks", base.eval_tasks);
    }
    if (const json* v = root.child("policy")) {
        out.policy = parse_policy(*v, "policy", base.policy);
    }
    if (const json* v = root.child("bootstrap")) {
        out.bootstrap = parse_bootstrap(*v, "bootstrap", base.bootstrap);
    }
    if (const json* v = root.child("star")) {
        out.star = parse_star(*v, "star", base.star);
    }
    if (const json* v = root.child("prm")) {
        out.prm = parse_prm_stage(*v, "prm", base.prm);
    }
    if (const json* v = root.child("grpo")) {
        out.grpo = parse_grpo_stage(*v, "grpo", base.grpo);
    }
    if (const json* v = root.child_array("decode")) {
        std::size_t index = 0;
        for (const json& item : *v) {
            out.decode.push_back(
                parse_budget(item, "decode[" + std::to_string(index) + "]", DecodeBudget{}));
            ++index;
        }
    } else {
        out.decode = base.decode;
    }
    if (const json* v = root.child("stages")) {
        out.stages = parse_stages(*v, "stages", base.stages);
    }
    out.seed = root.get_u64("seed", base.seed);
    out.out_dir = root.get_string("out_dir", base.out_dir);
    root.done();

    validate_experiment(out);
    return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const RecordError& e) {
        throw ConfigError("<file>", e.what());
    }
    return parse_config(text);
}

std::string serialize_config(const ExperimentConfig& config) {
    json decode = json::array();
    for (const DecodeBudget& budget : config.decode) {
        decode.push_back(budget_to_json(budget));
    }
    const json root{{"train_tasks", task_gen_to_json(config.train_tasks)},
                    {"eval_tasks", task_gen_to_json(config.eval_tasks)},
                    {"policy", policy_to_json(config.policy)},
                    {"bootstrap", bootstrap_to_json(config.bootstrap)},
                    {"star", star_to_json(config.star)},
                    {"prm", prm_stage_to_json(config.prm)},
                    {"grpo", grpo_stage_to_json(config.grpo)},
                    {"decode", std::move(decode)},
                    {"stages", stages_to_json(config.stages)},
                    {"seed", config.seed},
                    {"out_dir", config.out_dir}};
    return root.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& config) {
    const std::uint64_t h = fnv1a64(serialize_config(config));
    char buffer[17];
    std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(h));
    return buffer;
}

void validate_experiment(const ExperimentConfig& config) {
    check_task_gen("train_tasks", config.train_tasks);
    check_task_gen("eval_tasks", config.eval_tasks);
    if (config.policy.context_window < 1 || config.policy.hidden_dim < 1 ||
        config.policy.hint_positions < 0) {
        throw ConfigError("policy", "dimensions must be positive (hint_positions >= 0)");
    }
    if (config.bootstrap.demo_count < 0) {
        throw ConfigError("bootstrap.demo_count", "must be non-negative");
    }
    if (!(config.bootstrap.lr > 0.0)) {
        throw ConfigError("bootstrap.lr", "must be positive");
    }
    if (config.bootstrap.epochs < 0) {
        throw ConfigError("bootstrap.epochs", "must be non-negative");
    }
    scoped("star", [&] { validate_star_config(config.star); });
    if (config.prm.model.context_window < 1 || config.prm.model.hidden_dim < 1) {
        throw ConfigError("prm", "dimensions must be positive");
    }
    if (!(config.prm.lr > 0.0)) {
        throw ConfigError("prm.lr", "must be positive");
    }
    if (config.prm.epochs < 1) {
        throw ConfigError("prm.epochs", "must be at least 1");
    }
    if (!(config.prm.td.gamma > 0.0) || config.prm.td.gamma > 1.0) {
        throw ConfigError("prm.td.gamma", "must lie in (0, 1]");
    }
    if (config.prm.td.sweeps < 1 || config.prm.td.epochs_per_sweep < 1) {
        throw ConfigError("prm.td.sweeps", "sweeps and epochs_per_sweep must be at least 1");
    }
    if (!(config.prm.td.lr > 0.0)) {
        throw ConfigError("prm.td.lr", "must be positive");
    }
    scoped("prm", [&] { validate_reward_config(config.prm.rewards); });
    if (config.grpo.groups < 1) {
        throw ConfigError("grpo.groups", "must be at least 1");
    }
    if (config.grpo.ref_refresh_groups < 1) {
        throw ConfigError("grpo.ref_refresh_groups", "must be at least 1");
    }
    scoped("grpo", [&] { validate_grpo_config(config.grpo.grpo); });
    if (config.decode.empty()) {
        throw ConfigError("decode", "need at least one decode budget");
    }
    for (std::size_t i = 0; i < config.decode.size(); ++i) {
        scoped("decode[" + std::to_string(i) + "]",
               [&] { validate_decode_budget(config.decode[i]); });
    }
    if (config.out_dir.empty()) {
        throw ConfigError("out_dir", "must not be empty");
    }
}

// ============================================================================
// Manifest
// ============================================================================

namespace {

json manifest_to_json(const RunManifest& manifest) {
    json seeds = json::array();
    for (const auto& [name, seed] : manifest.stage_seeds) {
        seeds.push_back(json::array({name, seed}));
    }
    json stages = json::array();
    for (const StageRecord& record : manifest.stages) {
        stages.push_back(json{{"name", record.name},
                              {"status", record.status},
                              {"seconds", record.seconds},
                              {"inputs", record.inputs},
                              {"outputs", record.outputs}});
    }
    return json{{"config_hash", manifest.config_hash},
                {"code_version", manifest.code_version},
                {"master_seed", manifest.master_seed},
                {"stage_seeds", std::move(seeds)},
                {"stages", std::move(stages)}};
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
    atomic_write(path, manifest_to_json(manifest).dump(2) + "\n");
}

RunManifest read_manifest(const std::filesystem::path& path) {
    const json root = json::parse(read_file(path), nullptr, false);
    if (root.is_discarded() || !root.is_object()) {
        throw RecordError(0, "manifest is not a JSON object");
    }
    RunManifest manifest;
    try {
        manifest.config_hash = root.at("config_hash").get<std::string>();
        manifest.code_version = root.at("code_version").get<std::string>();
        manifest.master_seed = root.at("master_seed").get<std::uint64_t>();
        for (const json& pair : root.at("stage_seeds")) {
            manifest.stage_seeds.emplace_back(pair.at(0).get<std::string>(),
                                              pair.at(1).get<std::uint64_t>());
        }
        for (const json& stage : root.at("stages")) {
            StageRecord record;
            record.name = stage.at("name").get<std::string>();
            record.status = stage.at("status").get<std::string>();
            record.seconds = stage.at("seconds").get<double>();
            record.inputs = stage.at("inputs").get<std::vector<std::string>>();
            record.outputs = stage.at("outputs").get<std::vector<std::string>>();
            manifest.stages.push_back(std::move(record));
        }
    } catch (const json::exception& e) {
        throw RecordError(0, std::string("malformed manifest: ") + e.what());
    }
    return manifest;
}

// ============================================================================
// Stage plumbing
// ============================================================================

std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) {
    return Rng(master).substream(stage).next_u64();
}

namespace {

constexpr const char* kStageNames[] = {"tasks", "star-init", "star", "prm", "grpo", "decode"};

fs::path art(const ExperimentConfig& config, const char* name) {
    return fs::path(config.out_dir) / name;
}

bool all_exist(const ExperimentConfig& config, const std::vector<std::string>& names) {
    for (const std::string& name : names) {
        if (!fs::exists(fs::path(config.out_dir) / name)) {
            return false;
        }
    }
    return true;
}

void require_inputs(const ExperimentConfig& config, const std::vector<std::string>& names) {
    for (const std::string& name : names) {
        if (!fs::exists(fs::path(config.out_dir) / name)) {
            throw PreconditionError("missing artifact '" + name +
                                    "' in '" + config.out_dir +
                                    "'; run the producing stage first");
        }
    }
}

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v) {
    char buffer[40];
    std::snprintf(buffer, sizeof buffer, "%.17g", v);
    return buffer;
}

bool budget_needs_prm(const DecodeBudget& budget) {
    return budget.strategy == DecodeStrategy::Beam || budget.strategy == DecodeStrategy::Mcts ||
           (budget.strategy == DecodeStrategy::BestOfN &&
            budget.bon_scorer == BestOfNScorer::PrmScore);
}

}  // namespace

// ============================================================================
// Stages
// ============================================================================

StageRecord run_gen_tasks(const ExperimentConfig& config) {
    StageRecord record;
    record.name = "gen-tasks";
    record.outputs = {artifact::kTrainTasks, artifact::kEvalTasks, artifact::kDemoTasks};
    if (all_exist(config, record.outputs)) {
        record.status = "cached";
        return record;
    }
    const Timer timer;
    const Vocab vocab = Vocab::arithmetic();
    const Rng base(stage_seed(config.seed, "tasks"));

    Rng train_rng = base.substream("train");
    const auto train = generate_tasks(vocab, config.train_tasks, train_rng);
    Rng eval_rng = base.substream("eval");
    const auto eval = generate_tasks(vocab, config.eval_tasks, eval_rng);
    std::vector<TaskInstance> demos;
    if (config.bootstrap.demo_count > 0) {
        TaskGenConfig demo_config = config.train_tasks;
        demo_config.count = config.bootstrap.demo_count;
        Rng demo_rng = base.substream("demos");
        demos = generate_tasks(vocab, demo_config, demo_rng);
    }

    save_tasks(art(config, artifact::kTrainTasks), vocab, train);
    save_tasks(art(config, artifact::kEvalTasks), vocab, eval);
    save_tasks(art(config, artifact::kDemoTasks), vocab, demos);
    record.status = "complete";
    record.seconds = timer.seconds();
    return record;
}

StageRecord run_star_stage(const ExperimentConfig& config) {
    StageRecord record;
    record.name = "star";
    record.inputs = {artifact::kTrainTasks, artifact::kDemoTasks};
    record.outputs = {artifact::kStarDataset, artifact::kPrmLabels, artifact::kStarPolicy,
                      artifact::kStarMetrics};
    if (all_exist(config, record.outputs)) {
        record.status = "cached";
        return record;
    }
    require_inputs(config, record.inputs);
    const Timer timer;
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = load_tasks(art(config, artifact::kTrainTasks), vocab);
    const auto demos = load_tasks(art(config, artifact::kDemoTasks), vocab);

    const std::uint64_t init_seed = stage_seed(config.seed, "star-init");
    Rng init_rng(init_seed);
    Policy policy = init_policy(vocab, config.policy, init_rng);
    if (!demos.empty() && config.bootstrap.epochs > 0) {
        bootstrap_policy(policy, vocab, demos, config.bootstrap.lr, config.bootstrap.epochs);
    }

    Rng star_rng(stage_seed(config.seed, "star"));
    const StarRunResult result = run_star(policy, vocab, tasks, config.star, star_rng);

    save_star_records(art(config, artifact::kStarDataset), vocab, result.dataset.records);
    save_labeled_states(art(config, artifact::kPrmLabels), vocab, result.prm_labels);
    save_policy_checkpoint(art(config, artifact::kStarPolicy), policy, vocab,
                           stage_seed(config.seed, "star"));

    std::string csv =
        "iteration,sampled,truncated,accepted,added,fallback_sampled,acceptance_rate,"
        "updated,final_loss\n";
    for (const StarIterationStats& stats : result.iterations) {
        csv += std::to_string(stats.iteration) + ',' + std::to_string(stats.sampled) + ',' +
               std::to_string(stats.truncated) + ',' + std::to_string(stats.accepted) + ',' +
               std::to_string(stats.added) + ',' + std::to_string(stats.fallback_sampled) +
               ',' + fmt(stats.acceptance_rate) + ',' + (stats.updated ? "1" : "0") + ',' +
               (stats.epoch_losses.empty() ? std::string() : fmt(stats.epoch_losses.back())) +
               '\n';
    }
    atomic_write(art(config, artifact::kStarMetrics), csv);
    record.status = "complete";
    record.seconds = timer.seconds();
    return record;
}

StageRecord run_prm_stage(const ExperimentConfig& config) {
    StageRecord record;
    record.name = "prm";
    const bool classifier = config.prm.model.mode == ValueMode::Classifier;
    record.inputs = {classifier ? artifact::kPrmLabels : artifact::kTrainTasks};
    record.outputs = {artifact::kPrmModel, artifact::kPrmMetrics};
    if (all_exist(config, record.outputs)) {
        record.status = "cached";
        return record;
    }
    require_inputs(config, record.inputs);
    const Timer timer;
    const Vocab vocab = Vocab::arithmetic();

    const std::uint64_t seed = stage_seed(config.seed, "prm");
    Rng rng(seed);
    Prm prm = init_prm(vocab, config.prm.model, rng);

    std::string csv;
    if (classifier) {
        const auto labels = load_labeled_states(art(config, artifact::kPrmLabels), vocab);
        if (labels.empty()) {
            throw PreconditionError("no labeled states to train on; the rationale stage "
                                    "accepted nothing");
        }
        const PrmTrainResult result =
            train_prm_classifier(prm, labels, config.prm.lr, config.prm.epochs);
        csv = "epoch,loss\n";
        for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
            csv += std::to_string(e) + ',' + fmt(result.epoch_losses[e]) + '\n';
        }
    } else {
        const auto tasks = load_tasks(art(config, artifact::kTrainTasks), vocab);
        csv = "instance,sweep,loss\n";
        for (const TaskInstance& inst : tasks) {
            const auto states =
                collect_tree_states(vocab, inst, config.prm.universe, 100000,
                                    config.prm.td.limits);
            const RewardFn reward = task_reward_fn(vocab, inst, config.prm.rewards);
            const CandidateFn candidates =
                enumerated_candidates(vocab, inst, config.prm.universe);
            const TdResult result =
                train_prm_td(prm, vocab, states, reward, candidates, config.prm.td);
            for (std::size_t sweep = 0; sweep < result.sweep_losses.size(); ++sweep) {
                csv += inst.id + ',' + std::to_string(sweep) + ',' +
                       fmt(result.sweep_losses[sweep]) + '\n';
            }
        }
    }

    save_prm_checkpoint(art(config, artifact::kPrmModel), prm, vocab, seed);
    atomic_write(art(config, artifact::kPrmMetrics), csv);
    record.status = "complete";
    record.seconds = timer.seconds();
    return record;
}

StageRecord run_grpo_stage(const ExperimentConfig& config) {
    StageRecord record;
    record.name = "grpo";
    record.inputs = {artifact::kTrainTasks, artifact::kStarPolicy};
    record.outputs = {artifact::kGrpoPolicy, artifact::kGrpoMetrics};
    if (all_exist(config, record.outputs)) {
        record.status = "cached";
        return record;
    }
    require_inputs(config, record.inputs);
    const Timer timer;
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = load_tasks(art(config, artifact::kTrainTasks), vocab);
    Policy policy = load_policy_checkpoint(art(config, artifact::kStarPolicy), vocab);

    const std::uint64_t seed = stage_seed(config.seed, "grpo");
    const Rng base(seed);

    std::string csv = "group_index,instance_id,mean_raw_reward,objective,kl,clip_fraction,"
                      "accuracy\n";
    int done = 0;
    int chunk = 0;
    while (done < config.grpo.groups) {
        const int n = std::min(config.grpo.ref_refresh_groups, config.grpo.groups - done);
        Rng chunk_rng = base.substream(static_cast<std::uint64_t>(chunk));
        const std::vector<GrpoGroupStats> stats =
            config.grpo.algorithm == RlAlgorithm::Grpo
                ? grpo_update(policy, vocab, tasks, chunk_rng, config.grpo.grpo, n)
                : ppo_rlhf_update(policy, vocab, tasks, chunk_rng, config.grpo.ppo, n);
        for (const GrpoGroupStats& row : stats) {
            csv += std::to_string(done + row.group_index) + ',' + row.instance_id + ',' +
                   fmt(row.mean_raw_reward) + ',' + fmt(row.objective) + ',' + fmt(row.kl) +
                   ',' + fmt(row.clip_fraction) + ',' + fmt(row.accuracy) + '\n';
        }
        done += n;
        ++chunk;
    }

    save_policy_checkpoint(art(config, artifact::kGrpoPolicy), policy, vocab, seed);
    atomic_write(art(config, artifact::kGrpoMetrics), csv);
    record.status = "complete";
    record.seconds = timer.seconds();
    return record;
}

StageRecord run_decode_stage(const ExperimentConfig& config) {
    StageRecord record;
    record.name = "decode";
    const bool use_grpo_policy =
        config.stages.grpo && fs::exists(art(config, artifact::kGrpoPolicy));
    const char* policy_file = use_grpo_policy ? artifact::kGrpoPolicy : artifact::kStarPolicy;
    bool needs_prm = false;
    for (const DecodeBudget& budget : config.decode) {
        needs_prm = needs_prm || budget_needs_prm(budget);
    }
    record.inputs = {artifact::kEvalTasks, policy_file};
    if (needs_prm) {
        record.inputs.push_back(artifact::kPrmModel);
    }
    record.outputs = {artifact::kDecodeMetrics};
    if (all_exist(config, record.outputs)) {
        record.status = "cached";
        return record;
    }
    require_inputs(config, record.inputs);
    const Timer timer;
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = load_tasks(art(config, artifact::kEvalTasks), vocab);
    const Policy policy = load_policy_checkpoint(art(config, policy_file), vocab);
    Prm prm;
    if (needs_prm) {
        prm = load_prm_checkpoint(art(config, artifact::kPrmModel), vocab);
    }

    const std::uint64_t seed = stage_seed(config.seed, "decode");
    std::string csv = "strategy,budget,accuracy,mean_policy_evals,mean_prm_evals\n";
    for (const DecodeBudget& budget : config.decode) {
        const StrategyReport report = evaluate_strategy(
            policy, budget_needs_prm(budget) ? &prm : nullptr, vocab, tasks, budget, seed);
        csv += decode_strategy_name(report.strategy) + ',' + std::to_string(report.budget) +
               ',' + fmt(report.accuracy) + ',' + fmt(report.mean_policy_evals) + ',' +
               fmt(report.mean_prm_evals) + '\n';
    }
    atomic_write(art(config, artifact::kDecodeMetrics), csv);
    record.status = "complete";
    record.seconds = timer.seconds();
    return record;
}

// ============================================================================
// Pipeline
// ============================================================================

RunManifest prepare_run_dir(const ExperimentConfig& config) {
    fs::create_directories(config.out_dir);
    const std::string hash = config_hash(config);
    const fs::path manifest_path = art(config, artifact::kManifest);

    if (fs::exists(manifest_path)) {
        RunManifest existing = read_manifest(manifest_path);
        if (existing.config_hash != hash) {
            throw ConfigError("out_dir", "'" + config.out_dir +
                                             "' holds a run with a different config; use a "
                                             "fresh directory");
        }
        return existing;
    }

    atomic_write(art(config, artifact::kConfig), serialize_config(config));
    RunManifest manifest;
    manifest.config_hash = hash;
    manifest.master_seed = config.seed;
    for (const char* name : kStageNames) {
        manifest.stage_seeds.emplace_back(name, stage_seed(config.seed, name));
    }
    write_manifest(manifest_path, manifest);
    return manifest;
}

void record_stage(const ExperimentConfig& config, const StageRecord& record) {
    RunManifest manifest = read_manifest(art(config, artifact::kManifest));
    bool replaced = false;
    for (StageRecord& existing : manifest.stages) {
        if (existing.name == record.name) {
            existing = record;
            replaced = true;
            break;
        }
    }
    if (!replaced) {
        manifest.stages.push_back(record);
    }
    write_manifest(art(config, artifact::kManifest), manifest);
}

RunManifest run_pipeline(const ExperimentConfig& config) {
    validate_experiment(config);
    prepare_run_dir(config);

    using StageFn = StageRecord (*)(const ExperimentConfig&);
    struct Step {
        const char* name;
        bool enabled;
        StageFn fn;
    };
    const Step steps[] = {
        {"gen-tasks", true, run_gen_tasks},
        {"star", config.stages.star, run_star_stage},
        {"prm", config.stages.prm, run_prm_stage},
        {"grpo", config.stages.grpo, run_grpo_stage},
        {"decode", config.stages.decode, run_decode_stage},
    };

    for (const Step& step : steps) {
        if (!step.enabled) {
            StageRecord skipped;
            skipped.name = step.name;
            skipped.status = "skipped";
            record_stage(config, skipped);
            continue;
        }
        try {
            record_stage(config, step.fn(config));
        } catch (const Error& e) {
            StageRecord failed;
            failed.name = step.name;
            failed.status = std::string("failed: ") + e.what();
            record_stage(config, failed);
            throw;
        }
    }
    return read_manifest(art(config, artifact::kManifest));
}

}  // namespace stepwise
