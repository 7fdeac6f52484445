#include "stepwise/tasks.hpp"

#include <algorithm>
#include <set>
#include <utility>

namespace stepwise {

namespace {

void check_instance(const TaskInstance& instance) {
    if (instance.operands.size() < 2) {
        throw PreconditionError("task needs at least two operands");
    }
    for (int x : instance.operands) {
        if (x < 0) {
            throw PreconditionError("task operands must be non-negative");
        }
    }
    if (instance.kind == TaskKind::ModularChain && instance.modulus < 2) {
        throw PreconditionError("modular task needs a modulus of at least 2");
    }
}

// State tokens must start with this instance's prompt; mixing states across
// instances is always a bug.
void check_state_prefix(const Vocab& vocab, const TaskInstance& instance, const State& state) {
    const std::size_t prompt = instance.question.size() + 1;
    if (state.tokens.size() < prompt) {
        throw PreconditionError("state is shorter than the task prompt");
    }
    for (std::size_t i = 0; i < instance.question.size(); ++i) {
        if (state.tokens[i] != instance.question[i]) {
            throw PreconditionError("state does not start with the task question");
        }
    }
    if (state.tokens[instance.question.size()] != vocab.step_delimiter()) {
        throw PreconditionError("state is missing the prompt delimiter");
    }
}

}  // namespace

// ============================================================================
// Task instances
// ============================================================================

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::AdditionChain: return "addition_chain";
        case TaskKind::ModularChain: return "modular_chain";
    }
    throw PreconditionError("unknown task kind");
}

TaskKind task_kind_from_name(std::string_view name) {
    if (name == "addition_chain") {
        return TaskKind::AdditionChain;
    }
    if (name == "modular_chain") {
        return TaskKind::ModularChain;
    }
    throw ConfigError("kind", "unknown task kind '" + std::string(name) + "'");
}

TaskInstance make_instance(const Vocab& vocab, TaskKind kind, std::vector<int> operands,
                           int modulus, std::uint64_t seed) {
    TaskInstance instance;
    instance.kind = kind;
    instance.operands = std::move(operands);
    instance.modulus = kind == TaskKind::ModularChain ? modulus : 0;
    instance.seed = seed;
    check_instance(instance);

    const TokenId plus = vocab.id("+");
    for (std::size_t i = 0; i < instance.operands.size(); ++i) {
        if (i > 0) {
            instance.question.push_back(plus);
        }
        const auto digits = int_to_tokens(vocab, instance.operands[i]);
        instance.question.insert(instance.question.end(), digits.begin(), digits.end());
    }
    if (instance.kind == TaskKind::ModularChain) {
        instance.question.push_back(vocab.id("%"));
        const auto digits = int_to_tokens(vocab, instance.modulus);
        instance.question.insert(instance.question.end(), digits.begin(), digits.end());
    }
    instance.gold_answer = int_to_tokens(vocab, oracle_value(instance));
    instance.id = task_kind_name(kind) + "-" + std::to_string(instance.operands.size()) + "-" +
                  std::to_string(seed);
    return instance;
}

std::vector<TaskInstance> generate_tasks(const Vocab& vocab, const TaskGenConfig& config,
                                         Rng& rng) {
    if (config.count < 0) {
        throw ConfigError("count", "must be non-negative");
    }
    if (config.operand_count < 2) {
        throw ConfigError("operand_count", "must be at least 2");
    }
    if (config.min_operand < 0 || config.min_operand > config.max_operand) {
        throw ConfigError("min_operand", "need 0 <= min_operand <= max_operand");
    }
    if (config.kind == TaskKind::ModularChain &&
        (config.min_modulus < 2 || config.min_modulus > config.max_modulus)) {
        throw ConfigError("min_modulus", "need 2 <= min_modulus <= max_modulus");
    }

    std::vector<TaskInstance> out;
    std::set<std::vector<TokenId>> seen_questions;
    const long long max_attempts = static_cast<long long>(config.count) * 1000 + 1000;
    for (long long attempt = 0; static_cast<int>(out.size()) < config.count; ++attempt) {
        if (attempt >= max_attempts) {
            throw ConfigError("count", "cannot draw " + std::to_string(config.count) +
                                           " unique questions from this operand range");
        }
        Rng sub = rng.substream(static_cast<std::uint64_t>(attempt));
        const std::uint64_t instance_seed = sub.next_u64();
        std::vector<int> operands;
        operands.reserve(static_cast<std::size_t>(config.operand_count));
        for (int i = 0; i < config.operand_count; ++i) {
            operands.push_back(config.min_operand +
                               sub.next_int(config.max_operand - config.min_operand + 1));
        }
        int modulus = 0;
        if (config.kind == TaskKind::ModularChain) {
            modulus = config.min_modulus +
                      sub.next_int(config.max_modulus - config.min_modulus + 1);
        }
        TaskInstance instance =
            make_instance(vocab, config.kind, std::move(operands), modulus, instance_seed);
        if (config.unique_questions && !seen_questions.insert(instance.question).second) {
            continue;
        }
        out.push_back(std::move(instance));
    }
    return out;
}

// ============================================================================
// Oracles
// ============================================================================

std::vector<long long> running_values(const TaskInstance& instance) {
    check_instance(instance);
    std::vector<long long> values;
    values.reserve(instance.operands.size());
    values.push_back(instance.operands.front());
    for (std::size_t i = 1; i < instance.operands.size(); ++i) {
        long long next = values.back() + instance.operands[i];
        if (instance.kind == TaskKind::ModularChain) {
            next %= instance.modulus;
        }
        values.push_back(next);
    }
    return values;
}

long long oracle_value(const TaskInstance& instance) { return running_values(instance).back(); }

int oracle_step_count(const TaskInstance& instance) {
    check_instance(instance);
    return static_cast<int>(instance.operands.size()) - 1;
}

Action oracle_step(const Vocab& vocab, const TaskInstance& instance, int index) {
    const auto values = running_values(instance);
    if (index < 0 || index >= oracle_step_count(instance)) {
        throw PreconditionError("oracle step index out of range: " + std::to_string(index));
    }
    const std::size_t i = static_cast<std::size_t>(index);
    std::vector<TokenId> content = int_to_tokens(vocab, values[i]);
    content.push_back(vocab.id("+"));
    const auto operand = int_to_tokens(vocab, instance.operands[i + 1]);
    content.insert(content.end(), operand.begin(), operand.end());
    content.push_back(vocab.id("="));
    const auto result = int_to_tokens(vocab, values[i + 1]);
    content.insert(content.end(), result.begin(), result.end());
    return make_step(vocab, content);
}

Action oracle_answer(const Vocab& vocab, const TaskInstance& instance) {
    return make_answer(vocab, int_to_tokens(vocab, oracle_value(instance)));
}

std::vector<Action> oracle_actions(const Vocab& vocab, const TaskInstance& instance) {
    std::vector<Action> actions;
    const int steps = oracle_step_count(instance);
    actions.reserve(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i < steps; ++i) {
        actions.push_back(oracle_step(vocab, instance, i));
    }
    actions.push_back(oracle_answer(vocab, instance));
    return actions;
}

Trajectory oracle_trajectory(const Vocab& vocab, const TaskInstance& instance) {
    std::vector<Action> steps;
    for (int i = 0; i < oracle_step_count(instance); ++i) {
        steps.push_back(oracle_step(vocab, instance, i));
    }
    return make_trajectory(vocab, instance.question, std::move(steps),
                           oracle_answer(vocab, instance));
}

// ============================================================================
// Labels and verification
// ============================================================================

bool action_is_correct(const Vocab& vocab, const TaskInstance& instance, int step_index,
                       const Action& action) {
    if (step_index < 0) {
        throw PreconditionError("negative step index");
    }
    // Beyond the canonical depth the only correct move is still the gold
    // answer, so every non-terminal state has exactly one correct
    // continuation.
    if (step_index >= oracle_step_count(instance)) {
        return action == oracle_answer(vocab, instance);
    }
    if (action.kind == ActionKind::FinalAnswer) {
        return false;
    }
    return action == oracle_step(vocab, instance, step_index);
}

bool label_step(const Vocab& vocab, const TaskInstance& instance, const State& state,
                const Action& action) {
    check_state_prefix(vocab, instance, state);
    return action_is_correct(vocab, instance, state.action_count(), action);
}

bool verify_answer(const Vocab& vocab, const TaskInstance& instance, const Action& answer) {
    const auto content = answer_content(vocab, answer);
    return content.has_value() && *content == instance.gold_answer;
}

bool verify_trajectory(const Vocab& vocab, const TaskInstance& instance,
                       const Trajectory& traj) {
    if (traj.question != instance.question) {
        throw PreconditionError("trajectory question does not match the task instance");
    }
    return traj.answer.has_value() && verify_answer(vocab, instance, *traj.answer);
}

// ============================================================================
// Rewards
// ============================================================================

void validate_reward_config(const RewardConfig& config) {
    if (!(config.final_correct > config.step_correct)) {
        throw ConfigError("final_correct", "must exceed step_correct");
    }
    if (!(config.step_correct > 0.0)) {
        throw ConfigError("step_correct", "must be positive");
    }
    if (!(config.step_incorrect < 0.0)) {
        throw ConfigError("step_incorrect", "must be negative");
    }
    if (!(config.final_incorrect < 0.0)) {
        throw ConfigError("final_incorrect", "must be negative");
    }
}

double action_reward(const Vocab& vocab, const TaskInstance& instance,
                     const RewardConfig& config, int step_index, const Action& action) {
    if (action.kind == ActionKind::FinalAnswer) {
        return verify_answer(vocab, instance, action) ? config.final_correct
                                                      : config.final_incorrect;
    }
    return action_is_correct(vocab, instance, step_index, action) ? config.step_correct
                                                                  : config.step_incorrect;
}

double state_reward(const Vocab& vocab, const TaskInstance& instance,
                    const RewardConfig& config, const State& state) {
    check_state_prefix(vocab, instance, state);
    const int count = state.action_count();
    if (count == 0) {
        return 0.0;
    }
    const std::size_t prompt_end = instance.question.size();  // index of the prompt delimiter
    const std::size_t begin =
        count == 1 ? prompt_end + 1
                   : static_cast<std::size_t>(state.step_boundaries[static_cast<std::size_t>(count) - 2]) + 1;
    const std::size_t end =
        static_cast<std::size_t>(state.step_boundaries[static_cast<std::size_t>(count) - 1]);
    if (end >= state.tokens.size() || begin > end) {
        throw PreconditionError("state boundaries are inconsistent with its tokens");
    }
    Action last;
    last.tokens.assign(state.tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                       state.tokens.begin() + static_cast<std::ptrdiff_t>(end) + 1);
    if (last.tokens.back() == vocab.end_marker()) {
        last.kind = ActionKind::FinalAnswer;
    } else if (last.tokens.back() == vocab.step_delimiter()) {
        last.kind = ActionKind::ReasoningStep;
    } else {
        throw PreconditionError("state does not end at an action terminator");
    }
    return action_reward(vocab, instance, config, count - 1, last);
}

void assign_rewards(const Vocab& vocab, const TaskInstance& instance,
                    const RewardConfig& config, Trajectory& traj) {
    validate_reward_config(config);
    if (traj.question != instance.question) {
        throw PreconditionError("trajectory question does not match the task instance");
    }
    traj.step_rewards.clear();
    traj.step_rewards.reserve(traj.steps.size());
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
        traj.step_rewards.push_back(
            action_reward(vocab, instance, config, static_cast<int>(i), traj.steps[i]));
    }
    if (traj.answer) {
        traj.final_reward = verify_answer(vocab, instance, *traj.answer)
                                ? config.final_correct
                                : config.final_incorrect;
    } else {
        traj.final_reward.reset();
    }
}

// ============================================================================
// Enumerable action universe
// ============================================================================

std::vector<Action> enumerate_actions(const Vocab& vocab, const TaskInstance& instance,
                                      const State& state, const UniverseConfig& config) {
    check_state_prefix(vocab, instance, state);
    if (is_terminal(vocab, state)) {
        throw PreconditionError("cannot enumerate actions at a terminal state");
    }
    const int depth = state.action_count();
    const int steps = oracle_step_count(instance);
    const auto values = running_values(instance);
    std::vector<Action> out;

    if (depth < steps) {
        const std::size_t i = static_cast<std::size_t>(depth);
        std::set<long long> seen;
        for (int delta : config.step_deltas) {
            const long long result = values[i + 1] + delta;
            if (result < 0 || !seen.insert(result).second) {
                continue;
            }
            std::vector<TokenId> content = int_to_tokens(vocab, values[i]);
            content.push_back(vocab.id("+"));
            const auto operand = int_to_tokens(vocab, instance.operands[i + 1]);
            content.insert(content.end(), operand.begin(), operand.end());
            content.push_back(vocab.id("="));
            const auto digits = int_to_tokens(vocab, result);
            content.insert(content.end(), digits.begin(), digits.end());
            out.push_back(make_step(vocab, content));
        }
    }
    if (depth >= steps || config.premature_answers) {
        const long long gold = oracle_value(instance);
        std::set<long long> seen;
        for (int delta : config.answer_deltas) {
            const long long value = gold + delta;
            if (value < 0 || !seen.insert(value).second) {
                continue;
            }
            out.push_back(make_answer(vocab, int_to_tokens(vocab, value)));
        }
    }
    if (out.empty()) {
        throw PreconditionError("action universe is empty at this state");
    }
    return out;
}

// ============================================================================
// Digit helpers
// ============================================================================

std::vector<TokenId> int_to_tokens(const Vocab& vocab, long long value) {
    if (value < 0) {
        throw PreconditionError("cannot tokenize a negative value");
    }
    const std::string text = std::to_string(value);
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(vocab.id(std::string_view(&c, 1)));
    }
    return out;
}

std::optional<long long> digits_to_int(const Vocab& vocab, std::span<const TokenId> tokens) {
    if (tokens.empty() || tokens.size() > 12) {
        return std::nullopt;
    }
    for (TokenId id : tokens) {
        if (id < 0 || id >= vocab.size() || !vocab.is_digit(id)) {
            return std::nullopt;
        }
    }
    if (tokens.size() > 1 && vocab.token(tokens.front()) == "0") {
        return std::nullopt;
    }
    long long value = 0;
    for (TokenId id : tokens) {
        value = value * 10 + (vocab.token(id)[0] - '0');
    }
    return value;
}

}  // namespace stepwise
