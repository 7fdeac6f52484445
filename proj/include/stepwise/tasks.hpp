#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/rng.hpp"

namespace stepwise {

// ============================================================================
// Task instances
// ============================================================================

enum class TaskKind { AdditionChain, ModularChain };

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(std::string_view name);  // throws ConfigError

// One arithmetic problem with an exact oracle. AdditionChain asks for the sum
// of the operands; ModularChain asks for the sum modulo `modulus` and keeps
// every intermediate value reduced.
struct TaskInstance {
    std::string id;
    TaskKind kind = TaskKind::AdditionChain;
    std::vector<int> operands;
    int modulus = 0;  // 0 for AdditionChain
    std::uint64_t seed = 0;
    std::vector<TokenId> question;
    std::vector<TokenId> gold_answer;  // canonical digits, no leading zeros
};

struct TaskGenConfig {
    TaskKind kind = TaskKind::AdditionChain;
    int count = 1;
    int operand_count = 2;
    int min_operand = 2;
    int max_operand = 9;
    int min_modulus = 3;  // ModularChain only
    int max_modulus = 9;
    bool unique_questions = true;
};

// Builds the question and gold answer from operands; `seed` only feeds the id.
TaskInstance make_instance(const Vocab& vocab, TaskKind kind, std::vector<int> operands,
                           int modulus, std::uint64_t seed);

// Draws `config.count` instances. Each instance consumes a dedicated
// substream of `rng`, so the set is stable under reordering.
std::vector<TaskInstance> generate_tasks(const Vocab& vocab, const TaskGenConfig& config,
                                         Rng& rng);

// ============================================================================
// Oracles
// ============================================================================

// Exact final value of the instance.
long long oracle_value(const TaskInstance& instance);

// Running values v_1..v_n: v_1 is the first operand, each later v is the
// (possibly reduced) sum with the next operand. The gold answer is v_n.
std::vector<long long> running_values(const TaskInstance& instance);

int oracle_step_count(const TaskInstance& instance);  // operands - 1

// Canonical reasoning step `index` (0-based): "v + x = v';".
Action oracle_step(const Vocab& vocab, const TaskInstance& instance, int index);
Action oracle_answer(const Vocab& vocab, const TaskInstance& instance);

// Canonical steps followed by the canonical answer. At every depth t this
// list's entry t is the single correct continuation, so correctness labels
// reduce to exact action comparison.
std::vector<Action> oracle_actions(const Vocab& vocab, const TaskInstance& instance);

// Full gold trajectory (no rewards or logprobs).
Trajectory oracle_trajectory(const Vocab& vocab, const TaskInstance& instance);

// ============================================================================
// Labels and verification
// ============================================================================

// Whether `action` is the correct continuation after `step_index` actions
// have been taken. Correctness follows the true running values, so a correct
// step can follow an incorrect one.
bool action_is_correct(const Vocab& vocab, const TaskInstance& instance, int step_index,
                       const Action& action);

// Same, with the depth read off the state.
bool label_step(const Vocab& vocab, const TaskInstance& instance, const State& state,
                const Action& action);

// Exact comparison of the answer content against the gold digits. Leading
// zeros or any non-canonical rendering count as wrong.
bool verify_answer(const Vocab& vocab, const TaskInstance& instance, const Action& answer);
bool verify_trajectory(const Vocab& vocab, const TaskInstance& instance,
                       const Trajectory& traj);

// ============================================================================
// Rewards
// ============================================================================

// Per-action rewards. The final reward dominates the step rewards; correct
// steps earn a small bonus, incorrect ones a small penalty.
struct RewardConfig {
    double step_correct = 0.2;
    double step_incorrect = -0.2;
    double final_correct = 1.0;
    double final_incorrect = -1.0;
};

// Enforces final_correct > step_correct > 0 > step_incorrect and
// final_incorrect < 0. Throws ConfigError.
void validate_reward_config(const RewardConfig& config);

// Reward of a single action taken at depth `step_index`.
double action_reward(const Vocab& vocab, const TaskInstance& instance,
                     const RewardConfig& config, int step_index, const Action& action);

// Reward attached to a state: the reward of the action that produced it, 0
// for the initial state.
double state_reward(const Vocab& vocab, const TaskInstance& instance,
                    const RewardConfig& config, const State& state);

// Fills step_rewards and final_reward in place. A truncated trajectory with
// no answer keeps final_reward empty.
void assign_rewards(const Vocab& vocab, const TaskInstance& instance,
                    const RewardConfig& config, Trajectory& traj);

// ============================================================================
// Enumerable action universe
// ============================================================================

// Finite candidate set for exhaustive search and exact value iteration: the
// canonical step with its result perturbed by each delta, plus answers around
// the gold value. Deltas that would produce negative numbers are dropped; the
// canonical action always survives.
struct UniverseConfig {
    std::vector<int> step_deltas = {-1, 0, 1};
    std::vector<int> answer_deltas = {-1, 0, 1};
    bool premature_answers = true;
};

std::vector<Action> enumerate_actions(const Vocab& vocab, const TaskInstance& instance,
                                      const State& state, const UniverseConfig& config);

// ============================================================================
// Digit helpers
// ============================================================================

std::vector<TokenId> int_to_tokens(const Vocab& vocab, long long value);

// Parses digit tokens; empty input, non-digits, or leading zeros give nullopt
// ("0" itself is fine).
std::optional<long long> digits_to_int(const Vocab& vocab, std::span<const TokenId> tokens);

}  // namespace stepwise
