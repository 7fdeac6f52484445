#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/net.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/rng.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

// ============================================================================
// Process reward model
// ============================================================================

// How the scalar head is read: Classifier squashes it through a sigmoid and
// is trained on step-level correctness labels; TdValue leaves it raw and is
// trained by fitted value iteration, so scores live on the reward scale.
enum class ValueMode { Classifier, TdValue };

std::string value_mode_name(ValueMode mode);
ValueMode value_mode_from_name(std::string_view name);  // throws ConfigError

struct PrmConfig {
    int context_window = 16;
    int hidden_dim = 64;
    double init_scale = 0.01;
    ValueMode mode = ValueMode::Classifier;
};

struct Prm {
    Architecture arch;  // scalar head, no hint slots
    std::vector<double> params;
    ValueMode mode = ValueMode::Classifier;
};

Prm init_prm(const Vocab& vocab, const PrmConfig& config, Rng& rng);

double sigmoid(double x);

// Raw head output at a token context.
double prm_raw(const Prm& prm, std::span<const TokenId> context);

// Score of a state under the model's reading of the head.
double prm_score(const Prm& prm, const State& state);

// ============================================================================
// Classifier training
// ============================================================================

struct LabeledState {
    State state;
    double label = 0.0;  // in [0, 1]
};

// One labeled prefix per action of the trajectory: the state reached by the
// action, labeled 1 when the action was the correct continuation (steps) or
// the verified answer (final).
std::vector<LabeledState> labeled_states(const Vocab& vocab, const TaskInstance& instance,
                                         const Trajectory& traj);

struct PrmTrainResult {
    // Mean loss per epoch, measured before that epoch's step. Binary
    // cross-entropy for the classifier, squared error for TD fits.
    std::vector<double> epoch_losses;
};

// Full-batch gradient descent on mean binary cross-entropy.
PrmTrainResult train_prm_classifier(Prm& prm, std::span<const LabeledState> data, double lr,
                                    int epochs);

// ============================================================================
// Value iteration
// ============================================================================

using ValueFn = std::function<double(const State&)>;
using RewardFn = std::function<double(const State&)>;
using CandidateFn = std::function<std::vector<Action>(const State&)>;

// r(s) through the task oracle: the reward of the action that produced s.
RewardFn task_reward_fn(const Vocab& vocab, const TaskInstance& instance,
                        const RewardConfig& rewards);

// Candidate actions drawn from the policy (deduplicated). The draw is keyed
// on the state tokens, so revisiting a state yields the same candidates.
CandidateFn sampled_candidates(const Policy& policy, const Vocab& vocab, int samples,
                               double temperature, std::uint64_t seed,
                               const Limits& limits = {});

// The enumerable task universe as a candidate source.
CandidateFn enumerated_candidates(const Vocab& vocab, const TaskInstance& instance,
                                  const UniverseConfig& universe);

// Wraps a candidate source so the correct continuation is always present.
CandidateFn with_oracle_candidate(CandidateFn inner, const Vocab& vocab,
                                  const TaskInstance& instance);

// One Bellman backup: r(s) for terminal states, otherwise
// r(s) + gamma * max over candidates of value(s + a). Candidates that do not
// fit the budgets are skipped; if none fit, the state backs up like a
// terminal one.
double bellman_backup(const Vocab& vocab, const State& state, const RewardFn& reward,
                      const CandidateFn& candidates, const ValueFn& value, double gamma,
                      const Limits& limits = {});

// ----------------------------------------------------------------------------
// Exact values over the enumerable universe
// ----------------------------------------------------------------------------

class ExactValues {
public:
    void set(const State& state, double value);
    double value_of(const State& state) const;  // throws if absent
    bool contains(const State& state) const;
    const std::map<std::vector<TokenId>, double>& all() const noexcept { return values_; }

private:
    std::map<std::vector<TokenId>, double> values_;
};

// Every state reachable through the universe, in breadth-first order.
std::vector<State> collect_tree_states(const Vocab& vocab, const TaskInstance& instance,
                                       const UniverseConfig& universe,
                                       std::size_t max_nodes = 10000,
                                       const Limits& limits = {});

// Optimal values of every reachable state by exhaustive dynamic programming.
ExactValues brute_force_values(const Vocab& vocab, const TaskInstance& instance,
                               const RewardFn& reward, const UniverseConfig& universe,
                               double gamma, std::size_t max_nodes = 10000,
                               const Limits& limits = {});

// Greedy argmax walk through exact values (ties to the lowest candidate
// index), ending at a terminal state.
std::vector<Action> optimal_action_path(const Vocab& vocab, const TaskInstance& instance,
                                        const ExactValues& values,
                                        const UniverseConfig& universe,
                                        const Limits& limits = {});

// ----------------------------------------------------------------------------
// Fitted value iteration (TD training)
// ----------------------------------------------------------------------------

struct TdConfig {
    double gamma = 1.0;
    int sweeps = 10;            // frozen-target refreshes
    int epochs_per_sweep = 50;  // gradient steps against each target set
    double lr = 0.05;
    Limits limits;
};

struct TdResult {
    // Mean squared distance to the frozen targets at the start of each sweep.
    std::vector<double> sweep_losses;
};

// Fitted value iteration with semi-gradient updates: targets are recomputed
// from a frozen parameter snapshot at each sweep, then regressed onto.
TdResult train_prm_td(Prm& prm, const Vocab& vocab, std::span<const State> states,
                      const RewardFn& reward, const CandidateFn& candidates,
                      const TdConfig& config);

}  // namespace stepwise
