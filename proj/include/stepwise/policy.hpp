#pragma once

#include <span>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/net.hpp"
#include "stepwise/rng.hpp"

namespace stepwise {

// ============================================================================
// Policy
// ============================================================================

struct PolicyConfig {
    int context_window = 8;
    int hint_positions = 2;
    int hidden_dim = 64;
    double init_scale = 0.01;
};

// Autoregressive token policy: an MLP over the trailing context window
// produces a distribution over the next token. The optional hint slots let
// the same network model both the plain policy pi(a | s) and the
// answer-conditioned proposal pi(a | s, A) used for hindsight rationales.
struct Policy {
    Architecture arch;
    std::vector<double> params;
};

Policy init_policy(const Vocab& vocab, const PolicyConfig& config, Rng& rng);

// Full next-token log-distribution at a context.
std::vector<double> policy_token_logprobs(const Policy& policy,
                                          std::span<const TokenId> context,
                                          std::span<const TokenId> hint = {});

// log pi(action | state): sum of token conditionals along the action.
double action_logprob(const Policy& policy, const State& state, const Action& action,
                      std::span<const TokenId> hint = {});

// Adapter for joint_logprob.
TokenLogProbFn policy_logprob_fn(const Policy& policy, std::vector<TokenId> hint = {});

// ============================================================================
// Sampling
// ============================================================================

struct SampledAction {
    Action action;
    std::vector<double> token_logprobs;  // untempered, one per emitted token
    bool forced_close = false;           // delimiter forced at the length cap
};

// Draws tokens until a terminator appears; the last slot of the step budget
// is always a forced step delimiter so actions never exceed it. Sampling uses
// the tempered distribution, recorded log-probabilities do not.
SampledAction sample_action(const Policy& policy, const Vocab& vocab, const State& state,
                            Rng& rng, double temperature, const Limits& limits = {},
                            std::span<const TokenId> hint = {});

// Deterministic argmax variant (ties go to the lowest token id).
SampledAction greedy_action(const Policy& policy, const Vocab& vocab, const State& state,
                            const Limits& limits = {}, std::span<const TokenId> hint = {});

// Rolls a full episode. Stops with `truncated = true` when the action or
// context budget runs out before a final answer appears.
Trajectory sample_trajectory(const Policy& policy, const Vocab& vocab,
                             std::span<const TokenId> question, Rng& rng, double temperature,
                             const Limits& limits = {}, std::span<const TokenId> hint = {});

Trajectory greedy_trajectory(const Policy& policy, const Vocab& vocab,
                             std::span<const TokenId> question, const Limits& limits = {});

// ============================================================================
// Supervised training
// ============================================================================

struct SupervisedExample {
    Trajectory traj;
    std::vector<TokenId> hint;  // empty = unconditioned
};

struct SupervisedResult {
    // Mean per-trajectory summed NLL, one entry per epoch, measured before
    // that epoch's parameter step.
    std::vector<double> epoch_losses;
};

// Full-batch gradient descent on the mean trajectory NLL.
SupervisedResult supervised_update(Policy& policy, const Vocab& vocab,
                                   std::span<const SupervisedExample> examples, double lr,
                                   int epochs);

// Summed NLL of the generated tokens of one trajectory.
double trajectory_nll(const Policy& policy, const Vocab& vocab, const Trajectory& traj,
                      std::span<const TokenId> hint = {});

}  // namespace stepwise
