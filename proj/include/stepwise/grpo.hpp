#pragma once

#include <span>
#include <string>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/rng.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

// ============================================================================
// Configuration
// ============================================================================

struct GrpoConfig {
    int group_size = 8;         // outputs sampled per question
    double temperature = 1.0;
    double clip_epsilon = 0.2;
    double kl_beta = 0.04;
    int updates_per_group = 4;  // gradient steps against one sampled group
    double lr = 0.01;
    double std_epsilon = 1e-8;     // degenerate-variance guard
    double logratio_clamp = 20.0;  // cap on |log ratio| before exponentiation
    Limits limits;
    RewardConfig rewards;
};

void validate_grpo_config(const GrpoConfig& config);

// ============================================================================
// Group sampling
// ============================================================================

// One sampled output. Reward slots cover the reasoning steps in order plus,
// when the episode finished, the final answer as the last slot; a truncated
// episode simply has fewer slots. `old_logprobs` are the per-slot action
// log-probabilities cached at sampling time (the behavior policy).
struct GroupOutput {
    Trajectory traj;
    std::vector<double> slot_rewards;
    std::vector<double> old_logprobs;
};

struct Group {
    std::vector<GroupOutput> outputs;
};

Group sample_group(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                   Rng& rng, const GrpoConfig& config);

// ============================================================================
// Reward normalization and advantages
// ============================================================================

struct RewardStats {
    double mean = 0.0;
    double stddev = 0.0;      // population standard deviation
    bool degenerate = false;  // variance below the guard: everything maps to 0
};

// Pools every reward in the group, subtracts the mean, divides by the
// population standard deviation. A (near-)constant group normalizes to all
// zeros instead of amplifying noise.
std::vector<std::vector<double>> normalize_rewards(
    const std::vector<std::vector<double>>& rewards, double std_epsilon,
    RewardStats* stats = nullptr);

// Suffix sums: the advantage at slot t is the sum of normalized rewards from
// t to the end of that output, so A[t] == rbar[t] + A[t+1] holds exactly.
std::vector<std::vector<double>> suffix_advantages(
    const std::vector<std::vector<double>>& normalized);

// exp(clamped log-ratio); bumps *clamp_events when the clamp engages.
double importance_ratio(double logp_current, double logp_old, double logratio_clamp,
                        long* clamp_events = nullptr);

// min(ratio * A, clip(ratio, 1-eps, 1+eps) * A). `clipped` reports whether
// the clipped branch was strictly smaller.
struct ClipTerm {
    double value = 0.0;
    bool clipped = false;
};

ClipTerm clipped_surrogate(double ratio, double advantage, double epsilon);

// ============================================================================
// Objective and updates
// ============================================================================

// Every quantity uses the same trajectory structure: outputs weigh in at 1/G,
// slots within an output at 1/K_i. The KL term is the exact forward
// divergence KL(current || reference) summed over the token contexts of a
// slot and averaged with those same weights.
struct GrpoEval {
    double objective = 0.0;  // surrogate - beta * kl
    double surrogate = 0.0;
    double kl = 0.0;
    double clip_fraction = 0.0;  // clipped slots / total slots
    long clamp_events = 0;
};

GrpoEval grpo_objective(const Policy& current, const Policy& reference, const Vocab& vocab,
                        const Group& group, const std::vector<std::vector<double>>& advantages,
                        const GrpoConfig& config);

// Same traversal, also accumulating d(objective)/d(params) into `grad`
// (ascent direction). Clipped slots contribute no policy-gradient term.
GrpoEval grpo_gradient(const Policy& current, const Policy& reference, const Vocab& vocab,
                       const Group& group, const std::vector<std::vector<double>>& advantages,
                       const GrpoConfig& config, std::span<double> grad);

struct GrpoGroupStats {
    int group_index = 0;
    std::string instance_id;
    double mean_raw_reward = 0.0;  // raw slot rewards pooled over the group
    double objective = 0.0;        // from the last inner update
    double kl = 0.0;
    double clip_fraction = 0.0;
    double accuracy = 0.0;  // verified answers / group size
};

// Runs `n_groups` rounds of group-relative policy optimization over the task
// list (round-robin). The reference policy is frozen at entry; the behavior
// policy is re-snapshot at each group.
std::vector<GrpoGroupStats> grpo_update(Policy& policy, const Vocab& vocab,
                                        std::span<const TaskInstance> tasks, Rng& rng,
                                        const GrpoConfig& config, int n_groups);

// ============================================================================
// Trajectory-level baseline
// ============================================================================

// REINFORCE on the KL-regularized return: one gradient step per group on
// (1/G) sum_i (R_i - mean R) grad log pi(traj_i) - beta * grad KL, where R_i
// is the final-answer reward alone. Serves as the non-stepwise comparison.
struct PpoRlhfConfig {
    int group_size = 8;
    double temperature = 1.0;
    double kl_beta = 0.04;
    double lr = 0.01;
    Limits limits;
    RewardConfig rewards;
};

std::vector<GrpoGroupStats> ppo_rlhf_update(Policy& policy, const Vocab& vocab,
                                            std::span<const TaskInstance> tasks, Rng& rng,
                                            const PpoRlhfConfig& config, int n_groups);

}  // namespace stepwise
