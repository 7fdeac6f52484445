#include "stepwise/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "stepwise/net.hpp"

namespace stepwise {

namespace {

// Token stream of a trajectory with per-slot offsets. Slots are the
// reasoning steps in order, then the final answer when present.
struct SlotLayout {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> begin;
    std::vector<std::size_t> length;
};

SlotLayout layout_of(const Vocab& vocab, const Trajectory& traj) {
    SlotLayout layout;
    layout.tokens.assign(traj.question.begin(), traj.question.end());
    layout.tokens.push_back(vocab.step_delimiter());
    auto add_slot = [&](const Action& action) {
        layout.begin.push_back(layout.tokens.size());
        layout.length.push_back(action.tokens.size());
        layout.tokens.insert(layout.tokens.end(), action.tokens.begin(), action.tokens.end());
    };
    for (const Action& step : traj.steps) {
        add_slot(step);
    }
    if (traj.answer) {
        add_slot(*traj.answer);
    }
    return layout;
}

// Per-token quantities needed twice per slot (once to form the ratio, once
// to push gradients).
struct TokenEval {
    Activations acts;
    std::vector<double> logp;   // current log-softmax
    std::vector<double> logq;   // reference log-softmax
    double kl = 0.0;            // KL(current || reference) at this context
    TokenId token = 0;
    std::size_t context_end = 0;
};

GrpoEval evaluate(const Policy& current, const Policy& reference, const Vocab& vocab,
                  const Group& group, const std::vector<std::vector<double>>& advantages,
                  const GrpoConfig& config, std::span<double> grad, bool with_grad) {
    validate_grpo_config(config);
    if (current.arch != reference.arch) {
        throw PreconditionError("current and reference policies must share an architecture");
    }
    if (advantages.size() != group.outputs.size()) {
        throw PreconditionError("advantage rows do not match the group outputs");
    }
    if (with_grad && grad.size() != current.params.size()) {
        throw PreconditionError("gradient buffer has the wrong size");
    }

    GrpoEval eval;
    long total_slots = 0;
    long clipped_slots = 0;
    const double inv_g = 1.0 / static_cast<double>(group.outputs.size());
    std::vector<TokenEval> slot_tokens;

    for (std::size_t i = 0; i < group.outputs.size(); ++i) {
        const GroupOutput& output = group.outputs[i];
        const std::size_t slots = output.slot_rewards.size();
        if (slots == 0) {
            continue;
        }
        if (advantages[i].size() != slots || output.old_logprobs.size() != slots) {
            throw PreconditionError("per-slot data is inconsistent within the group");
        }
        const SlotLayout layout = layout_of(vocab, output.traj);
        if (layout.begin.size() != slots) {
            throw PreconditionError("trajectory slots do not match its reward slots");
        }
        const double w = inv_g / static_cast<double>(slots);

        for (std::size_t t = 0; t < slots; ++t) {
            slot_tokens.clear();
            double logp_new = 0.0;
            double kl_slot = 0.0;
            for (std::size_t k = 0; k < layout.length[t]; ++k) {
                const std::size_t pos = layout.begin[t] + k;
                const std::span<const TokenId> context(layout.tokens.data(), pos);
                TokenEval te;
                te.token = layout.tokens[pos];
                te.context_end = pos;
                const auto active = encode_context(current.arch, context);
                te.acts = forward(current.arch, current.params, active);
                te.logp = log_softmax(te.acts.logits);
                const auto ref_active = encode_context(reference.arch, context);
                te.logq = log_softmax(
                    forward(reference.arch, reference.params, ref_active).logits);
                for (std::size_t j = 0; j < te.logp.size(); ++j) {
                    te.kl += std::exp(te.logp[j]) * (te.logp[j] - te.logq[j]);
                }
                logp_new += te.logp[static_cast<std::size_t>(te.token)];
                kl_slot += te.kl;
                if (with_grad) {
                    slot_tokens.push_back(std::move(te));
                }
            }
            const double ratio = importance_ratio(logp_new, output.old_logprobs[t],
                                                  config.logratio_clamp, &eval.clamp_events);
            const ClipTerm term = clipped_surrogate(ratio, advantages[i][t],
                                                    config.clip_epsilon);
            eval.surrogate += w * term.value;
            eval.kl += w * kl_slot;
            ++total_slots;
            clipped_slots += term.clipped ? 1 : 0;

            if (with_grad) {
                const double pg_coef = term.clipped ? 0.0 : w * ratio * advantages[i][t];
                std::vector<double> dlogits(static_cast<std::size_t>(current.arch.output_dim));
                for (const TokenEval& te : slot_tokens) {
                    for (std::size_t j = 0; j < dlogits.size(); ++j) {
                        const double p = std::exp(te.logp[j]);
                        const double onehot =
                            j == static_cast<std::size_t>(te.token) ? 1.0 : 0.0;
                        dlogits[j] = pg_coef * (onehot - p) -
                                     config.kl_beta * w * p *
                                         (te.logp[j] - te.logq[j] - te.kl);
                    }
                    backward(current.arch, current.params, te.acts, dlogits, grad);
                }
            }
        }
    }
    eval.objective = eval.surrogate - config.kl_beta * eval.kl;
    eval.clip_fraction =
        total_slots == 0 ? 0.0
                         : static_cast<double>(clipped_slots) / static_cast<double>(total_slots);
    return eval;
}

double final_answer_reward(const GroupOutput& output, const RewardConfig& rewards) {
    if (output.traj.final_reward.has_value()) {
        return *output.traj.final_reward;
    }
    return rewards.final_incorrect;  // ran out of budget without answering
}

}  // namespace

// ============================================================================
// Configuration
// ============================================================================

void validate_grpo_config(const GrpoConfig& config) {
    if (config.group_size < 1) {
        throw ConfigError("group_size", "must be at least 1");
    }
    if (!(config.temperature > 0.0)) {
        throw ConfigError("temperature", "must be positive");
    }
    if (!(config.clip_epsilon > 0.0) || config.clip_epsilon >= 1.0) {
        throw ConfigError("clip_epsilon", "must lie in (0, 1)");
    }
    if (config.kl_beta < 0.0) {
        throw ConfigError("kl_beta", "must be non-negative");
    }
    if (config.updates_per_group < 1) {
        throw ConfigError("updates_per_group", "must be at least 1");
    }
    if (!(config.lr > 0.0)) {
        throw ConfigError("lr", "must be positive");
    }
    if (!(config.std_epsilon > 0.0)) {
        throw ConfigError("std_epsilon", "must be positive");
    }
    if (!(config.logratio_clamp > 0.0)) {
        throw ConfigError("logratio_clamp", "must be positive");
    }
    validate_reward_config(config.rewards);
}

// ============================================================================
// Group sampling
// ============================================================================

Group sample_group(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                   Rng& rng, const GrpoConfig& config) {
    validate_grpo_config(config);
    Group group;
    group.outputs.reserve(static_cast<std::size_t>(config.group_size));
    for (int i = 0; i < config.group_size; ++i) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(i));
        GroupOutput output;
        output.traj = sample_trajectory(policy, vocab, instance.question, sub,
                                        config.temperature, config.limits);
        assign_rewards(vocab, instance, config.rewards, output.traj);
        output.slot_rewards = output.traj.step_rewards;
        if (output.traj.final_reward.has_value()) {
            output.slot_rewards.push_back(*output.traj.final_reward);
        }
        // Partition the cached token scores into per-slot action scores.
        std::size_t pos = 0;
        auto take = [&](const Action& action) {
            double sum = 0.0;
            for (std::size_t k = 0; k < action.tokens.size(); ++k) {
                sum += output.traj.token_logprobs.at(pos++);
            }
            output.old_logprobs.push_back(sum);
        };
        for (const Action& step : output.traj.steps) {
            take(step);
        }
        if (output.traj.answer) {
            take(*output.traj.answer);
        }
        group.outputs.push_back(std::move(output));
    }
    return group;
}

// ============================================================================
// Reward normalization and advantages
// ============================================================================

std::vector<std::vector<double>> normalize_rewards(
    const std::vector<std::vector<double>>& rewards, double std_epsilon,
    RewardStats* stats) {
    if (!(std_epsilon > 0.0)) {
        throw PreconditionError("std_epsilon must be positive");
    }
    std::size_t count = 0;
    double sum = 0.0;
    for (const auto& row : rewards) {
        for (double r : row) {
            sum += r;
            ++count;
        }
    }
    RewardStats local;
    std::vector<std::vector<double>> out(rewards.size());
    if (count == 0) {
        local.degenerate = true;
        if (stats != nullptr) {
            *stats = local;
        }
        return out;
    }
    local.mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& row : rewards) {
        for (double r : row) {
            const double d = r - local.mean;
            sq += d * d;
        }
    }
    local.stddev = std::sqrt(sq / static_cast<double>(count));
    local.degenerate = local.stddev <= std_epsilon;
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        out[i].resize(rewards[i].size(), 0.0);
        if (!local.degenerate) {
            for (std::size_t t = 0; t < rewards[i].size(); ++t) {
                out[i][t] = (rewards[i][t] - local.mean) / local.stddev;
            }
        }
    }
    if (stats != nullptr) {
        *stats = local;
    }
    return out;
}

std::vector<std::vector<double>> suffix_advantages(
    const std::vector<std::vector<double>>& normalized) {
    std::vector<std::vector<double>> out(normalized.size());
    for (std::size_t i = 0; i < normalized.size(); ++i) {
        const auto& row = normalized[i];
        out[i].resize(row.size(), 0.0);
        double acc = 0.0;
        for (std::size_t t = row.size(); t-- > 0;) {
            acc = row[t] + acc;
            out[i][t] = acc;
        }
    }
    return out;
}

double importance_ratio(double logp_current, double logp_old, double logratio_clamp,
                        long* clamp_events) {
    if (!(logratio_clamp > 0.0)) {
        throw PreconditionError("logratio_clamp must be positive");
    }
    double logratio = logp_current - logp_old;
    if (logratio > logratio_clamp) {
        logratio = logratio_clamp;
        if (clamp_events != nullptr) {
            ++*clamp_events;
        }
    } else if (logratio < -logratio_clamp) {
        logratio = -logratio_clamp;
        if (clamp_events != nullptr) {
            ++*clamp_events;
        }
    }
    return std::exp(logratio);
}

ClipTerm clipped_surrogate(double ratio, double advantage, double epsilon) {
    if (!(epsilon > 0.0) || epsilon >= 1.0) {
        throw PreconditionError("clip epsilon must lie in (0, 1)");
    }
    const double unclipped = ratio * advantage;
    const double held = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
    ClipTerm term;
    term.clipped = held < unclipped;
    term.value = term.clipped ? held : unclipped;
    return term;
}

// ============================================================================
// Objective and updates
// ============================================================================

GrpoEval grpo_objective(const Policy& current, const Policy& reference, const Vocab& vocab,
                        const Group& group, const std::vector<std::vector<double>>& advantages,
                        const GrpoConfig& config) {
    return evaluate(current, reference, vocab, group, advantages, config, {}, false);
}

GrpoEval grpo_gradient(const Policy& current, const Policy& reference, const Vocab& vocab,
                       const Group& group, const std::vector<std::vector<double>>& advantages,
                       const GrpoConfig& config, std::span<double> grad) {
    return evaluate(current, reference, vocab, group, advantages, config, grad, true);
}

std::vector<GrpoGroupStats> grpo_update(Policy& policy, const Vocab& vocab,
                                        std::span<const TaskInstance> tasks, Rng& rng,
                                        const GrpoConfig& config, int n_groups) {
    validate_grpo_config(config);
    if (tasks.empty()) {
        throw PreconditionError("grpo_update needs at least one task");
    }
    if (n_groups < 0) {
        throw PreconditionError("n_groups must be non-negative");
    }
    const Policy reference = policy;  // KL anchor, frozen for this call
    std::vector<GrpoGroupStats> stats;
    stats.reserve(static_cast<std::size_t>(n_groups));
    std::vector<double> grad(policy.params.size());

    for (int g = 0; g < n_groups; ++g) {
        const TaskInstance& inst = tasks[static_cast<std::size_t>(g) % tasks.size()];
        Rng group_rng = rng.substream(static_cast<std::uint64_t>(g));
        const Group group = sample_group(policy, vocab, inst, group_rng, config);

        std::vector<std::vector<double>> rewards;
        rewards.reserve(group.outputs.size());
        double reward_sum = 0.0;
        std::size_t reward_count = 0;
        int verified = 0;
        for (const GroupOutput& output : group.outputs) {
            rewards.push_back(output.slot_rewards);
            for (double r : output.slot_rewards) {
                reward_sum += r;
                ++reward_count;
            }
            if (output.traj.final_reward.has_value() && *output.traj.final_reward > 0.0) {
                ++verified;
            }
        }
        const auto advantages = suffix_advantages(
            normalize_rewards(rewards, config.std_epsilon));

        GrpoEval last;
        for (int u = 0; u < config.updates_per_group; ++u) {
            std::fill(grad.begin(), grad.end(), 0.0);
            last = grpo_gradient(policy, reference, vocab, group, advantages, config, grad);
            axpy(config.lr, grad, policy.params);
        }

        GrpoGroupStats row;
        row.group_index = g;
        row.instance_id = inst.id;
        row.mean_raw_reward =
            reward_count == 0 ? 0.0 : reward_sum / static_cast<double>(reward_count);
        row.objective = last.objective;
        row.kl = last.kl;
        row.clip_fraction = last.clip_fraction;
        row.accuracy =
            static_cast<double>(verified) / static_cast<double>(config.group_size);
        stats.push_back(std::move(row));
    }
    return stats;
}

// ============================================================================
// Trajectory-level baseline
// ============================================================================

std::vector<GrpoGroupStats> ppo_rlhf_update(Policy& policy, const Vocab& vocab,
                                            std::span<const TaskInstance> tasks, Rng& rng,
                                            const PpoRlhfConfig& config, int n_groups) {
    if (config.group_size < 1) {
        throw ConfigError("group_size", "must be at least 1");
    }
    if (!(config.temperature > 0.0)) {
        throw ConfigError("temperature", "must be positive");
    }
    if (config.kl_beta < 0.0) {
        throw ConfigError("kl_beta", "must be non-negative");
    }
    if (!(config.lr > 0.0)) {
        throw ConfigError("lr", "must be positive");
    }
    validate_reward_config(config.rewards);
    if (tasks.empty()) {
        throw PreconditionError("ppo_rlhf_update needs at least one task");
    }
    if (n_groups < 0) {
        throw PreconditionError("n_groups must be non-negative");
    }

    // Reuse the group sampler; only the final-answer reward is consumed.
    GrpoConfig sampler;
    sampler.group_size = config.group_size;
    sampler.temperature = config.temperature;
    sampler.limits = config.limits;
    sampler.rewards = config.rewards;

    const Policy reference = policy;
    std::vector<GrpoGroupStats> stats;
    std::vector<double> grad(policy.params.size());

    for (int g = 0; g < n_groups; ++g) {
        const TaskInstance& inst = tasks[static_cast<std::size_t>(g) % tasks.size()];
        Rng group_rng = rng.substream(static_cast<std::uint64_t>(g));
        const Group group = sample_group(policy, vocab, inst, group_rng, sampler);

        const double inv_g = 1.0 / static_cast<double>(group.outputs.size());
        double reward_mean = 0.0;
        int verified = 0;
        for (const GroupOutput& output : group.outputs) {
            reward_mean += inv_g * final_answer_reward(output, config.rewards);
            if (output.traj.final_reward.has_value() && *output.traj.final_reward > 0.0) {
                ++verified;
            }
        }

        std::fill(grad.begin(), grad.end(), 0.0);
        double kl_mean = 0.0;
        for (const GroupOutput& output : group.outputs) {
            const SlotLayout layout = layout_of(vocab, output.traj);
            const std::size_t prompt = output.traj.question.size() + 1;
            const std::size_t total = layout.tokens.size();
            if (total == prompt) {
                continue;  // nothing was generated
            }
            const double pg_coef =
                inv_g * (final_answer_reward(output, config.rewards) - reward_mean);
            const double kl_w = inv_g / static_cast<double>(total - prompt);
            std::vector<double> dlogits(static_cast<std::size_t>(policy.arch.output_dim));
            for (std::size_t pos = prompt; pos < total; ++pos) {
                const std::span<const TokenId> context(layout.tokens.data(), pos);
                const TokenId token = layout.tokens[pos];
                const auto active = encode_context(policy.arch, context);
                const Activations acts = forward(policy.arch, policy.params, active);
                const auto logp = log_softmax(acts.logits);
                const auto logq = log_softmax(
                    forward(reference.arch, reference.params,
                            encode_context(reference.arch, context))
                        .logits);
                double kl_ctx = 0.0;
                for (std::size_t j = 0; j < logp.size(); ++j) {
                    kl_ctx += std::exp(logp[j]) * (logp[j] - logq[j]);
                }
                kl_mean += kl_w * kl_ctx;
                for (std::size_t j = 0; j < dlogits.size(); ++j) {
                    const double p = std::exp(logp[j]);
                    const double onehot = j == static_cast<std::size_t>(token) ? 1.0 : 0.0;
                    dlogits[j] = pg_coef * (onehot - p) -
                                 config.kl_beta * kl_w * p * (logp[j] - logq[j] - kl_ctx);
                }
                backward(policy.arch, policy.params, acts, dlogits, grad);
            }
        }
        axpy(config.lr, grad, policy.params);

        GrpoGroupStats row;
        row.group_index = g;
        row.instance_id = inst.id;
        double reward_sum = 0.0;
        std::size_t reward_count = 0;
        for (const GroupOutput& output : group.outputs) {
            for (double r : output.slot_rewards) {
                reward_sum += r;
                ++reward_count;
            }
        }
        row.mean_raw_reward =
            reward_count == 0 ? 0.0 : reward_sum / static_cast<double>(reward_count);
        row.objective = reward_mean - config.kl_beta * kl_mean;
        row.kl = kl_mean;
        row.clip_fraction = 0.0;
        row.accuracy =
            static_cast<double>(verified) / static_cast<double>(config.group_size);
        stats.push_back(std::move(row));
    }
    return stats;
}

}  // namespace stepwise
