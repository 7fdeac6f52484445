#include "stepwise/policy.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace stepwise {

namespace {

// Next-token distribution pieces computed from one forward pass.
struct TokenDistribution {
    Activations acts;
    std::vector<double> logprobs;  // untempered log-softmax
};

TokenDistribution token_distribution(const Policy& policy, std::span<const TokenId> context,
                                     std::span<const TokenId> hint) {
    TokenDistribution dist;
    const auto active = encode_context(policy.arch, context, hint);
    dist.acts = forward(policy.arch, policy.params, active);
    dist.logprobs = log_softmax(dist.acts.logits);
    return dist;
}

ActionKind kind_for_terminator(const Vocab& vocab, TokenId terminator) {
    return terminator == vocab.end_marker() ? ActionKind::FinalAnswer
                                            : ActionKind::ReasoningStep;
}

// Shared emission loop for sampled and greedy actions. `pick` chooses a token
// from the logits; the last slot of the step budget is a forced delimiter.
template <typename Pick>
SampledAction emit_action(const Policy& policy, const Vocab& vocab, const State& state,
                          const Limits& limits, std::span<const TokenId> hint, Pick pick) {
    if (is_terminal(vocab, state)) {
        throw PreconditionError("cannot emit an action from a terminal state");
    }
    if (limits.max_step_tokens < 1) {
        throw PreconditionError("max_step_tokens must be at least 1");
    }
    SampledAction out;
    std::vector<TokenId> context(state.tokens.begin(), state.tokens.end());
    for (int t = 0; t < limits.max_step_tokens; ++t) {
        const TokenDistribution dist = token_distribution(policy, context, hint);
        TokenId tok;
        if (t == limits.max_step_tokens - 1) {
            tok = vocab.step_delimiter();
            out.forced_close = true;
        } else {
            tok = pick(dist.acts.logits);
        }
        out.token_logprobs.push_back(dist.logprobs[static_cast<std::size_t>(tok)]);
        out.action.tokens.push_back(tok);
        context.push_back(tok);
        if (tok == vocab.step_delimiter() || tok == vocab.end_marker()) {
            out.action.kind = kind_for_terminator(vocab, tok);
            return out;
        }
    }
    throw PreconditionError("action emission failed to terminate");
}

}  // namespace

// ============================================================================
// Policy
// ============================================================================

Policy init_policy(const Vocab& vocab, const PolicyConfig& config, Rng& rng) {
    Policy policy;
    policy.arch.context_window = config.context_window;
    policy.arch.hint_positions = config.hint_positions;
    policy.arch.hidden_dim = config.hidden_dim;
    policy.arch.vocab_size = vocab.size();
    policy.arch.output_dim = vocab.size();
    policy.arch.validate();
    policy.params = init_params(policy.arch, rng, config.init_scale);
    return policy;
}

std::vector<double> policy_token_logprobs(const Policy& policy,
                                          std::span<const TokenId> context,
                                          std::span<const TokenId> hint) {
    return token_distribution(policy, context, hint).logprobs;
}

double action_logprob(const Policy& policy, const State& state, const Action& action,
                      std::span<const TokenId> hint) {
    if (action.tokens.empty()) {
        throw PreconditionError("cannot score an empty action");
    }
    std::vector<TokenId> context(state.tokens.begin(), state.tokens.end());
    double total = 0.0;
    for (TokenId tok : action.tokens) {
        if (tok < 0 || tok >= policy.arch.output_dim) {
            throw PreconditionError("action token outside the policy output");
        }
        const TokenDistribution dist = token_distribution(policy, context, hint);
        total += dist.logprobs[static_cast<std::size_t>(tok)];
        context.push_back(tok);
    }
    return total;
}

TokenLogProbFn policy_logprob_fn(const Policy& policy, std::vector<TokenId> hint) {
    return [&policy, hint = std::move(hint)](std::span<const TokenId> context,
                                             TokenId next) -> double {
        if (next < 0 || next >= policy.arch.output_dim) {
            throw PreconditionError("token outside the policy output");
        }
        const auto logprobs = policy_token_logprobs(policy, context, hint);
        return logprobs[static_cast<std::size_t>(next)];
    };
}

// ============================================================================
// Sampling
// ============================================================================

SampledAction sample_action(const Policy& policy, const Vocab& vocab, const State& state,
                            Rng& rng, double temperature, const Limits& limits,
                            std::span<const TokenId> hint) {
    if (!(temperature > 0.0)) {
        throw PreconditionError("sampling temperature must be positive");
    }
    return emit_action(policy, vocab, state, limits, hint,
                       [&](const std::vector<double>& logits) -> TokenId {
                           std::vector<double> tempered(logits.size());
                           for (std::size_t i = 0; i < logits.size(); ++i) {
                               tempered[i] = logits[i] / temperature;
                           }
                           const auto probs = softmax(tempered);
                           return static_cast<TokenId>(rng.sample_categorical(probs));
                       });
}

SampledAction greedy_action(const Policy& policy, const Vocab& vocab, const State& state,
                            const Limits& limits, std::span<const TokenId> hint) {
    return emit_action(policy, vocab, state, limits, hint,
                       [](const std::vector<double>& logits) -> TokenId {
                           const auto best = std::max_element(logits.begin(), logits.end());
                           return static_cast<TokenId>(best - logits.begin());
                       });
}

namespace {

template <typename Emit>
Trajectory roll_trajectory(const Vocab& vocab, std::span<const TokenId> question,
                           const Limits& limits, Emit emit) {
    Trajectory traj;
    traj.question.assign(question.begin(), question.end());
    State state = initial_state(vocab, question);
    while (true) {
        if (state.action_count() >= limits.max_actions ||
            static_cast<int>(state.tokens.size()) + limits.max_step_tokens >
                limits.max_context_tokens) {
            traj.truncated = true;
            return traj;
        }
        SampledAction sampled = emit(state);
        traj.token_logprobs.insert(traj.token_logprobs.end(),
                                   sampled.token_logprobs.begin(),
                                   sampled.token_logprobs.end());
        state = transition(vocab, state, sampled.action, limits);
        if (sampled.action.kind == ActionKind::FinalAnswer) {
            traj.answer = std::move(sampled.action);
            return traj;
        }
        traj.steps.push_back(std::move(sampled.action));
    }
}

}  // namespace

Trajectory sample_trajectory(const Policy& policy, const Vocab& vocab,
                             std::span<const TokenId> question, Rng& rng, double temperature,
                             const Limits& limits, std::span<const TokenId> hint) {
    return roll_trajectory(vocab, question, limits, [&](const State& state) {
        return sample_action(policy, vocab, state, rng, temperature, limits, hint);
    });
}

Trajectory greedy_trajectory(const Policy& policy, const Vocab& vocab,
                             std::span<const TokenId> question, const Limits& limits) {
    return roll_trajectory(vocab, question, limits, [&](const State& state) {
        return greedy_action(policy, vocab, state, limits);
    });
}

// ============================================================================
// Supervised training
// ============================================================================

SupervisedResult supervised_update(Policy& policy, const Vocab& vocab,
                                   std::span<const SupervisedExample> examples, double lr,
                                   int epochs) {
    if (examples.empty()) {
        throw PreconditionError("supervised_update needs at least one example");
    }
    if (!(lr > 0.0)) {
        throw PreconditionError("learning rate must be positive");
    }
    if (epochs < 1) {
        throw PreconditionError("epochs must be at least 1");
    }
    const double inv_n = 1.0 / static_cast<double>(examples.size());
    SupervisedResult result;
    std::vector<double> grad(policy.params.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss_sum = 0.0;
        for (const SupervisedExample& ex : examples) {
            std::vector<TokenId> context(ex.traj.question.begin(), ex.traj.question.end());
            context.push_back(vocab.step_delimiter());
            auto train_token = [&](TokenId target) {
                if (target < 0 || target >= policy.arch.output_dim) {
                    throw PreconditionError("training token outside the policy output");
                }
                const auto active = encode_context(policy.arch, context, ex.hint);
                const Activations acts = forward(policy.arch, policy.params, active);
                const auto logprobs = log_softmax(acts.logits);
                loss_sum += -logprobs[static_cast<std::size_t>(target)];
                std::vector<double> dlogits = softmax(acts.logits);
                dlogits[static_cast<std::size_t>(target)] -= 1.0;
                for (double& d : dlogits) {
                    d *= inv_n;
                }
                backward(policy.arch, policy.params, acts, dlogits, grad);
                context.push_back(target);
            };
            for (const Action& step : ex.traj.steps) {
                for (TokenId tok : step.tokens) {
                    train_token(tok);
                }
            }
            if (ex.traj.answer) {
                for (TokenId tok : ex.traj.answer->tokens) {
                    train_token(tok);
                }
            }
        }
        result.epoch_losses.push_back(loss_sum * inv_n);
        sgd_step(policy.params, grad, lr);
    }
    return result;
}

double trajectory_nll(const Policy& policy, const Vocab& vocab, const Trajectory& traj,
                      std::span<const TokenId> hint) {
    const auto fn = policy_logprob_fn(policy, std::vector<TokenId>(hint.begin(), hint.end()));
    return -joint_logprob(vocab, fn, traj).nats;
}

}  // namespace stepwise
