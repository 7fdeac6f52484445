#include "stepwise/prm.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <deque>
#include <set>
#include <utility>

namespace stepwise {

namespace {

std::uint64_t token_hash(std::span<const TokenId> tokens) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (TokenId tok : tokens) {
        std::uint32_t u = static_cast<std::uint32_t>(tok);
        for (int b = 0; b < 4; ++b) {
            h ^= (u >> (8 * b)) & 0xFFu;
            h *= 0x100000001B3ULL;
        }
    }
    return h;
}

void check_gamma(double gamma) {
    if (!(gamma > 0.0) || gamma > 1.0) {
        throw PreconditionError("gamma must lie in (0, 1]");
    }
}

// Stable binary cross-entropy from the logit: max(z,0) - y z + log(1+e^-|z|).
double bce_from_logit(double z, double y) {
    return std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

// ============================================================================
// Process reward model
// ============================================================================

std::string value_mode_name(ValueMode mode) {
    return mode == ValueMode::TdValue ? "td_value" : "classifier";
}

ValueMode value_mode_from_name(std::string_view name) {
    if (name == "classifier") {
        return ValueMode::Classifier;
    }
    if (name == "td_value") {
        return ValueMode::TdValue;
    }
    throw ConfigError("mode", "unknown value mode '" + std::string(name) + "'");
}

Prm init_prm(const Vocab& vocab, const PrmConfig& config, Rng& rng) {
    Prm prm;
    prm.arch.context_window = config.context_window;
    prm.arch.hint_positions = 0;
    prm.arch.hidden_dim = config.hidden_dim;
    prm.arch.vocab_size = vocab.size();
    prm.arch.output_dim = 1;
    prm.arch.validate();
    prm.params = init_params(prm.arch, rng, config.init_scale);
    prm.mode = config.mode;
    return prm;
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double prm_raw(const Prm& prm, std::span<const TokenId> context) {
    const auto active = encode_context(prm.arch, context);
    return forward(prm.arch, prm.params, active).logits[0];
}

double prm_score(const Prm& prm, const State& state) {
    const double raw = prm_raw(prm, state.tokens);
    return prm.mode == ValueMode::Classifier ? sigmoid(raw) : raw;
}

// ============================================================================
// Classifier training
// ============================================================================

std::vector<LabeledState> labeled_states(const Vocab& vocab, const TaskInstance& instance,
                                         const Trajectory& traj) {
    std::vector<LabeledState> out;
    State state = initial_state(vocab, traj.question);
    if (traj.question != instance.question) {
        throw PreconditionError("trajectory question does not match the task instance");
    }
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
        const bool good =
            action_is_correct(vocab, instance, static_cast<int>(i), traj.steps[i]);
        state = transition(vocab, state, traj.steps[i]);
        out.push_back(LabeledState{state, good ? 1.0 : 0.0});
    }
    if (traj.answer) {
        const bool good = verify_answer(vocab, instance, *traj.answer);
        state = transition(vocab, state, *traj.answer);
        out.push_back(LabeledState{state, good ? 1.0 : 0.0});
    }
    return out;
}

PrmTrainResult train_prm_classifier(Prm& prm, std::span<const LabeledState> data, double lr,
                                    int epochs) {
    if (prm.mode != ValueMode::Classifier) {
        throw PreconditionError("train_prm_classifier needs a classifier-mode model");
    }
    if (data.empty()) {
        throw PreconditionError("train_prm_classifier needs at least one example");
    }
    if (!(lr > 0.0) || epochs < 1) {
        throw PreconditionError("training needs lr > 0 and epochs >= 1");
    }
    for (const LabeledState& ex : data) {
        if (!(ex.label >= 0.0 && ex.label <= 1.0)) {
            throw PreconditionError("classifier labels must lie in [0, 1]");
        }
    }
    const double inv_n = 1.0 / static_cast<double>(data.size());
    PrmTrainResult result;
    std::vector<double> grad(prm.params.size());
    const std::vector<double> dlogit(1, 0.0);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss_sum = 0.0;
        for (const LabeledState& ex : data) {
            const auto active = encode_context(prm.arch, ex.state.tokens);
            const Activations acts = forward(prm.arch, prm.params, active);
            const double z = acts.logits[0];
            loss_sum += bce_from_logit(z, ex.label);
            const double d = (sigmoid(z) - ex.label) * inv_n;
            backward(prm.arch, prm.params, acts, std::vector<double>{d}, grad);
        }
        result.epoch_losses.push_back(loss_sum * inv_n);
        sgd_step(prm.params, grad, lr);
    }
    return result;
}

// ============================================================================
// Value iteration
// ============================================================================

RewardFn task_reward_fn(const Vocab& vocab, const TaskInstance& instance,
                        const RewardConfig& rewards) {
    return [&vocab, instance, rewards](const State& state) {
        return state_reward(vocab, instance, rewards, state);
    };
}

CandidateFn sampled_candidates(const Policy& policy, const Vocab& vocab, int samples,
                               double temperature, std::uint64_t seed,
                               const Limits& limits) {
    if (samples < 1) {
        throw PreconditionError("sampled_candidates needs at least one sample");
    }
    return [&policy, &vocab, samples, temperature, seed,
            limits](const State& state) -> std::vector<Action> {
        Rng rng = Rng(seed).substream(token_hash(state.tokens));
        std::vector<Action> out;
        std::set<std::vector<TokenId>> seen;
        for (int i = 0; i < samples; ++i) {
            SampledAction sa = sample_action(policy, vocab, state, rng, temperature, limits);
            if (seen.insert(sa.action.tokens).second) {
                out.push_back(std::move(sa.action));
            }
        }
        return out;
    };
}

CandidateFn enumerated_candidates(const Vocab& vocab, const TaskInstance& instance,
                                  const UniverseConfig& universe) {
    return [&vocab, instance, universe](const State& state) {
        return enumerate_actions(vocab, instance, state, universe);
    };
}

CandidateFn with_oracle_candidate(CandidateFn inner, const Vocab& vocab,
                                  const TaskInstance& instance) {
    if (!inner) {
        throw PreconditionError("with_oracle_candidate needs an inner candidate source");
    }
    return [inner = std::move(inner), &vocab, instance](const State& state) {
        std::vector<Action> out = inner(state);
        const int depth = state.action_count();
        const Action expected = depth < oracle_step_count(instance)
                                    ? oracle_step(vocab, instance, depth)
                                    : oracle_answer(vocab, instance);
        if (std::find(out.begin(), out.end(), expected) == out.end()) {
            out.push_back(expected);
        }
        return out;
    };
}

double bellman_backup(const Vocab& vocab, const State& state, const RewardFn& reward,
                      const CandidateFn& candidates, const ValueFn& value, double gamma,
                      const Limits& limits) {
    check_gamma(gamma);
    if (!reward || !candidates || !value) {
        throw PreconditionError("bellman_backup needs reward, candidate, and value functions");
    }
    const double r = reward(state);
    if (is_terminal(vocab, state)) {
        return r;
    }
    bool any = false;
    double best = 0.0;
    for (const Action& action : candidates(state)) {
        State next;
        try {
            next = transition(vocab, state, action, limits);
        } catch (const OverflowError&) {
            continue;  // does not fit the budget; unreachable continuation
        }
        const double v = value(next);
        if (!any || v > best) {
            best = v;
            any = true;
        }
    }
    return any ? r + gamma * best : r;
}

// ----------------------------------------------------------------------------
// Exact values over the enumerable universe
// ----------------------------------------------------------------------------

void ExactValues::set(const State& state, double value) { values_[state.tokens] = value; }

double ExactValues::value_of(const State& state) const {
    const auto it = values_.find(state.tokens);
    if (it == values_.end()) {
        throw PreconditionError("state has no stored exact value");
    }
    return it->second;
}

bool ExactValues::contains(const State& state) const {
    return values_.find(state.tokens) != values_.end();
}

std::vector<State> collect_tree_states(const Vocab& vocab, const TaskInstance& instance,
                                       const UniverseConfig& universe,
                                       std::size_t max_nodes, const Limits& limits) {
    std::vector<State> states;
    std::deque<State> queue;
    queue.push_back(initial_state(vocab, instance.question));
    while (!queue.empty()) {
        State state = std::move(queue.front());
        queue.pop_front();
        states.push_back(state);
        if (states.size() + queue.size() > max_nodes) {
            throw OverflowError("state tree exceeds " + std::to_string(max_nodes) + " nodes");
        }
        if (is_terminal(vocab, states.back())) {
            continue;
        }
        for (const Action& action : enumerate_actions(vocab, instance, states.back(),
                                                      universe)) {
            try {
                queue.push_back(transition(vocab, states.back(), action, limits));
            } catch (const OverflowError&) {
                continue;
            }
        }
    }
    return states;
}

ExactValues brute_force_values(const Vocab& vocab, const TaskInstance& instance,
                               const RewardFn& reward, const UniverseConfig& universe,
                               double gamma, std::size_t max_nodes, const Limits& limits) {
    check_gamma(gamma);
    if (!reward) {
        throw PreconditionError("brute_force_values needs a reward function");
    }
    const std::vector<State> states =
        collect_tree_states(vocab, instance, universe, max_nodes, limits);
    ExactValues values;
    // Children always sit later in breadth-first order, so a reverse sweep
    // sees every child before its parent.
    for (auto it = states.rbegin(); it != states.rend(); ++it) {
        const State& state = *it;
        const double r = reward(state);
        if (is_terminal(vocab, state)) {
            values.set(state, r);
            continue;
        }
        bool any = false;
        double best = 0.0;
        for (const Action& action : enumerate_actions(vocab, instance, state, universe)) {
            State next;
            try {
                next = transition(vocab, state, action, limits);
            } catch (const OverflowError&) {
                continue;
            }
            const double v = values.value_of(next);
            if (!any || v > best) {
                best = v;
                any = true;
            }
        }
        values.set(state, any ? r + gamma * best : r);
    }
    return values;
}

std::vector<Action> optimal_action_path(const Vocab& vocab, const TaskInstance& instance,
                                        const ExactValues& values,
                                        const UniverseConfig& universe,
                                        const Limits& limits) {
    std::vector<Action> path;
    State state = initial_state(vocab, instance.question);
    while (!is_terminal(vocab, state)) {
        if (static_cast<int>(path.size()) > limits.max_actions) {
            throw PreconditionError("optimal path exceeds the action budget");
        }
        bool any = false;
        double best = 0.0;
        Action best_action;
        State best_state;
        for (const Action& action : enumerate_actions(vocab, instance, state, universe)) {
            State next;
            try {
                next = transition(vocab, state, action, limits);
            } catch (const OverflowError&) {
                continue;
            }
            if (!values.contains(next)) {
                continue;
            }
            const double v = values.value_of(next);
            if (!any || v > best) {  // strict: ties keep the lowest index
                best = v;
                best_action = action;
                best_state = next;
                any = true;
            }
        }
        if (!any) {
            throw PreconditionError("optimal path reached a state with no valued children");
        }
        path.push_back(std::move(best_action));
        state = std::move(best_state);
    }
    return path;
}

// ----------------------------------------------------------------------------
// Fitted value iteration (TD training)
// ----------------------------------------------------------------------------

TdResult train_prm_td(Prm& prm, const Vocab& vocab, std::span<const State> states,
                      const RewardFn& reward, const CandidateFn& candidates,
                      const TdConfig& config) {
    check_gamma(config.gamma);
    if (states.empty()) {
        throw PreconditionError("train_prm_td needs at least one state");
    }
    if (config.sweeps < 1 || config.epochs_per_sweep < 1 || !(config.lr > 0.0)) {
        throw PreconditionError("td training needs sweeps >= 1, epochs >= 1, lr > 0");
    }
    const double inv_n = 1.0 / static_cast<double>(states.size());
    TdResult result;
    std::vector<double> grad(prm.params.size());
    std::vector<double> targets(states.size());
    for (int sweep = 0; sweep < config.sweeps; ++sweep) {
        // Freeze the bootstrap: targets come from a snapshot, not the moving
        // parameters.
        const Prm frozen = prm;
        const ValueFn frozen_value = [&frozen](const State& s) {
            return prm_score(frozen, s);
        };
        double start_loss = 0.0;
        for (std::size_t i = 0; i < states.size(); ++i) {
            targets[i] = bellman_backup(vocab, states[i], reward, candidates, frozen_value,
                                        config.gamma, config.limits);
            const double diff = prm_score(prm, states[i]) - targets[i];
            start_loss += diff * diff;
        }
        result.sweep_losses.push_back(start_loss * inv_n);
        for (int epoch = 0; epoch < config.epochs_per_sweep; ++epoch) {
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t i = 0; i < states.size(); ++i) {
                const auto active = encode_context(prm.arch, states[i].tokens);
                const Activations acts = forward(prm.arch, prm.params, active);
                const double z = acts.logits[0];
                double score = z;
                double dscore_dz = 1.0;
                if (prm.mode == ValueMode::Classifier) {
                    score = sigmoid(z);
                    dscore_dz = score * (1.0 - score);
                }
                const double d = 2.0 * (score - targets[i]) * dscore_dz * inv_n;
                backward(prm.arch, prm.params, acts, std::vector<double>{d}, grad);
            }
            sgd_step(prm.params, grad, config.lr);
        }
    }
    return result;
}

}  // namespace stepwise
