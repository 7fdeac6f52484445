#include "stepwise/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <utility>

namespace stepwise {

namespace {

bool score_improves(const TrajectoryScore& incumbent, const TrajectoryScore& challenger) {
    if (challenger.primary != incumbent.primary) {
        return challenger.primary > incumbent.primary;
    }
    return challenger.secondary > incumbent.secondary;
}

void bump_policy(Counters* counters, long n = 1) {
    if (counters != nullptr) {
        counters->policy_evals += n;
    }
}

// Candidate actions at a state, with exact policy priors, in a deterministic
// order: greedy (or enumeration order) first, then novel samples.
struct Proposal {
    Action action;
    double prior = 0.0;
};

std::vector<Proposal> propose_actions(const Policy& policy, const Vocab& vocab,
                                      const TaskInstance& instance, const State& state,
                                      const DecodeBudget& budget, Rng& rng,
                                      Counters* counters) {
    std::vector<Proposal> proposals;
    auto add = [&](const Action& action) {
        const bool seen = std::any_of(proposals.begin(), proposals.end(),
                                      [&](const Proposal& p) { return p.action == action; });
        if (seen) {
            return;
        }
        proposals.push_back({action, std::exp(action_logprob(policy, state, action))});
    };
    switch (budget.expansion) {
        case ExpansionSource::GreedyOnly:
            bump_policy(counters);
            add(greedy_action(policy, vocab, state, budget.limits).action);
            break;
        case ExpansionSource::PolicySampled: {
            bump_policy(counters);
            add(greedy_action(policy, vocab, state, budget.limits).action);
            for (int k = 0; k < budget.expansion_width; ++k) {
                bump_policy(counters);
                add(sample_action(policy, vocab, state, rng, budget.temperature, budget.limits)
                        .action);
            }
            break;
        }
        case ExpansionSource::Enumerated:
            for (const Action& action :
                 enumerate_actions(vocab, instance, state, budget.universe)) {
                add(action);
            }
            break;
    }
    return proposals;
}

Trajectory assemble(const Policy& policy, const Vocab& vocab,
                    const std::vector<TokenId>& question, const std::vector<Action>& steps,
                    const std::optional<Action>& answer, bool truncated) {
    Trajectory traj;
    traj.question = question;
    traj.steps = steps;
    traj.answer = answer;
    traj.truncated = truncated;
    fill_token_logprobs(policy, vocab, traj);
    return traj;
}

}  // namespace

// ============================================================================
// Budgets and bookkeeping
// ============================================================================

std::string decode_strategy_name(DecodeStrategy strategy) {
    switch (strategy) {
        case DecodeStrategy::Greedy:
            return "greedy";
        case DecodeStrategy::BestOfN:
            return "best_of_n";
        case DecodeStrategy::Beam:
            return "beam";
        case DecodeStrategy::Mcts:
            return "mcts";
    }
    return "greedy";
}

DecodeStrategy decode_strategy_from_name(std::string_view name) {
    if (name == "greedy") {
        return DecodeStrategy::Greedy;
    }
    if (name == "best_of_n") {
        return DecodeStrategy::BestOfN;
    }
    if (name == "beam") {
        return DecodeStrategy::Beam;
    }
    if (name == "mcts") {
        return DecodeStrategy::Mcts;
    }
    throw ConfigError("strategy", "unknown decode strategy '" + std::string(name) + "'");
}

std::string expansion_source_name(ExpansionSource source) {
    switch (source) {
        case ExpansionSource::PolicySampled:
            return "policy_sampled";
        case ExpansionSource::GreedyOnly:
            return "greedy_only";
        case ExpansionSource::Enumerated:
            return "enumerated";
    }
    return "policy_sampled";
}

ExpansionSource expansion_source_from_name(std::string_view name) {
    if (name == "policy_sampled") {
        return ExpansionSource::PolicySampled;
    }
    if (name == "greedy_only") {
        return ExpansionSource::GreedyOnly;
    }
    if (name == "enumerated") {
        return ExpansionSource::Enumerated;
    }
    throw ConfigError("expansion", "unknown expansion source '" + std::string(name) + "'");
}

std::string bon_scorer_name(BestOfNScorer scorer) {
    switch (scorer) {
        case BestOfNScorer::Verifier:
            return "verifier";
        case BestOfNScorer::PrmScore:
            return "prm_score";
    }
    return "verifier";
}

BestOfNScorer bon_scorer_from_name(std::string_view name) {
    if (name == "verifier") {
        return BestOfNScorer::Verifier;
    }
    if (name == "prm_score") {
        return BestOfNScorer::PrmScore;
    }
    throw ConfigError("bon_scorer", "unknown best-of-n scorer '" + std::string(name) + "'");
}

void validate_decode_budget(const DecodeBudget& budget) {
    if (budget.n < 1) {
        throw ConfigError("n", "must be at least 1");
    }
    if (budget.beam_width < 1) {
        throw ConfigError("beam_width", "must be at least 1");
    }
    if (budget.simulations < 1) {
        throw ConfigError("simulations", "must be at least 1");
    }
    if (budget.c_puct < 0.0) {
        throw ConfigError("c_puct", "must be non-negative");
    }
    if (budget.expansion_width < 1) {
        throw ConfigError("expansion_width", "must be at least 1");
    }
    if (!(budget.temperature > 0.0)) {
        throw ConfigError("temperature", "must be positive");
    }
    if (budget.lambda < 0.0 || budget.lambda > 1.0) {
        throw ConfigError("lambda", "must lie in [0, 1]");
    }
}

ValueFn prm_value_fn(const Prm& prm, Counters* counters) {
    return [&prm, counters](const State& state) {
        if (counters != nullptr) {
            ++counters->prm_evals;
        }
        return prm_score(prm, state);
    };
}

void fill_token_logprobs(const Policy& policy, const Vocab& vocab, Trajectory& traj) {
    const std::vector<TokenId> stream = trajectory_tokens(vocab, traj);
    const std::size_t prompt = traj.question.size() + 1;
    traj.token_logprobs.clear();
    traj.token_logprobs.reserve(stream.size() - prompt);
    for (std::size_t pos = prompt; pos < stream.size(); ++pos) {
        const std::span<const TokenId> context(stream.data(), pos);
        const auto logprobs = policy_token_logprobs(policy, context);
        traj.token_logprobs.push_back(logprobs[static_cast<std::size_t>(stream[pos])]);
    }
}

// ============================================================================
// Greedy and best-of-N
// ============================================================================

Trajectory greedy_decode(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                         const Limits& limits, Counters* counters) {
    State state = initial_state(vocab, instance.question);
    std::vector<Action> steps;
    std::optional<Action> answer;
    while (true) {
        if (static_cast<int>(steps.size()) >= limits.max_actions ||
            static_cast<int>(state.tokens.size()) + limits.max_step_tokens >
                limits.max_context_tokens) {
            return assemble(policy, vocab, instance.question, steps, answer, true);
        }
        bump_policy(counters);
        const SampledAction got = greedy_action(policy, vocab, state, limits);
        if (got.action.kind == ActionKind::FinalAnswer) {
            answer = got.action;
            return assemble(policy, vocab, instance.question, steps, answer, false);
        }
        state = transition(vocab, state, got.action, limits);
        steps.push_back(got.action);
    }
}

TrajectoryScorer verifier_scorer(const Vocab& vocab, const TaskInstance& instance) {
    return [&vocab, &instance](const Trajectory& traj) {
        TrajectoryScore score;
        score.primary = verify_trajectory(vocab, instance, traj) ? 1.0 : 0.0;
        for (double lp : traj.token_logprobs) {
            score.secondary += lp;
        }
        return score;
    };
}

TrajectoryScorer value_scorer(const Vocab& vocab, const ValueFn& value) {
    return [&vocab, value](const Trajectory& traj) {
        const int actions =
            static_cast<int>(traj.steps.size()) + (traj.answer.has_value() ? 1 : 0);
        TrajectoryScore score;
        score.primary = value(state_after(vocab, traj, actions));
        return score;
    };
}

BestOfNResult best_of_n(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                        const TrajectoryScorer& scorer, int n, double temperature, Rng& rng,
                        const Limits& limits, Counters* counters) {
    if (n < 1) {
        throw PreconditionError("best_of_n needs n >= 1");
    }
    BestOfNResult result;
    for (int i = 0; i < n; ++i) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(i));
        Trajectory traj =
            sample_trajectory(policy, vocab, instance.question, sub, temperature, limits);
        bump_policy(counters, static_cast<long>(traj.steps.size()) +
                                  (traj.answer.has_value() ? 1 : 0));
        const TrajectoryScore score = scorer(traj);
        result.scores.push_back(score);
        if (i == 0 || score_improves(result.scores[static_cast<std::size_t>(
                                         result.best_index)],
                                     score)) {
            result.best = std::move(traj);
            result.best_index = i;
        }
    }
    return result;
}

// ============================================================================
// Beam search
// ============================================================================

namespace {

struct BeamItem {
    State state;
    std::vector<Action> steps;
    double cum_logprob = 0.0;
    double score = 0.0;
};

struct BeamCompletion {
    std::vector<Action> steps;
    Action answer;
    double score = 0.0;
};

}  // namespace

Trajectory beam_search(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                       const ValueFn& value, const DecodeBudget& budget, Rng& rng,
                       Counters* counters) {
    validate_decode_budget(budget);
    const double lambda = budget.lambda;
    // The value term is only consulted when it can influence the blend.
    const auto scored = [&](double cum_logprob, const State& state) {
        double v = 0.0;
        if (lambda < 1.0) {
            v = value(state);
        }
        return lambda * cum_logprob + (1.0 - lambda) * v;
    };

    std::vector<BeamItem> beams;
    beams.push_back({initial_state(vocab, instance.question), {}, 0.0, 0.0});
    std::optional<BeamCompletion> best_completion;
    std::optional<BeamItem> best_partial;

    for (int depth = 0; depth < budget.limits.max_actions && !beams.empty(); ++depth) {
        std::vector<BeamItem> next;
        for (const BeamItem& item : beams) {
            if (static_cast<int>(item.state.tokens.size()) + budget.limits.max_step_tokens >
                budget.limits.max_context_tokens) {
                continue;  // no further action is guaranteed to fit
            }
            const auto proposals =
                propose_actions(policy, vocab, instance, item.state, budget, rng, counters);
            for (const Proposal& proposal : proposals) {
                const double lp =
                    item.cum_logprob + action_logprob(policy, item.state, proposal.action);
                const State child = transition(vocab, item.state, proposal.action,
                                               budget.limits);
                if (proposal.action.kind == ActionKind::FinalAnswer) {
                    BeamCompletion completion;
                    completion.steps = item.steps;
                    completion.answer = proposal.action;
                    completion.score = scored(lp, child);
                    if (!best_completion.has_value() ||
                        completion.score > best_completion->score) {
                        best_completion = std::move(completion);
                    }
                } else {
                    BeamItem extended;
                    extended.state = child;
                    extended.steps = item.steps;
                    extended.steps.push_back(proposal.action);
                    extended.cum_logprob = lp;
                    extended.score = scored(lp, child);
                    next.push_back(std::move(extended));
                }
            }
        }
        // Stable sort keeps earlier proposals ahead on ties.
        std::stable_sort(next.begin(), next.end(), [](const BeamItem& a, const BeamItem& b) {
            return a.score > b.score;
        });
        if (static_cast<int>(next.size()) > budget.beam_width) {
            next.resize(static_cast<std::size_t>(budget.beam_width));
        }
        if (!next.empty() &&
            (!best_partial.has_value() || next.front().score > best_partial->score)) {
            best_partial = next.front();
        }
        beams = std::move(next);
    }

    if (best_completion.has_value()) {
        return assemble(policy, vocab, instance.question, best_completion->steps,
                        best_completion->answer, false);
    }
    if (best_partial.has_value()) {
        return assemble(policy, vocab, instance.question, best_partial->steps, std::nullopt,
                        true);
    }
    return assemble(policy, vocab, instance.question, {}, std::nullopt, true);
}

// ============================================================================
// MCTS
// ============================================================================

namespace {

SearchNode* select_child(SearchNode& node, double c_puct) {
    SearchNode* best = nullptr;
    double best_score = 0.0;
    const double sqrt_parent = std::sqrt(static_cast<double>(node.visit_count));
    for (const auto& child : node.children) {
        const double exploit = child->visit_count > 0 ? child->mean_value() : 0.0;
        const double explore =
            c_puct * child->prior * sqrt_parent / (1.0 + child->visit_count);
        const double score = exploit + explore;
        if (best == nullptr || score > best_score) {
            best = child.get();
            best_score = score;
        }
    }
    return best;
}

void expand_node(SearchNode& node, const Policy& policy, const Vocab& vocab,
                 const TaskInstance& instance, const DecodeBudget& budget, Rng& rng,
                 Counters* counters) {
    node.expanded = true;
    if (node.terminal) {
        return;
    }
    if (static_cast<int>(node.state.action_count()) >= budget.limits.max_actions ||
        static_cast<int>(node.state.tokens.size()) + budget.limits.max_step_tokens >
            budget.limits.max_context_tokens) {
        return;  // out of budget: the node keeps zero children
    }
    for (const Proposal& proposal :
         propose_actions(policy, vocab, instance, node.state, budget, rng, counters)) {
        auto child = std::make_unique<SearchNode>();
        child->state = transition(vocab, node.state, proposal.action, budget.limits);
        child->incoming = proposal.action;
        child->prior = proposal.prior;
        child->terminal = proposal.action.kind == ActionKind::FinalAnswer;
        node.children.push_back(std::move(child));
    }
}

}  // namespace

MctsRun mcts_decode(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                    const ValueFn& value, const DecodeBudget& budget, Rng& rng,
                    Counters* counters) {
    validate_decode_budget(budget);
    MctsRun run;
    run.root = std::make_unique<SearchNode>();
    run.root->state = initial_state(vocab, instance.question);
    expand_node(*run.root, policy, vocab, instance, budget, rng, counters);
    run.root->visit_count = 1;
    run.root->total_value = value(run.root->state);

    for (int sim = 0; sim < budget.simulations; ++sim) {
        std::vector<SearchNode*> path{run.root.get()};
        SearchNode* node = run.root.get();
        while (node->expanded && !node->terminal && !node->children.empty()) {
            node = select_child(*node, budget.c_puct);
            path.push_back(node);
        }
        const double v = value(node->state);
        if (!node->expanded) {
            expand_node(*node, policy, vocab, instance, budget, rng, counters);
        }
        for (SearchNode* visited : path) {
            visited->visit_count += 1;
            visited->total_value += v;
        }
    }

    // Robust-child walk: maximum visits, ties to the lowest child index.
    std::vector<Action> steps;
    std::optional<Action> answer;
    bool truncated = true;
    const SearchNode* node = run.root.get();
    while (!node->children.empty()) {
        const SearchNode* pick = nullptr;
        for (const auto& child : node->children) {
            if (pick == nullptr || child->visit_count > pick->visit_count) {
                pick = child.get();
            }
        }
        if (pick->visit_count == 0) {
            break;  // search never reached below here
        }
        if (pick->terminal) {
            answer = pick->incoming;
            truncated = false;
            break;
        }
        steps.push_back(pick->incoming);
        node = pick;
    }
    run.traj = assemble(policy, vocab, instance.question, steps, answer, truncated);
    return run;
}

BestOfNResult best_of_n_mcts(const Policy& policy, const Vocab& vocab,
                             const TaskInstance& instance, const ValueFn& value,
                             const TrajectoryScorer& scorer, int n, const DecodeBudget& budget,
                             Rng& rng, Counters* counters) {
    if (n < 1) {
        throw PreconditionError("best_of_n_mcts needs n >= 1");
    }
    BestOfNResult result;
    for (int i = 0; i < n; ++i) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(i));
        MctsRun run = mcts_decode(policy, vocab, instance, value, budget, sub, counters);
        const TrajectoryScore score = scorer(run.traj);
        result.scores.push_back(score);
        if (i == 0 || score_improves(result.scores[static_cast<std::size_t>(
                                         result.best_index)],
                                     score)) {
            result.best = std::move(run.traj);
            result.best_index = i;
        }
    }
    return result;
}

// ============================================================================
// Strategy evaluation
// ============================================================================

StrategyReport evaluate_strategy(const Policy& policy, const Prm* prm, const Vocab& vocab,
                                 std::span<const TaskInstance> instances,
                                 const DecodeBudget& budget, std::uint64_t seed) {
    validate_decode_budget(budget);
    if (instances.empty()) {
        throw PreconditionError("evaluate_strategy needs at least one instance");
    }
    const bool needs_prm =
        budget.strategy == DecodeStrategy::Beam || budget.strategy == DecodeStrategy::Mcts ||
        (budget.strategy == DecodeStrategy::BestOfN &&
         budget.bon_scorer == BestOfNScorer::PrmScore);
    if (needs_prm && prm == nullptr) {
        throw PreconditionError("this decode strategy needs a reward model");
    }

    StrategyReport report;
    report.strategy = budget.strategy;
    switch (budget.strategy) {
        case DecodeStrategy::Greedy:
            report.budget = 1;
            break;
        case DecodeStrategy::BestOfN:
            report.budget = budget.n;
            break;
        case DecodeStrategy::Beam:
            report.budget = budget.beam_width;
            break;
        case DecodeStrategy::Mcts:
            report.budget = budget.simulations;
            break;
    }

    Counters counters;
    const ValueFn value = prm != nullptr ? prm_value_fn(*prm, &counters) : ValueFn();
    int solved_count = 0;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const TaskInstance& instance = instances[i];
        Rng rng = Rng(seed).substream(i);
        Trajectory traj;
        switch (budget.strategy) {
            case DecodeStrategy::Greedy:
                traj = greedy_decode(policy, vocab, instance, budget.limits, &counters);
                break;
            case DecodeStrategy::BestOfN: {
                const TrajectoryScorer scorer =
                    budget.bon_scorer == BestOfNScorer::Verifier
                        ? verifier_scorer(vocab, instance)
                        : value_scorer(vocab, value);
                traj = best_of_n(policy, vocab, instance, scorer, budget.n,
                                 budget.temperature, rng, budget.limits, &counters)
                           .best;
                break;
            }
            case DecodeStrategy::Beam:
                traj = beam_search(policy, vocab, instance, value, budget, rng, &counters);
                break;
            case DecodeStrategy::Mcts:
                traj = mcts_decode(policy, vocab, instance, value, budget, rng, &counters).traj;
                break;
        }
        const bool ok = verify_trajectory(vocab, instance, traj);
        report.solved.push_back(ok);
        solved_count += ok ? 1 : 0;
    }
    const auto end = std::chrono::steady_clock::now();
    report.accuracy = static_cast<double>(solved_count) / static_cast<double>(instances.size());
    report.mean_policy_evals =
        static_cast<double>(counters.policy_evals) / static_cast<double>(instances.size());
    report.mean_prm_evals =
        static_cast<double>(counters.prm_evals) / static_cast<double>(instances.size());
    report.seconds = std::chrono::duration<double>(end - start).count();
    return report;
}

}  // namespace stepwise
