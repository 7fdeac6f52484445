#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/prm.hpp"
#include "stepwise/rng.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

// ============================================================================
// Budgets and bookkeeping
// ============================================================================

enum class DecodeStrategy { Greedy, BestOfN, Beam, Mcts };

std::string decode_strategy_name(DecodeStrategy strategy);
DecodeStrategy decode_strategy_from_name(std::string_view name);  // throws ConfigError

// How search strategies propose candidate actions at a state.
//   PolicySampled: tempered policy samples plus the greedy action, deduped.
//   GreedyOnly:    the greedy action alone.
//   Enumerated:    the task universe's full action menu (tests and oracles).
enum class ExpansionSource { PolicySampled, GreedyOnly, Enumerated };

std::string expansion_source_name(ExpansionSource source);
ExpansionSource expansion_source_from_name(std::string_view name);  // throws ConfigError

// Which score ranks best-of-N candidates.
enum class BestOfNScorer { Verifier, PrmScore };

std::string bon_scorer_name(BestOfNScorer scorer);
BestOfNScorer bon_scorer_from_name(std::string_view name);  // throws ConfigError

struct DecodeBudget {
    DecodeStrategy strategy = DecodeStrategy::Greedy;
    int n = 8;              // best-of-N samples
    int beam_width = 4;
    int simulations = 64;   // MCTS
    double c_puct = 1.0;
    int expansion_width = 4;
    double temperature = 1.0;
    double lambda = 0.5;    // beam blend: lambda*logprob + (1-lambda)*value
    ExpansionSource expansion = ExpansionSource::PolicySampled;
    BestOfNScorer bon_scorer = BestOfNScorer::Verifier;
    UniverseConfig universe;  // Enumerated expansion only
    Limits limits;
};

void validate_decode_budget(const DecodeBudget& budget);

// Evaluation counters: policy_evals counts action proposals, prm_evals counts
// value-function calls.
struct Counters {
    long policy_evals = 0;
    long prm_evals = 0;
};

// Wraps the reward model as a value function, bumping prm_evals per call.
ValueFn prm_value_fn(const Prm& prm, Counters* counters = nullptr);

// Recomputes per-token conditional log-probabilities for a trajectory that was
// assembled by search rather than sampled, so downstream scoring sees the same
// cached form everywhere.
void fill_token_logprobs(const Policy& policy, const Vocab& vocab, Trajectory& traj);

// ============================================================================
// Greedy and best-of-N
// ============================================================================

Trajectory greedy_decode(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                         const Limits& limits = {}, Counters* counters = nullptr);

// Lexicographic trajectory score: higher primary wins, secondary breaks the
// remaining ties, and equal scores keep the lowest sample index.
struct TrajectoryScore {
    double primary = 0.0;
    double secondary = 0.0;
};

using TrajectoryScorer = std::function<TrajectoryScore(const Trajectory&)>;

// Correctness first, then the trajectory's cached log-probability.
TrajectoryScorer verifier_scorer(const Vocab& vocab, const TaskInstance& instance);

// Value of the last state of the trajectory.
TrajectoryScorer value_scorer(const Vocab& vocab, const ValueFn& value);

struct BestOfNResult {
    Trajectory best;
    int best_index = 0;
    std::vector<TrajectoryScore> scores;
};

// N independent tempered samples on per-index substreams of `rng` (so the
// first k samples coincide for every N >= k), ranked by the scorer. If every
// sample is truncated the best-scored truncated trajectory is returned with
// its flag set.
BestOfNResult best_of_n(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                        const TrajectoryScorer& scorer, int n, double temperature, Rng& rng,
                        const Limits& limits = {}, Counters* counters = nullptr);

// ============================================================================
// Beam search
// ============================================================================

// Step-level beam. Partial score = lambda * cumulative log-probability +
// (1 - lambda) * value(state); the top `beam_width` incomplete states survive
// each depth, completions compete on the same score, and with no completion
// inside the action budget the best partial is returned truncated.
Trajectory beam_search(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                       const ValueFn& value, const DecodeBudget& budget, Rng& rng,
                       Counters* counters = nullptr);

// ============================================================================
// MCTS
// ============================================================================

struct SearchNode {
    State state;
    Action incoming;         // action that led here (empty at the root)
    double prior = 1.0;      // policy probability of the incoming action
    int visit_count = 0;
    double total_value = 0.0;
    bool terminal = false;
    bool expanded = false;
    std::vector<std::unique_ptr<SearchNode>> children;

    double mean_value() const {
        return total_value / static_cast<double>(visit_count > 0 ? visit_count : 1);
    }
};

struct MctsRun {
    Trajectory traj;
    std::unique_ptr<SearchNode> root;  // inspectable tree for diagnostics
};

// PUCT tree search with value-function leaf evaluation and no rollouts.
// Selection maximizes mean value + c_puct * prior * sqrt(parent visits) /
// (1 + child visits). Each simulation descends to the first unexpanded or
// terminal node, evaluates it, and backs the value up the path; the root's
// own evaluation happens once before the first simulation, so root visits =
// simulations + 1 and child visits sum to visits - 1 at every expanded node.
// The returned trajectory follows maximum visit counts (ties to the lowest
// child index) and is truncated if that walk dies before a final answer.
MctsRun mcts_decode(const Policy& policy, const Vocab& vocab, const TaskInstance& instance,
                    const ValueFn& value, const DecodeBudget& budget, Rng& rng,
                    Counters* counters = nullptr);

// Best-of-N over independent tree searches (one reading of running sampling
// and search together): each run uses its own substream, ranked by the scorer.
BestOfNResult best_of_n_mcts(const Policy& policy, const Vocab& vocab,
                             const TaskInstance& instance, const ValueFn& value,
                             const TrajectoryScorer& scorer, int n, const DecodeBudget& budget,
                             Rng& rng, Counters* counters = nullptr);

// ============================================================================
// Strategy evaluation
// ============================================================================

struct StrategyReport {
    DecodeStrategy strategy = DecodeStrategy::Greedy;
    int budget = 1;  // N, beam width, or simulations
    double accuracy = 0.0;
    double mean_policy_evals = 0.0;
    double mean_prm_evals = 0.0;
    double seconds = 0.0;
    std::vector<bool> solved;  // per instance, in input order
};

// Runs one strategy over the instance set with per-instance substreams of
// `seed`, so different strategies see paired randomness. `prm` may be null
// for strategies that never consult a value function.
StrategyReport evaluate_strategy(const Policy& policy, const Prm* prm, const Vocab& vocab,
                                 std::span<const TaskInstance> instances,
                                 const DecodeBudget& budget, std::uint64_t seed);

}  // namespace stepwise
