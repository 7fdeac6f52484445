#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stepwise/error.hpp"

namespace stepwise {

using TokenId = std::int32_t;

// ============================================================================
// Vocab
// ============================================================================

// Symbol table for the reasoning grammar. Besides content tokens (digits,
// operators, '='), three structural markers are required:
//   - step delimiter ';'  closes a reasoning step,
//   - answer marker  '#'  opens the final answer,
//   - end marker     '$'  closes the whole trajectory.
class Vocab {
public:
    Vocab(std::vector<std::string> tokens,
          std::string step_delimiter = ";",
          std::string answer_marker = "#",
          std::string end_marker = "$");

    // Digits 0-9, '+', '%', '=', ';', '#', '$' — the vocabulary used by the
    // built-in arithmetic tasks.
    static Vocab arithmetic();

    int size() const noexcept { return static_cast<int>(tokens_.size()); }
    const std::string& token(TokenId id) const;
    TokenId id(std::string_view token) const;  // throws if unknown
    bool contains(std::string_view token) const noexcept;

    TokenId step_delimiter() const noexcept { return step_delimiter_; }
    TokenId answer_marker() const noexcept { return answer_marker_; }
    TokenId end_marker() const noexcept { return end_marker_; }

    bool is_digit(TokenId id) const;

    // Space-separated rendering, the on-disk form for token sequences.
    std::string render(std::span<const TokenId> ids) const;
    std::vector<TokenId> parse(std::string_view space_separated) const;

    // Compact rendering for single-character vocabularies ("3+5=8;").
    std::string compact(std::span<const TokenId> ids) const;
    std::vector<TokenId> from_compact(std::string_view text) const;

    // Order-sensitive fingerprint of the token list; checkpoints embed it so a
    // model can never be loaded against the wrong vocabulary.
    std::uint64_t fingerprint() const noexcept { return fingerprint_; }

private:
    std::vector<std::string> tokens_;
    TokenId step_delimiter_ = -1;
    TokenId answer_marker_ = -1;
    TokenId end_marker_ = -1;
    std::uint64_t fingerprint_ = 0;
};

// ============================================================================
// Core value types
// ============================================================================

// Generation/search budgets. Defaults are far above what the built-in tasks
// need, so hitting them is always reportable as truncation or overflow.
struct Limits {
    int max_step_tokens = 16;      // tokens per action, terminator included
    int max_context_tokens = 256;  // total tokens per trajectory
    int max_actions = 16;          // actions per trajectory
};

enum class ActionKind { ReasoningStep, FinalAnswer };

// A reasoning step (content + ';') or a final answer ('#' + content + '$').
// Immutable value; all mutation happens by constructing new actions.
struct Action {
    ActionKind kind = ActionKind::ReasoningStep;
    std::vector<TokenId> tokens;

    bool operator==(const Action&) const = default;
};

// The reasoning context: question tokens (with their closing delimiter)
// followed by every completed action. `step_boundaries[i]` is the index of
// the terminator that closed action i. Immutable value.
struct State {
    std::vector<TokenId> tokens;
    std::vector<int> step_boundaries;

    int action_count() const noexcept { return static_cast<int>(step_boundaries.size()); }
    bool operator==(const State&) const = default;
};

// A complete or in-progress reasoning episode. `question` holds the bare
// question tokens (no delimiter); `token_logprobs` has one entry per
// generated token (question tokens are conditioning only and never scored).
// Rewards are filled in by whichever stage assigns them.
struct Trajectory {
    std::vector<TokenId> question;
    std::vector<Action> steps;
    std::optional<Action> answer;
    std::vector<double> step_rewards;
    std::optional<double> final_reward;
    std::vector<double> token_logprobs;
    bool truncated = false;

    bool terminal() const noexcept { return answer.has_value(); }
    int generated_token_count() const noexcept;
};

// ============================================================================
// Operations
// ============================================================================

// Action constructors that enforce the grammar (content tokens must be plain;
// a final answer is '#' + content + '$').
Action make_step(const Vocab& vocab, std::span<const TokenId> content);
Action make_answer(const Vocab& vocab, std::span<const TokenId> content);

// Checks the structural invariants: non-empty, terminator last and matching
// the kind, no delimiter or end marker before the terminator, and the length
// budget. Throws PreconditionError on violation.
void validate_action(const Vocab& vocab, const Action& action, const Limits& limits = {});

// Initial state for a question: the question tokens followed by the step
// delimiter that separates the prompt from generated reasoning.
State initial_state(const Vocab& vocab, std::span<const TokenId> question);

bool is_terminal(const Vocab& vocab, const State& state);

// Deterministic transition: append the action's tokens and record one new
// boundary. Rejects terminal input states and results that would exceed
// `limits.max_context_tokens`.
State transition(const Vocab& vocab, const State& state, const Action& action,
                 const Limits& limits = {});

// Runs `transition` over a whole action sequence.
State apply_actions(const Vocab& vocab, State state, std::span<const Action> actions,
                    const Limits& limits = {});

// Token stream of a (question, steps, answer) triple, identical to folding
// the actions through `transition` from the initial state.
std::vector<TokenId> construct_tokens(const Vocab& vocab, std::span<const TokenId> question,
                                      std::span<const Action> steps, const Action& answer);

// Full token stream of a trajectory (question delimiter included).
std::vector<TokenId> trajectory_tokens(const Vocab& vocab, const Trajectory& traj);

// State reached after the first `actions` actions of a trajectory
// (actions == steps.size() + 1 lands on the terminal state).
State state_after(const Vocab& vocab, const Trajectory& traj, int actions,
                  const Limits& limits = {});

// Builds a Trajectory value from parts, validating reconstruction.
Trajectory make_trajectory(const Vocab& vocab, std::vector<TokenId> question,
                           std::vector<Action> steps, std::optional<Action> answer);

// ----------------------------------------------------------------------------
// segment: strict inverse of construction
// ----------------------------------------------------------------------------

struct Segmented {
    std::vector<TokenId> question;
    std::vector<Action> steps;
    Action answer;
};

// Splits a complete token stream into (question, steps, answer). Regions are
// separated by step delimiters; the final region must be a '#'-opened,
// '$'-closed answer. A missing question delimiter is tolerated only in the
// zero-step form (question directly followed by the answer). All other
// malformations raise ParseError with the offending token index.
Segmented segment(const Vocab& vocab, std::span<const TokenId> tokens);

// ----------------------------------------------------------------------------
// joint_logprob
// ----------------------------------------------------------------------------

// Source of per-token conditional log-probabilities: log P(next | context).
using TokenLogProbFn =
    std::function<double(std::span<const TokenId> context, TokenId next)>;

struct LogProbResult {
    double nats = 0.0;
    bool zero_prob = false;  // some conditional was exactly zero (nats == -inf)
};

// Sum of conditional log-probabilities over the generated tokens of a
// trajectory (question tokens excluded). The trajectory must reconstruct
// cleanly via `transition`.
LogProbResult joint_logprob(const Vocab& vocab, const TokenLogProbFn& logprob,
                            const Trajectory& traj);

// Content of a final-answer action ('#' and '$' stripped), or nullopt if the
// action is not a well-formed '#'-opened answer.
std::optional<std::vector<TokenId>> answer_content(const Vocab& vocab, const Action& answer);

}  // namespace stepwise
