#include "stepwise/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <utility>

#include "stepwise/rng.hpp"

namespace stepwise {

namespace {

// Structural validity only; length budgets are checked by validate_action.
void check_structure(const Vocab& vocab, const Action& action) {
    if (action.tokens.empty()) {
        throw PreconditionError("action has no tokens");
    }
    for (TokenId id : action.tokens) {
        if (id < 0 || id >= vocab.size()) {
            throw PreconditionError("action contains token id outside vocabulary: " +
                                    std::to_string(id));
        }
    }
    const TokenId last = action.tokens.back();
    if (action.kind == ActionKind::ReasoningStep && last != vocab.step_delimiter()) {
        throw PreconditionError("reasoning step must end with the step delimiter");
    }
    if (action.kind == ActionKind::FinalAnswer && last != vocab.end_marker()) {
        throw PreconditionError("final answer must end with the end marker");
    }
    for (std::size_t i = 0; i + 1 < action.tokens.size(); ++i) {
        const TokenId id = action.tokens[i];
        if (id == vocab.step_delimiter() || id == vocab.end_marker()) {
            throw PreconditionError("structural token before the action terminator at offset " +
                                    std::to_string(i));
        }
    }
}

void check_plain_question(const Vocab& vocab, std::span<const TokenId> question) {
    for (std::size_t i = 0; i < question.size(); ++i) {
        const TokenId id = question[i];
        if (id < 0 || id >= vocab.size()) {
            throw PreconditionError("question contains token id outside vocabulary: " +
                                    std::to_string(id));
        }
        if (id == vocab.step_delimiter() || id == vocab.answer_marker() ||
            id == vocab.end_marker()) {
            throw PreconditionError("question must not contain structural tokens (offset " +
                                    std::to_string(i) + ")");
        }
    }
}

constexpr Limits unbounded_limits() {
    constexpr int big = std::numeric_limits<int>::max();
    return Limits{big, big, big};
}

}  // namespace

// ============================================================================
// Vocab
// ============================================================================

Vocab::Vocab(std::vector<std::string> tokens, std::string step_delimiter,
             std::string answer_marker, std::string end_marker)
    : tokens_(std::move(tokens)) {
    if (tokens_.empty()) {
        throw PreconditionError("vocabulary is empty");
    }
    std::unordered_map<std::string, TokenId> index;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) {
            throw PreconditionError("vocabulary token " + std::to_string(i) + " is empty");
        }
        if (!index.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw PreconditionError("duplicate vocabulary token: " + tokens_[i]);
        }
    }
    auto require = [&](const std::string& tok, const char* role) {
        auto it = index.find(tok);
        if (it == index.end()) {
            throw PreconditionError(std::string(role) + " token '" + tok +
                                    "' is not in the vocabulary");
        }
        return it->second;
    };
    step_delimiter_ = require(step_delimiter, "step delimiter");
    answer_marker_ = require(answer_marker, "answer marker");
    end_marker_ = require(end_marker, "end marker");
    if (step_delimiter_ == answer_marker_ || step_delimiter_ == end_marker_ ||
        answer_marker_ == end_marker_) {
        throw PreconditionError("structural tokens must be distinct");
    }
    std::uint64_t fp = fnv1a64("stepwise.vocab.v1");
    for (const std::string& tok : tokens_) {
        fp = fnv1a64(tok, fp);
        fp = fnv1a64(std::string_view("\0", 1), fp);
    }
    fingerprint_ = fp;
}

Vocab Vocab::arithmetic() {
    std::vector<std::string> tokens;
    for (int d = 0; d <= 9; ++d) {
        tokens.push_back(std::to_string(d));
    }
    tokens.insert(tokens.end(), {"+", "%", "=", ";", "#", "$"});
    return Vocab(std::move(tokens));
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || id >= size()) {
        throw PreconditionError("token id outside vocabulary: " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id(std::string_view token) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i] == token) {
            return static_cast<TokenId>(i);
        }
    }
    throw PreconditionError("unknown vocabulary token: " + std::string(token));
}

bool Vocab::contains(std::string_view token) const noexcept {
    for (const std::string& tok : tokens_) {
        if (tok == token) {
            return true;
        }
    }
    return false;
}

bool Vocab::is_digit(TokenId id) const {
    const std::string& tok = token(id);
    return tok.size() == 1 && std::isdigit(static_cast<unsigned char>(tok[0])) != 0;
}

std::string Vocab::render(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += token(ids[i]);
    }
    return out;
}

std::vector<TokenId> Vocab::parse(std::string_view space_separated) const {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    std::size_t index = 0;
    while (pos < space_separated.size()) {
        std::size_t end = space_separated.find(' ', pos);
        if (end == std::string_view::npos) {
            end = space_separated.size();
        }
        std::string_view word = space_separated.substr(pos, end - pos);
        if (!word.empty()) {
            bool found = false;
            for (std::size_t i = 0; i < tokens_.size(); ++i) {
                if (tokens_[i] == word) {
                    out.push_back(static_cast<TokenId>(i));
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw ParseError(index, "unknown token '" + std::string(word) + "'");
            }
            ++index;
        }
        pos = end + 1;
    }
    return out;
}

std::string Vocab::compact(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        out += token(id);
    }
    return out;
}

std::vector<TokenId> Vocab::from_compact(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const std::string_view ch = text.substr(i, 1);
        bool found = false;
        for (std::size_t t = 0; t < tokens_.size(); ++t) {
            if (tokens_[t] == ch) {
                out.push_back(static_cast<TokenId>(t));
                found = true;
                break;
            }
        }
        if (!found) {
            throw ParseError(i, "unknown character '" + std::string(ch) + "'");
        }
    }
    return out;
}

// ============================================================================
// Actions and states
// ============================================================================

Action make_step(const Vocab& vocab, std::span<const TokenId> content) {
    Action action;
    action.kind = ActionKind::ReasoningStep;
    action.tokens.assign(content.begin(), content.end());
    action.tokens.push_back(vocab.step_delimiter());
    check_structure(vocab, action);
    return action;
}

Action make_answer(const Vocab& vocab, std::span<const TokenId> content) {
    Action action;
    action.kind = ActionKind::FinalAnswer;
    action.tokens.push_back(vocab.answer_marker());
    action.tokens.insert(action.tokens.end(), content.begin(), content.end());
    action.tokens.push_back(vocab.end_marker());
    check_structure(vocab, action);
    return action;
}

void validate_action(const Vocab& vocab, const Action& action, const Limits& limits) {
    check_structure(vocab, action);
    if (static_cast<int>(action.tokens.size()) > limits.max_step_tokens) {
        throw OverflowError("action length " + std::to_string(action.tokens.size()) +
                            " exceeds the per-step token budget of " +
                            std::to_string(limits.max_step_tokens));
    }
}

State initial_state(const Vocab& vocab, std::span<const TokenId> question) {
    check_plain_question(vocab, question);
    State state;
    state.tokens.assign(question.begin(), question.end());
    state.tokens.push_back(vocab.step_delimiter());
    return state;
}

bool is_terminal(const Vocab& vocab, const State& state) {
    return !state.tokens.empty() && state.tokens.back() == vocab.end_marker();
}

State transition(const Vocab& vocab, const State& state, const Action& action,
                 const Limits& limits) {
    if (state.tokens.empty()) {
        throw PreconditionError("transition from an empty state");
    }
    if (is_terminal(vocab, state)) {
        throw PreconditionError("transition from a terminal state");
    }
    validate_action(vocab, action, limits);
    if (state.action_count() >= limits.max_actions) {
        throw OverflowError("action budget of " + std::to_string(limits.max_actions) +
                            " exhausted");
    }
    const std::size_t new_size = state.tokens.size() + action.tokens.size();
    if (static_cast<int>(new_size) > limits.max_context_tokens) {
        throw OverflowError("context would grow to " + std::to_string(new_size) +
                            " tokens, exceeding the budget of " +
                            std::to_string(limits.max_context_tokens));
    }
    State next;
    next.tokens.reserve(new_size);
    next.tokens = state.tokens;
    next.tokens.insert(next.tokens.end(), action.tokens.begin(), action.tokens.end());
    next.step_boundaries = state.step_boundaries;
    next.step_boundaries.push_back(static_cast<int>(new_size) - 1);
    return next;
}

State apply_actions(const Vocab& vocab, State state, std::span<const Action> actions,
                    const Limits& limits) {
    for (const Action& action : actions) {
        state = transition(vocab, state, action, limits);
    }
    return state;
}

std::vector<TokenId> construct_tokens(const Vocab& vocab, std::span<const TokenId> question,
                                      std::span<const Action> steps, const Action& answer) {
    State state = initial_state(vocab, question);
    state = apply_actions(vocab, std::move(state), steps, unbounded_limits());
    state = transition(vocab, state, answer, unbounded_limits());
    return std::move(state.tokens);
}

std::vector<TokenId> trajectory_tokens(const Vocab& vocab, const Trajectory& traj) {
    State state = state_after(vocab, traj, traj.terminal()
                                               ? static_cast<int>(traj.steps.size()) + 1
                                               : static_cast<int>(traj.steps.size()),
                              unbounded_limits());
    return std::move(state.tokens);
}

State state_after(const Vocab& vocab, const Trajectory& traj, int actions,
                  const Limits& limits) {
    const int step_count = static_cast<int>(traj.steps.size());
    const int total = step_count + (traj.terminal() ? 1 : 0);
    if (actions < 0 || actions > total) {
        throw PreconditionError("requested state after " + std::to_string(actions) +
                                " actions, trajectory has " + std::to_string(total));
    }
    State state = initial_state(vocab, traj.question);
    for (int i = 0; i < std::min(actions, step_count); ++i) {
        state = transition(vocab, state, traj.steps[static_cast<std::size_t>(i)], limits);
    }
    if (actions > step_count) {
        state = transition(vocab, state, *traj.answer, limits);
    }
    return state;
}

Trajectory make_trajectory(const Vocab& vocab, std::vector<TokenId> question,
                           std::vector<Action> steps, std::optional<Action> answer) {
    check_plain_question(vocab, question);
    for (const Action& step : steps) {
        if (step.kind != ActionKind::ReasoningStep) {
            throw PreconditionError("non-step action in the step list");
        }
        check_structure(vocab, step);
    }
    if (answer) {
        if (answer->kind != ActionKind::FinalAnswer) {
            throw PreconditionError("answer action is not a final answer");
        }
        check_structure(vocab, *answer);
    }
    Trajectory traj;
    traj.question = std::move(question);
    traj.steps = std::move(steps);
    traj.answer = std::move(answer);
    return traj;
}

int Trajectory::generated_token_count() const noexcept {
    std::size_t count = 0;
    for (const Action& step : steps) {
        count += step.tokens.size();
    }
    if (answer) {
        count += answer->tokens.size();
    }
    return static_cast<int>(count);
}

// ============================================================================
// segment
// ============================================================================

Segmented segment(const Vocab& vocab, std::span<const TokenId> tokens) {
    if (tokens.empty()) {
        throw ParseError(0, "empty token stream");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab.size()) {
            throw ParseError(i, "token id outside vocabulary: " + std::to_string(tokens[i]));
        }
    }
    const TokenId delim = vocab.step_delimiter();
    const TokenId marker = vocab.answer_marker();
    const TokenId end = vocab.end_marker();

    std::size_t end_pos = tokens.size();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == end) {
            end_pos = i;
            break;
        }
    }
    if (end_pos == tokens.size()) {
        throw ParseError(tokens.size(), "missing end marker");
    }
    if (end_pos + 1 != tokens.size()) {
        throw ParseError(end_pos + 1, "tokens after the end marker");
    }

    std::vector<std::size_t> delims;
    for (std::size_t i = 0; i < end_pos; ++i) {
        if (tokens[i] == delim) {
            delims.push_back(i);
        }
    }

    Segmented out;
    std::size_t answer_start = 0;
    if (delims.empty()) {
        // No delimiters at all: question directly followed by the answer.
        std::size_t marker_pos = end_pos;
        for (std::size_t i = 0; i < end_pos; ++i) {
            if (tokens[i] == marker) {
                marker_pos = i;
                break;
            }
        }
        if (marker_pos == end_pos) {
            throw ParseError(0, "missing answer marker");
        }
        out.question.assign(tokens.begin(),
                            tokens.begin() + static_cast<std::ptrdiff_t>(marker_pos));
        answer_start = marker_pos;
    } else {
        out.question.assign(tokens.begin(),
                            tokens.begin() + static_cast<std::ptrdiff_t>(delims.front()));
        for (std::size_t d = 1; d < delims.size(); ++d) {
            Action step;
            step.kind = ActionKind::ReasoningStep;
            step.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(delims[d - 1] + 1),
                               tokens.begin() + static_cast<std::ptrdiff_t>(delims[d] + 1));
            out.steps.push_back(std::move(step));
        }
        answer_start = delims.back() + 1;
        if (answer_start >= end_pos || tokens[answer_start] != marker) {
            throw ParseError(answer_start, "missing answer marker at the answer start");
        }
    }
    out.answer.kind = ActionKind::FinalAnswer;
    out.answer.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(answer_start),
                             tokens.end());
    return out;
}

// ============================================================================
// joint_logprob
// ============================================================================

LogProbResult joint_logprob(const Vocab& vocab, const TokenLogProbFn& logprob,
                            const Trajectory& traj) {
    if (!logprob) {
        throw PreconditionError("joint_logprob requires a log-probability function");
    }
    State state = initial_state(vocab, traj.question);
    LogProbResult result;
    auto score_action = [&](const Action& action) {
        check_structure(vocab, action);
        for (TokenId tok : action.tokens) {
            const double lp = logprob(std::span<const TokenId>(state.tokens), tok);
            if (std::isinf(lp) && lp < 0.0) {
                result.zero_prob = true;
            }
            result.nats += lp;
            state.tokens.push_back(tok);
        }
        state.step_boundaries.push_back(static_cast<int>(state.tokens.size()) - 1);
    };
    for (const Action& step : traj.steps) {
        if (step.kind != ActionKind::ReasoningStep) {
            throw PreconditionError("non-step action in the step list");
        }
        score_action(step);
    }
    if (traj.answer) {
        if (traj.answer->kind != ActionKind::FinalAnswer) {
            throw PreconditionError("answer action is not a final answer");
        }
        score_action(*traj.answer);
    }
    if (result.zero_prob) {
        result.nats = -std::numeric_limits<double>::infinity();
    }
    return result;
}

std::optional<std::vector<TokenId>> answer_content(const Vocab& vocab, const Action& answer) {
    if (answer.kind != ActionKind::FinalAnswer || answer.tokens.size() < 2) {
        return std::nullopt;
    }
    if (answer.tokens.front() != vocab.answer_marker() ||
        answer.tokens.back() != vocab.end_marker()) {
        return std::nullopt;
    }
    return std::vector<TokenId>(answer.tokens.begin() + 1, answer.tokens.end() - 1);
}

}  // namespace stepwise
