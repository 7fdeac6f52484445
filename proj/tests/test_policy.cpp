#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "stepwise/policy.hpp"
#include "stepwise/tasks.hpp"

using namespace stepwise;

namespace {

const Vocab& vocab() {
    static const Vocab v = Vocab::arithmetic();
    return v;
}

std::vector<TokenId> toks(std::string_view compact_text) {
    return vocab().from_compact(compact_text);
}

Policy fresh_policy(std::uint64_t seed) {
    Rng rng(seed);
    return init_policy(vocab(), PolicyConfig{}, rng);
}

}  // namespace

TEST_CASE("init_policy wires the architecture to the vocabulary") {
    const Policy p = fresh_policy(3);
    CHECK(p.arch.vocab_size == 16);
    CHECK(p.arch.output_dim == 16);
    CHECK(p.arch.context_window == 8);
    CHECK(p.arch.hint_positions == 2);
    CHECK(p.arch.input_dim() == 10 * 17);
    CHECK(p.params.size() == p.arch.param_count());
    CHECK(fresh_policy(3).params == p.params);
    CHECK(fresh_policy(4).params != p.params);
}

TEST_CASE("token log-probabilities form a distribution") {
    const Policy p = fresh_policy(5);
    const auto lp = policy_token_logprobs(p, toks("3+5;"));
    REQUIRE(lp.size() == 16);
    double mass = 0.0;
    for (double v : lp) {
        CHECK(v < 0.0);
        mass += std::exp(v);
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("action_logprob equals the sum of token conditionals") {
    const Policy p = fresh_policy(6);
    const State s = initial_state(vocab(), toks("3+5"));
    const Action step = make_step(vocab(), toks("3+5=8"));

    double manual = 0.0;
    std::vector<TokenId> ctx = s.tokens;
    for (TokenId tok : step.tokens) {
        manual += policy_token_logprobs(p, ctx)[static_cast<std::size_t>(tok)];
        ctx.push_back(tok);
    }
    CHECK(action_logprob(p, s, step) == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("joint_logprob through the policy matches summed action scores") {
    const Policy p = fresh_policy(7);
    const auto inst = make_instance(vocab(), TaskKind::AdditionChain, {8, 2, 7}, 0, 1);
    const Trajectory traj = oracle_trajectory(vocab(), inst);

    double by_actions = 0.0;
    State s = initial_state(vocab(), inst.question);
    for (const Action& step : traj.steps) {
        by_actions += action_logprob(p, s, step);
        s = transition(vocab(), s, step);
    }
    by_actions += action_logprob(p, s, *traj.answer);

    const LogProbResult joint = joint_logprob(vocab(), policy_logprob_fn(p), traj);
    CHECK(joint.nats == doctest::Approx(by_actions).epsilon(1e-12));
    CHECK(trajectory_nll(p, vocab(), traj) == doctest::Approx(-by_actions).epsilon(1e-12));
}

TEST_CASE("one-step continuation probabilities are sub-stochastic") {
    const Policy p = fresh_policy(8);
    const State s = initial_state(vocab(), toks("9+4"));

    // Single-token conditionals are a full distribution...
    const auto lp = policy_token_logprobs(p, s.tokens);
    double token_mass = 0.0;
    for (double v : lp) {
        token_mass += std::exp(v);
    }
    CHECK(token_mass == doctest::Approx(1.0).epsilon(1e-12));

    // ...while complete two-token actions cover only part of the event space,
    // so their probabilities must sum to at most 1.
    double action_mass = 0.0;
    for (TokenId first = 0; first < vocab().size(); ++first) {
        if (first == vocab().step_delimiter() || first == vocab().end_marker()) {
            continue;
        }
        Action a;
        a.kind = ActionKind::ReasoningStep;
        a.tokens = {first, vocab().step_delimiter()};
        action_mass += std::exp(action_logprob(p, s, a));
        Action b;
        b.kind = ActionKind::FinalAnswer;
        b.tokens = {first, vocab().end_marker()};
        action_mass += std::exp(action_logprob(p, s, b));
    }
    CHECK(action_mass > 0.0);
    CHECK(action_mass < 1.0);
}

TEST_CASE("sample_action is reproducible and always terminated") {
    const Policy p = fresh_policy(9);
    const State s = initial_state(vocab(), toks("3+5"));
    Rng r1(42), r2(42);
    const SampledAction a = sample_action(p, vocab(), s, r1, 1.0);
    const SampledAction b = sample_action(p, vocab(), s, r2, 1.0);
    CHECK(a.action == b.action);
    CHECK(a.token_logprobs == b.token_logprobs);
    CHECK(a.forced_close == b.forced_close);

    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const SampledAction sa = sample_action(p, vocab(), s, rng, 1.2);
        REQUIRE_FALSE(sa.action.tokens.empty());
        CHECK(sa.action.tokens.size() <= 16);
        CHECK(sa.token_logprobs.size() == sa.action.tokens.size());
        const TokenId last = sa.action.tokens.back();
        if (sa.action.kind == ActionKind::FinalAnswer) {
            CHECK(last == vocab().end_marker());
        } else {
            CHECK(last == vocab().step_delimiter());
        }
        CHECK_NOTHROW(validate_action(vocab(), sa.action));
    }

    CHECK_THROWS_AS(sample_action(p, vocab(), s, rng, 0.0), PreconditionError);
    CHECK_THROWS_AS(sample_action(p, vocab(), s, rng, -1.0), PreconditionError);

    const State done =
        transition(vocab(), s, make_answer(vocab(), toks("8")));
    CHECK_THROWS_AS(sample_action(p, vocab(), done, rng, 1.0), PreconditionError);
}

TEST_CASE("the last step slot is a forced delimiter") {
    const Policy p = fresh_policy(10);
    const State s = initial_state(vocab(), toks("3+5"));
    Limits one;
    one.max_step_tokens = 1;
    Rng rng(2);
    const SampledAction sa = sample_action(p, vocab(), s, rng, 1.0, one);
    CHECK(sa.forced_close);
    CHECK(sa.action.kind == ActionKind::ReasoningStep);
    REQUIRE(sa.action.tokens.size() == 1);
    CHECK(sa.action.tokens[0] == vocab().step_delimiter());
    // The forced token's own log-probability is still recorded.
    const auto lp = policy_token_logprobs(p, s.tokens);
    CHECK(sa.token_logprobs[0] ==
          doctest::Approx(lp[static_cast<std::size_t>(vocab().step_delimiter())]));
}

TEST_CASE("greedy_action is the deterministic argmax path") {
    const Policy p = fresh_policy(11);
    const State s = initial_state(vocab(), toks("9+4"));
    const SampledAction a = greedy_action(p, vocab(), s);
    const SampledAction b = greedy_action(p, vocab(), s);
    CHECK(a.action == b.action);
    CHECK_NOTHROW(validate_action(vocab(), a.action));
}

TEST_CASE("sample_trajectory respects the budgets and caches its scores") {
    const Policy p = fresh_policy(12);
    Limits limits;
    limits.max_actions = 5;
    limits.max_context_tokens = 64;
    Rng rng(77);
    for (int i = 0; i < 50; ++i) {
        const Trajectory traj =
            sample_trajectory(p, vocab(), toks("8+2+7"), rng, 1.0, limits);
        CHECK(static_cast<int>(traj.steps.size()) + (traj.terminal() ? 1 : 0) <=
              limits.max_actions);
        CHECK(static_cast<std::size_t>(traj.generated_token_count()) ==
              traj.token_logprobs.size());
        if (!traj.terminal()) {
            CHECK(traj.truncated);
        }
        // Cached per-token scores must agree with recomputation.
        const double cached =
            std::accumulate(traj.token_logprobs.begin(), traj.token_logprobs.end(), 0.0);
        const LogProbResult joint = joint_logprob(vocab(), policy_logprob_fn(p), traj);
        CHECK(joint.nats == doctest::Approx(cached).epsilon(1e-10));
        // Reconstruction through transition stays within the budgets.
        CHECK_NOTHROW(state_after(vocab(), traj,
                                  static_cast<int>(traj.steps.size()) +
                                      (traj.terminal() ? 1 : 0),
                                  limits));
    }
}

TEST_CASE("supervised_update drives the loss down and memorizes a target") {
    Policy p = fresh_policy(13);
    const auto inst = make_instance(vocab(), TaskKind::AdditionChain, {3, 5}, 0, 2);
    std::vector<SupervisedExample> data;
    data.push_back(SupervisedExample{oracle_trajectory(vocab(), inst), {}});

    // Near-uniform start: summed NLL is close to token_count * ln(16).
    const double expected0 =
        data[0].traj.generated_token_count() * std::log(16.0);
    const SupervisedResult warm = supervised_update(p, vocab(), data, 0.05, 1);
    CHECK(warm.epoch_losses[0] == doctest::Approx(expected0).epsilon(0.01));

    const SupervisedResult run = supervised_update(p, vocab(), data, 0.5, 400);
    CHECK(run.epoch_losses.back() < run.epoch_losses.front());
    CHECK(run.epoch_losses.back() < 0.5);

    const Trajectory greedy = greedy_trajectory(p, vocab(), inst.question);
    CHECK(verify_trajectory(vocab(), inst, greedy));
    CHECK(trajectory_tokens(vocab(), greedy) ==
          trajectory_tokens(vocab(), data[0].traj));

    CHECK_THROWS_AS(supervised_update(p, vocab(), {}, 0.1, 1), PreconditionError);
    CHECK_THROWS_AS(supervised_update(p, vocab(), data, 0.0, 1), PreconditionError);
    CHECK_THROWS_AS(supervised_update(p, vocab(), data, 0.1, 0), PreconditionError);
}

TEST_CASE("hint slots condition the answer") {
    Policy p = fresh_policy(14);
    // Same question, two different demanded answers, distinguished only by
    // the hint: without conditioning this would be unlearnable.
    const auto q = toks("3+5");
    Trajectory to7 = make_trajectory(vocab(), q, {}, make_answer(vocab(), toks("7")));
    Trajectory to9 = make_trajectory(vocab(), q, {}, make_answer(vocab(), toks("9")));
    std::vector<SupervisedExample> data;
    data.push_back(SupervisedExample{to7, toks("7")});
    data.push_back(SupervisedExample{to9, toks("9")});
    supervised_update(p, vocab(), data, 0.5, 400);

    const State s = initial_state(vocab(), q);
    const auto hint7 = toks("7");
    const auto hint9 = toks("9");
    const SampledAction a7 = greedy_action(p, vocab(), s, Limits{}, hint7);
    const SampledAction a9 = greedy_action(p, vocab(), s, Limits{}, hint9);
    CHECK(vocab().compact(a7.action.tokens) == "#7$");
    CHECK(vocab().compact(a9.action.tokens) == "#9$");
}
