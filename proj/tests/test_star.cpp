#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>
#include <utility>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/star.hpp"
#include "stepwise/tasks.hpp"

using namespace stepwise;

namespace {

std::vector<TaskInstance> addition_tasks(int count, int operands, std::uint64_t seed,
                                         bool unique = true) {
    TaskGenConfig cfg;
    cfg.kind = TaskKind::AdditionChain;
    cfg.count = count;
    cfg.operand_count = operands;
    cfg.unique_questions = unique;
    Rng rng(seed);
    return generate_tasks(Vocab::arithmetic(), cfg, rng);
}

PolicyConfig wide_policy_config() {
    PolicyConfig cfg;
    cfg.context_window = 8;
    cfg.hint_positions = 2;
    cfg.hidden_dim = 64;
    return cfg;
}

PolicyConfig small_policy_config() {
    PolicyConfig cfg;
    cfg.context_window = 8;
    cfg.hint_positions = 2;
    cfg.hidden_dim = 24;
    return cfg;
}

Policy fresh_policy(const Vocab& vocab, std::uint64_t seed) {
    Rng rng(seed);
    return init_policy(vocab, small_policy_config(), rng);
}

double greedy_accuracy(const Policy& policy, const Vocab& vocab,
                       std::span<const TaskInstance> tasks) {
    int solved = 0;
    for (const TaskInstance& inst : tasks) {
        const Trajectory traj = greedy_trajectory(policy, vocab, inst.question);
        solved += verify_trajectory(vocab, inst, traj) ? 1 : 0;
    }
    return static_cast<double>(solved) / static_cast<double>(tasks.size());
}

}  // namespace

TEST_CASE("star config validation and mode names") {
    StarConfig cfg;
    CHECK_NOTHROW(validate_star_config(cfg));

    StarConfig bad = cfg;
    bad.samples_per_question = 0;
    CHECK_THROWS_AS(validate_star_config(bad), ConfigError);
    bad = cfg;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(validate_star_config(bad), ConfigError);
    bad = cfg;
    bad.accept_cap_per_question = 0;
    CHECK_THROWS_AS(validate_star_config(bad), ConfigError);
    bad = cfg;
    bad.finetune_epochs = 0;
    CHECK_THROWS_AS(validate_star_config(bad), ConfigError);

    CHECK(star_mode_name(StarMode::Generate) == "generate");
    CHECK(star_mode_name(StarMode::Rationalize) == "rationalize");
    CHECK(star_mode_from_name("generate") == StarMode::Generate);
    CHECK(star_mode_from_name("rationalize") == StarMode::Rationalize);
    CHECK_THROWS_AS(star_mode_from_name("mcts"), ConfigError);
}

TEST_CASE("generate_rationales is deterministic and reports truncations") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 3);
    const Policy policy = fresh_policy(vocab, 7);

    StarConfig cfg;
    cfg.samples_per_question = 5;
    Rng rng_a(11);
    Rng rng_b(11);
    const GenerationReport a = generate_rationales(policy, vocab, tasks[0], cfg, rng_a);
    const GenerationReport b = generate_rationales(policy, vocab, tasks[0], cfg, rng_b);
    CHECK(a.sampled == 5);
    CHECK(a.candidates.size() + static_cast<std::size_t>(a.truncated) == 5);
    REQUIRE(a.candidates.size() == b.candidates.size());
    for (std::size_t i = 0; i < a.candidates.size(); ++i) {
        CHECK(trajectory_tokens(vocab, a.candidates[i]) ==
              trajectory_tokens(vocab, b.candidates[i]));
    }
    for (const Trajectory& traj : a.candidates) {
        CHECK_FALSE(traj.truncated);
        CHECK(traj.answer.has_value());
    }
}

TEST_CASE("a converged policy at near-zero temperature reproduces the oracle") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 5);
    Policy policy = fresh_policy(vocab, 9);
    bootstrap_policy(policy, vocab, tasks, 0.3, 150);

    StarConfig cfg;
    cfg.samples_per_question = 1;
    cfg.temperature = 0.01;
    Rng rng(13);
    const GenerationReport report = generate_rationales(policy, vocab, tasks[0], cfg, rng);
    REQUIRE(report.candidates.size() == 1);
    CHECK(trajectory_tokens(vocab, report.candidates[0]) ==
          trajectory_tokens(vocab, oracle_trajectory(vocab, tasks[0])));
}

TEST_CASE("self_validate keys on the final answer and labels steps by the oracle") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 17);
    const TaskInstance& inst = tasks[0];

    const Trajectory good = oracle_trajectory(vocab, inst);

    // Wrong intermediate value, correct final answer.
    Trajectory imperfect = good;
    std::vector<TokenId> wrong_content;
    for (TokenId t : vocab.parse("9 9 + 9 9 = 9 9")) {
        wrong_content.push_back(t);
    }
    imperfect.steps[0] = make_step(vocab, wrong_content);

    // Correct steps, wrong final answer.
    Trajectory wrong_answer = good;
    const std::vector<TokenId> bad_digits{vocab.id("9"), vocab.id("9"), vocab.id("9")};
    wrong_answer.answer = make_answer(vocab, bad_digits);

    const std::vector<Trajectory> candidates{good, imperfect, wrong_answer};
    const auto accepted = self_validate(vocab, inst, candidates);
    REQUIRE(accepted.size() == 2);

    CHECK(trajectory_tokens(vocab, accepted[0].traj) == trajectory_tokens(vocab, good));
    REQUIRE(accepted[0].labels.size() == 2);  // one step, one answer
    CHECK(accepted[0].labels[0].label == 1.0);
    CHECK(accepted[0].labels[1].label == 1.0);

    CHECK(trajectory_tokens(vocab, accepted[1].traj) == trajectory_tokens(vocab, imperfect));
    REQUIRE(accepted[1].labels.size() == 2);
    CHECK(accepted[1].labels[0].label == 0.0);  // wrong step survives, labeled incorrect
    CHECK(accepted[1].labels[1].label == 1.0);
}

TEST_CASE("self_validate enforces the minimum step count") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 19);
    const TaskInstance& inst = tasks[0];

    Trajectory zero_steps =
        make_trajectory(vocab, inst.question, {}, oracle_answer(vocab, inst));
    const std::vector<Trajectory> candidates{zero_steps};

    CHECK(self_validate(vocab, inst, candidates).empty());
    CHECK(self_validate(vocab, inst, candidates, 0).size() == 1);
    CHECK_THROWS_AS(self_validate(vocab, inst, candidates, -1), PreconditionError);
}

TEST_CASE("self_validate rejects truncated candidates outright") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 23);
    Trajectory truncated;
    truncated.question = tasks[0].question;
    truncated.steps.push_back(oracle_step(vocab, tasks[0], 0));
    truncated.truncated = true;
    const std::vector<Trajectory> candidates{truncated};
    CHECK_THROWS_AS(self_validate(vocab, tasks[0], candidates), PreconditionError);
}

TEST_CASE("optional policy answer check rejects what the policy cannot re-derive") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(1, 2, 29);
    const TaskInstance& inst = tasks[0];
    const std::vector<Trajectory> candidates{oracle_trajectory(vocab, inst)};

    const Policy untrained = fresh_policy(vocab, 31);
    CHECK(self_validate(vocab, inst, candidates, 1, &untrained).empty());

    Policy converged = fresh_policy(vocab, 31);
    bootstrap_policy(converged, vocab, tasks, 0.3, 150);
    CHECK(self_validate(vocab, inst, candidates, 1, &converged).size() == 1);
}

TEST_CASE("rationalization accepts at least as often as generation after warmup") {
    const Vocab vocab = Vocab::arithmetic();
    const auto demos = addition_tasks(8, 2, 37);
    const auto eval_tasks = addition_tasks(200, 2, 41, /*unique=*/false);
    Rng prng(43);
    Policy policy = init_policy(vocab, wide_policy_config(), prng);
    bootstrap_policy(policy, vocab, demos, 0.3, 60);

    StarConfig cfg;
    cfg.samples_per_question = 4;

    long generate_accepted = 0;
    long rationalize_accepted = 0;
    long sampled = 0;
    for (std::size_t i = 0; i < eval_tasks.size(); ++i) {
        cfg.mode = StarMode::Generate;
        Rng rng_g = Rng(47).substream(i);
        const auto gen = generate_rationales(policy, vocab, eval_tasks[i], cfg, rng_g);
        generate_accepted +=
            static_cast<long>(self_validate(vocab, eval_tasks[i], gen.candidates).size());

        cfg.mode = StarMode::Rationalize;
        Rng rng_r = Rng(47).substream(i);  // paired draws
        const auto rat = generate_rationales(policy, vocab, eval_tasks[i], cfg, rng_r);
        rationalize_accepted +=
            static_cast<long>(self_validate(vocab, eval_tasks[i], rat.candidates).size());
        sampled += cfg.samples_per_question;
    }
    const double generate_rate = static_cast<double>(generate_accepted) / sampled;
    const double rationalize_rate = static_cast<double>(rationalize_accepted) / sampled;
    CHECK(rationalize_rate >= generate_rate);
    CHECK(generate_rate > 0.0);  // the comparison is not vacuous
}

TEST_CASE("star_iteration without acceptances leaves the policy unchanged") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(2, 2, 53);
    Policy policy = fresh_policy(vocab, 59);  // untrained: essentially never verifies
    const std::vector<double> before = policy.params;

    StarConfig cfg;
    cfg.samples_per_question = 3;
    cfg.rationalize_fallback = false;
    ValidatedDataset empty;
    Rng rng(61);
    const StarIterationResult result =
        star_iteration(policy, vocab, tasks, empty, cfg, rng, 0);
    CHECK(result.delta.empty());
    CHECK_FALSE(result.stats.updated);
    CHECK(result.stats.epoch_losses.empty());
    CHECK(policy.params == before);
    CHECK(result.stats.acceptance_rate == 0.0);
}

TEST_CASE("star_iteration dedups against the dataset and honors the accept cap") {
    const Vocab vocab = Vocab::arithmetic();
    const auto tasks = addition_tasks(2, 2, 67);
    Policy policy = fresh_policy(vocab, 71);
    bootstrap_policy(policy, vocab, tasks, 0.3, 120);  // converged: samples repeat

    StarConfig cfg;
    cfg.samples_per_question = 8;
    cfg.temperature = 0.3;  // low temperature collapses samples onto the oracle
    cfg.accept_cap_per_question = 1;
    cfg.finetune_epochs = 2;

    ValidatedDataset dataset;
    Rng rng_a(73);
    const auto first = star_iteration(policy, vocab, tasks, dataset, cfg, rng_a, 0);
    CHECK(first.stats.added <= 2);  // cap of one per question
    CHECK(first.stats.accepted > first.stats.added);
    for (const StarRecord& record : first.delta) {
        dataset.records.push_back(record);
    }

    // A second pass at the same low temperature finds mostly the same
    // streams; everything already present is skipped.
    Rng rng_b(73);
    const auto second = star_iteration(policy, vocab, tasks, dataset, cfg, rng_b, 1);
    for (const StarRecord& record : second.delta) {
        CHECK_FALSE(dataset_contains(vocab, dataset,
                                     record.instance_id,
                                     trajectory_tokens(vocab, record.traj)));
        dataset.records.push_back(record);
    }

    // No duplicate (instance, stream) pairs anywhere.
    std::set<std::pair<std::string, std::vector<TokenId>>> keys;
    for (const StarRecord& record : dataset.records) {
        CHECK(keys.emplace(record.instance_id, trajectory_tokens(vocab, record.traj)).second);
    }
}

TEST_CASE("generate mode falls back to rationalization on misses") {
    const Vocab vocab = Vocab::arithmetic();
    const auto demos = addition_tasks(6, 2, 79);
    Policy policy = fresh_policy(vocab, 83);

    // Train the hint pathway only: hint-free generation stays near chance
    // while hinted generation is strong.
    std::vector<SupervisedExample> hinted;
    for (const TaskInstance& inst : demos) {
        hinted.push_back({oracle_trajectory(vocab, inst), inst.gold_answer});
    }
    supervised_update(policy, vocab, hinted, 0.25, 120);

    const auto tasks = addition_tasks(6, 2, 89);
    StarConfig cfg;
    cfg.samples_per_question = 6;
    cfg.mode = StarMode::Generate;
    cfg.finetune_epochs = 1;
    cfg.finetune_lr = 1e-6;  // keep the two runs comparable

    cfg.rationalize_fallback = false;
    Policy no_fallback = policy;
    ValidatedDataset empty;
    Rng rng_a(97);
    const auto plain = star_iteration(no_fallback, vocab, tasks, empty, cfg, rng_a, 0);

    cfg.rationalize_fallback = true;
    Policy with_fallback = policy;
    Rng rng_b(97);
    const auto fallback = star_iteration(with_fallback, vocab, tasks, empty, cfg, rng_b, 0);

    CHECK(fallback.stats.fallback_sampled > 0);
    CHECK(fallback.stats.added > plain.stats.added);
    for (const StarRecord& record : fallback.delta) {
        if (record.provenance == StarMode::Rationalize) {
            CHECK(verify_trajectory(
                vocab,
                *std::find_if(tasks.begin(), tasks.end(),
                              [&](const TaskInstance& t) { return t.id == record.instance_id; }),
                record.traj));
        }
    }
}

TEST_CASE("three rationalize iterations grow the dataset and lift greedy accuracy") {
    const Vocab vocab = Vocab::arithmetic();
    const auto demos = addition_tasks(20, 2, 101);
    const auto tasks = addition_tasks(12, 2, 103);
    Rng prng(107);
    Policy policy = init_policy(vocab, wide_policy_config(), prng);
    bootstrap_policy(policy, vocab, demos, 0.5, 800);  // competent on demos only

    const double before = greedy_accuracy(policy, vocab, tasks);

    StarConfig cfg;
    cfg.mode = StarMode::Rationalize;
    cfg.samples_per_question = 24;
    cfg.temperature = 0.9;
    cfg.max_iterations = 3;
    cfg.accept_cap_per_question = 3;
    cfg.finetune_lr = 0.2;
    cfg.finetune_epochs = 80;
    Rng rng(109);
    const StarRunResult run = run_star(policy, vocab, tasks, cfg, rng);

    REQUIRE(run.iterations.size() == 3);
    std::size_t cumulative = 0;
    for (const StarIterationStats& stats : run.iterations) {
        CHECK(stats.acceptance_rate >= 0.0);
        CHECK(stats.acceptance_rate <= 1.0);
        cumulative += static_cast<std::size_t>(stats.added);
    }
    CHECK(run.dataset.records.size() == cumulative);

    // Soundness: every collected record verifies against its instance.
    for (const StarRecord& record : run.dataset.records) {
        const auto it = std::find_if(tasks.begin(), tasks.end(), [&](const TaskInstance& t) {
            return t.id == record.instance_id;
        });
        REQUIRE(it != tasks.end());
        CHECK(verify_trajectory(vocab, *it, record.traj));
        CHECK(record.traj.steps.size() >= 1);
    }
    CHECK_FALSE(run.prm_labels.empty());

    // The acceptance rate climbs across iterations as self-training locks in.
    CHECK(run.iterations[1].acceptance_rate >= run.iterations[0].acceptance_rate - 0.05);
    CHECK(run.iterations[2].acceptance_rate >= run.iterations[1].acceptance_rate - 0.05);

    const double after = greedy_accuracy(policy, vocab, tasks);
    CHECK(after >= before);
    CHECK(after >= 0.8);
}
