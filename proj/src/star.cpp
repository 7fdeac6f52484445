#include "stepwise/star.hpp"

#include <algorithm>
#include <utility>

namespace stepwise {

namespace {

// Greedy answer re-derivation from the candidate's reasoning steps: the
// policy must produce a verifying final answer on its own.
bool policy_rederives_answer(const Policy& policy, const Vocab& vocab,
                             const TaskInstance& instance, const Trajectory& traj) {
    Trajectory steps_only;
    steps_only.question = traj.question;
    steps_only.steps = traj.steps;
    const State state =
        state_after(vocab, steps_only, static_cast<int>(steps_only.steps.size()));
    const SampledAction got = greedy_action(policy, vocab, state);
    if (got.action.kind != ActionKind::FinalAnswer) {
        return false;
    }
    const auto content = answer_content(vocab, got.action);
    return content.has_value() && *content == instance.gold_answer;
}

std::vector<SupervisedExample> hint_free_examples(const ValidatedDataset& existing,
                                                  std::span<const StarRecord> delta) {
    std::vector<SupervisedExample> examples;
    examples.reserve(existing.records.size() + delta.size());
    for (const StarRecord& record : existing.records) {
        examples.push_back({record.traj, {}});
    }
    for (const StarRecord& record : delta) {
        examples.push_back({record.traj, {}});
    }
    return examples;
}

}  // namespace

// ============================================================================
// Configuration
// ============================================================================

std::string star_mode_name(StarMode mode) {
    return mode == StarMode::Generate ? "generate" : "rationalize";
}

StarMode star_mode_from_name(std::string_view name) {
    if (name == "generate") {
        return StarMode::Generate;
    }
    if (name == "rationalize") {
        return StarMode::Rationalize;
    }
    throw ConfigError("mode", "unknown star mode '" + std::string(name) + "'");
}

void validate_star_config(const StarConfig& config) {
    if (config.samples_per_question < 1) {
        throw ConfigError("samples_per_question", "must be at least 1");
    }
    if (!(config.temperature > 0.0)) {
        throw ConfigError("temperature", "must be positive");
    }
    if (config.max_iterations < 1) {
        throw ConfigError("max_iterations", "must be at least 1");
    }
    if (config.accept_cap_per_question < 1) {
        throw ConfigError("accept_cap_per_question", "must be at least 1");
    }
    if (config.min_steps < 0) {
        throw ConfigError("min_steps", "must be non-negative");
    }
    if (!(config.finetune_lr > 0.0)) {
        throw ConfigError("finetune_lr", "must be positive");
    }
    if (config.finetune_epochs < 1) {
        throw ConfigError("finetune_epochs", "must be at least 1");
    }
}

// ============================================================================
// Dataset
// ============================================================================

bool dataset_contains(const Vocab& vocab, const ValidatedDataset& dataset,
                      const std::string& instance_id,
                      const std::vector<TokenId>& stream_tokens) {
    return std::any_of(dataset.records.begin(), dataset.records.end(),
                       [&](const StarRecord& record) {
                           return record.instance_id == instance_id &&
                                  trajectory_tokens(vocab, record.traj) == stream_tokens;
                       });
}

// ============================================================================
// Candidate generation and validation
// ============================================================================

GenerationReport generate_rationales(const Policy& policy, const Vocab& vocab,
                                     const TaskInstance& instance, const StarConfig& config,
                                     Rng& rng) {
    validate_star_config(config);
    GenerationReport report;
    report.sampled = config.samples_per_question;
    const std::span<const TokenId> hint =
        config.mode == StarMode::Rationalize ? std::span<const TokenId>(instance.gold_answer)
                                             : std::span<const TokenId>();
    for (int j = 0; j < config.samples_per_question; ++j) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(j));
        Trajectory traj = sample_trajectory(policy, vocab, instance.question, sub,
                                            config.temperature, config.limits, hint);
        if (traj.truncated) {
            ++report.truncated;
            continue;
        }
        report.candidates.push_back(std::move(traj));
    }
    return report;
}

std::vector<ValidatedCandidate> self_validate(const Vocab& vocab, const TaskInstance& instance,
                                              std::span<const Trajectory> candidates,
                                              int min_steps, const Policy* answer_check) {
    if (min_steps < 0) {
        throw PreconditionError("min_steps must be non-negative");
    }
    std::vector<ValidatedCandidate> accepted;
    for (const Trajectory& traj : candidates) {
        if (traj.truncated || !traj.answer.has_value()) {
            throw PreconditionError("self_validate requires complete candidates");
        }
        if (static_cast<int>(traj.steps.size()) < min_steps) {
            continue;
        }
        if (!verify_trajectory(vocab, instance, traj)) {
            continue;
        }
        if (answer_check != nullptr &&
            !policy_rederives_answer(*answer_check, vocab, instance, traj)) {
            continue;
        }
        ValidatedCandidate out;
        out.traj = traj;
        out.labels = labeled_states(vocab, instance, traj);
        accepted.push_back(std::move(out));
    }
    return accepted;
}

// ============================================================================
// Iterations
// ============================================================================

StarIterationResult star_iteration(Policy& policy, const Vocab& vocab,
                                   std::span<const TaskInstance> instances,
                                   const ValidatedDataset& existing, const StarConfig& config,
                                   Rng& rng, int iteration) {
    validate_star_config(config);
    if (instances.empty()) {
        throw PreconditionError("star_iteration needs at least one instance");
    }

    StarIterationResult result;
    result.stats.iteration = iteration;
    const Policy* answer_check = config.validate_with_policy ? &policy : nullptr;

    for (std::size_t idx = 0; idx < instances.size(); ++idx) {
        const TaskInstance& instance = instances[idx];
        Rng instance_rng = rng.substream(idx);

        GenerationReport report =
            generate_rationales(policy, vocab, instance, config, instance_rng);
        result.stats.sampled += report.sampled;
        result.stats.truncated += report.truncated;
        auto accepted = self_validate(vocab, instance, report.candidates, config.min_steps,
                                      answer_check);
        StarMode provenance = config.mode;

        // Generate-mode misses get a second chance with the answer hint.
        if (accepted.empty() && config.mode == StarMode::Generate &&
            config.rationalize_fallback) {
            StarConfig fallback = config;
            fallback.mode = StarMode::Rationalize;
            Rng fallback_rng = instance_rng.substream("rationalize-fallback");
            report = generate_rationales(policy, vocab, instance, fallback, fallback_rng);
            result.stats.sampled += report.sampled;
            result.stats.fallback_sampled += report.sampled;
            result.stats.truncated += report.truncated;
            accepted = self_validate(vocab, instance, report.candidates, config.min_steps,
                                     answer_check);
            provenance = StarMode::Rationalize;
        }

        // Labels from every complete candidate feed reward-model training,
        // accepted or not.
        for (const Trajectory& traj : report.candidates) {
            auto labels = labeled_states(vocab, instance, traj);
            result.prm_labels.insert(result.prm_labels.end(), labels.begin(), labels.end());
        }

        result.stats.accepted += static_cast<int>(accepted.size());
        int added_here = 0;
        for (ValidatedCandidate& candidate : accepted) {
            if (added_here >= config.accept_cap_per_question) {
                break;
            }
            const auto stream = trajectory_tokens(vocab, candidate.traj);
            if (dataset_contains(vocab, existing, instance.id, stream)) {
                continue;
            }
            const bool in_delta =
                std::any_of(result.delta.begin(), result.delta.end(),
                            [&](const StarRecord& record) {
                                return record.instance_id == instance.id &&
                                       trajectory_tokens(vocab, record.traj) == stream;
                            });
            if (in_delta) {
                continue;
            }
            StarRecord record;
            record.instance_id = instance.id;
            record.traj = std::move(candidate.traj);
            record.iteration = iteration;
            record.provenance = provenance;
            result.delta.push_back(std::move(record));
            ++added_here;
        }
        result.stats.added += added_here;
    }

    result.stats.acceptance_rate =
        result.stats.sampled == 0
            ? 0.0
            : static_cast<double>(result.stats.accepted) / result.stats.sampled;

    if (!result.delta.empty()) {
        const auto examples = hint_free_examples(existing, result.delta);
        const SupervisedResult fit = supervised_update(
            policy, vocab, examples, config.finetune_lr, config.finetune_epochs);
        result.stats.epoch_losses = fit.epoch_losses;
        result.stats.updated = true;
    }
    return result;
}

StarRunResult run_star(Policy& policy, const Vocab& vocab,
                       std::span<const TaskInstance> instances, const StarConfig& config,
                       Rng& rng) {
    validate_star_config(config);
    StarRunResult result;
    for (int i = 0; i < config.max_iterations; ++i) {
        Rng iter_rng = rng.substream(static_cast<std::uint64_t>(i));
        StarIterationResult iter =
            star_iteration(policy, vocab, instances, result.dataset, config, iter_rng, i);
        for (StarRecord& record : iter.delta) {
            result.dataset.records.push_back(std::move(record));
        }
        result.prm_labels.insert(result.prm_labels.end(), iter.prm_labels.begin(),
                                 iter.prm_labels.end());
        result.iterations.push_back(std::move(iter.stats));
    }
    return result;
}

// ============================================================================
// Warmup
// ============================================================================

SupervisedResult bootstrap_policy(Policy& policy, const Vocab& vocab,
                                  std::span<const TaskInstance> demos, double lr, int epochs) {
    if (demos.empty()) {
        throw PreconditionError("bootstrap_policy needs at least one demonstration");
    }
    std::vector<SupervisedExample> examples;
    examples.reserve(demos.size() * 2);
    for (const TaskInstance& instance : demos) {
        const Trajectory demo = oracle_trajectory(vocab, instance);
        examples.push_back({demo, {}});
        examples.push_back({demo, instance.gold_answer});
    }
    return supervised_update(policy, vocab, examples, lr, epochs);
}

}  // namespace stepwise
