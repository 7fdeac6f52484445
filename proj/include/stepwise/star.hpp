#pragma once

#include <span>
#include <string>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/prm.hpp"
#include "stepwise/rng.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

// ============================================================================
// Configuration
// ============================================================================

// Generate samples from pi(.|Q); Rationalize conditions every token draw on
// the gold answer through the hint slots, pi(.|Q,A).
enum class StarMode { Generate, Rationalize };

std::string star_mode_name(StarMode mode);
StarMode star_mode_from_name(std::string_view name);  // throws ConfigError

struct StarConfig {
    int samples_per_question = 8;
    double temperature = 1.0;
    StarMode mode = StarMode::Generate;
    int max_iterations = 3;
    int accept_cap_per_question = 4;  // new records kept per question per iteration
    int min_steps = 1;                // zero-step answers are never accepted
    bool rationalize_fallback = true; // Generate mode only: retry misses with the hint
    bool validate_with_policy = false;  // extra check: the policy re-derives the answer
    double finetune_lr = 0.1;
    int finetune_epochs = 20;
    Limits limits;
};

void validate_star_config(const StarConfig& config);

// ============================================================================
// Dataset
// ============================================================================

struct StarRecord {
    std::string instance_id;
    Trajectory traj;
    int iteration = 0;  // iteration the record was found in
    StarMode provenance = StarMode::Generate;
};

// Cumulative accepted data. Every record passes the answer verifier; the
// (instance id, full token stream) pair is unique across the dataset.
struct ValidatedDataset {
    std::vector<StarRecord> records;
};

bool dataset_contains(const Vocab& vocab, const ValidatedDataset& dataset,
                      const std::string& instance_id,
                      const std::vector<TokenId>& stream_tokens);

// ============================================================================
// Candidate generation and validation
// ============================================================================

struct GenerationReport {
    std::vector<Trajectory> candidates;  // complete trajectories only
    int sampled = 0;
    int truncated = 0;  // dropped for running out of budget before answering
};

// Draws `samples_per_question` trajectories on dedicated substreams of `rng`.
// The hint is used in Rationalize mode only and never enters the trajectory.
GenerationReport generate_rationales(const Policy& policy, const Vocab& vocab,
                                     const TaskInstance& instance, const StarConfig& config,
                                     Rng& rng);

struct ValidatedCandidate {
    Trajectory traj;
    std::vector<LabeledState> labels;  // per-action oracle labels
};

// Keeps complete candidates whose final answer verifies and which carry at
// least `min_steps` reasoning steps. Acceptance keys on the answer alone;
// wrong intermediate steps survive but are labeled incorrect. When
// `answer_check` is given, the policy must also re-derive a verifying answer
// greedily from the candidate's reasoning steps. Truncated candidates are a
// precondition violation.
std::vector<ValidatedCandidate> self_validate(const Vocab& vocab, const TaskInstance& instance,
                                              std::span<const Trajectory> candidates,
                                              int min_steps = 1,
                                              const Policy* answer_check = nullptr);

// ============================================================================
// Iterations
// ============================================================================

struct StarIterationStats {
    int iteration = 0;
    int sampled = 0;
    int truncated = 0;
    int accepted = 0;        // validated candidates before dedup and cap
    int added = 0;           // records actually appended to the dataset
    int fallback_sampled = 0;  // extra rationalize draws in Generate mode
    double acceptance_rate = 0.0;  // accepted / sampled
    bool updated = false;    // supervised pass ran
    std::vector<double> epoch_losses;
};

struct StarIterationResult {
    std::vector<StarRecord> delta;
    std::vector<LabeledState> prm_labels;  // from every candidate, kept or not
    StarIterationStats stats;
};

// One generate -> validate -> finetune round. New records are deduplicated
// against `existing` and capped per question; the supervised pass trains
// hint-free on `existing` plus the delta and is skipped (with `updated`
// false) when nothing new was accepted.
StarIterationResult star_iteration(Policy& policy, const Vocab& vocab,
                                   std::span<const TaskInstance> instances,
                                   const ValidatedDataset& existing, const StarConfig& config,
                                   Rng& rng, int iteration);

struct StarRunResult {
    ValidatedDataset dataset;
    std::vector<StarIterationStats> iterations;
    std::vector<LabeledState> prm_labels;
};

// Runs `max_iterations` rounds, accumulating the dataset and the labeled
// states for reward-model training.
StarRunResult run_star(Policy& policy, const Vocab& vocab,
                       std::span<const TaskInstance> instances, const StarConfig& config,
                       Rng& rng);

// ============================================================================
// Warmup
// ============================================================================

// Supervised pass over oracle demonstrations before any self-training: each
// demonstration is trained both hint-free and with the gold answer in the
// hint slots, so Rationalize-mode conditioning has signal from the start.
SupervisedResult bootstrap_policy(Policy& policy, const Vocab& vocab,
                                  std::span<const TaskInstance> demos, double lr, int epochs);

}  // namespace stepwise
