#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stepwise/decode.hpp"
#include "stepwise/grpo.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/prm.hpp"
#include "stepwise/star.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

inline constexpr const char* kCodeVersion = "stepwise 0.1.0";

// ============================================================================
// Experiment configuration
// ============================================================================

// Supervised warm-up on demonstration trajectories before any RL or
// bootstrapping; gives the sampler a nonzero success rate to amplify.
struct BootstrapConfig {
    int demo_count = 16;
    double lr = 0.5;
    int epochs = 800;
};

// PRM stage: the model dims plus how to fit it. Classifier mode trains on
// the labeled states collected during rationale bootstrapping; td_value mode
// runs fitted value iteration over each training instance's enumerable tree.
struct PrmStageConfig {
    PrmConfig model;
    double lr = 0.2;
    int epochs = 200;
    TdConfig td;
    UniverseConfig universe;  // td_value tree enumeration
    RewardConfig rewards;     // td_value targets
};

enum class RlAlgorithm { Grpo, PpoRlhf };

std::string rl_algorithm_name(RlAlgorithm algorithm);
RlAlgorithm rl_algorithm_from_name(std::string_view name);  // throws ConfigError

struct GrpoStageConfig {
    RlAlgorithm algorithm = RlAlgorithm::Grpo;
    GrpoConfig grpo;
    PpoRlhfConfig ppo;  // used when algorithm == PpoRlhf
    int groups = 200;
    // The reference (and behavior-substream base) is re-frozen every this
    // many groups; one optimizer call covers one refresh window.
    int ref_refresh_groups = 50;
};

struct StageToggles {
    bool star = true;
    bool prm = true;
    bool grpo = true;
    bool decode = true;
};

struct ExperimentConfig {
    TaskGenConfig train_tasks;
    TaskGenConfig eval_tasks;
    PolicyConfig policy;
    BootstrapConfig bootstrap;
    StarConfig star;
    PrmStageConfig prm;
    GrpoStageConfig grpo;
    std::vector<DecodeBudget> decode;
    StageToggles stages;
    std::uint64_t seed = 1;
    std::string out_dir = "run";
};

// Fully defaulted config (one greedy decode budget); the baseline other
// values are read against.
ExperimentConfig default_experiment();

// Strict parse: unknown keys are fatal, every value is type- and
// range-checked, absent keys fall back to defaults. Errors are ConfigError
// naming the dotted key path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical byte form: sorted keys, fixed indentation, trailing newline.
// parse(serialize(c)) reproduces c and serialize is a fixed point after one
// round trip.
std::string serialize_config(const ExperimentConfig& config);

// FNV-1a over the canonical bytes, rendered as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

// Runs every sub-config validator; throws ConfigError on the first failure.
void validate_experiment(const ExperimentConfig& config);

// ============================================================================
// Run manifest
// ============================================================================

struct StageRecord {
    std::string name;
    std::string status;  // "complete", "cached", or "failed: <reason>"
    double seconds = 0.0;
    std::vector<std::string> inputs;   // artifact file names read
    std::vector<std::string> outputs;  // artifact file names written
};

struct RunManifest {
    std::string config_hash;
    std::string code_version = kCodeVersion;
    std::uint64_t master_seed = 0;
    std::vector<std::pair<std::string, std::uint64_t>> stage_seeds;
    std::vector<StageRecord> stages;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kTrainTasks = "train_tasks.jsonl";
inline constexpr const char* kEvalTasks = "eval_tasks.jsonl";
inline constexpr const char* kDemoTasks = "demo_tasks.jsonl";
inline constexpr const char* kStarDataset = "star_dataset.jsonl";
inline constexpr const char* kPrmLabels = "prm_labels.jsonl";
inline constexpr const char* kStarPolicy = "policy_star.ckpt";
inline constexpr const char* kGrpoPolicy = "policy_grpo.ckpt";
inline constexpr const char* kPrmModel = "prm.ckpt";
inline constexpr const char* kStarMetrics = "star_metrics.csv";
inline constexpr const char* kPrmMetrics = "prm_metrics.csv";
inline constexpr const char* kGrpoMetrics = "grpo_metrics.csv";
inline constexpr const char* kDecodeMetrics = "decode_metrics.csv";
}  // namespace artifact

// ============================================================================
// Pipeline
// ============================================================================

// Deterministic per-stage seed derived from the master seed.
std::uint64_t stage_seed(std::uint64_t master, std::string_view stage);

// Individual stages. Each reads its declared inputs from `config.out_dir`,
// writes its outputs there, and returns the record that belongs in the
// manifest. A stage whose outputs all exist already returns "cached" without
// recomputing. Missing inputs raise PreconditionError naming the file.
StageRecord run_gen_tasks(const ExperimentConfig& config);
StageRecord run_star_stage(const ExperimentConfig& config);
StageRecord run_prm_stage(const ExperimentConfig& config);
StageRecord run_grpo_stage(const ExperimentConfig& config);
StageRecord run_decode_stage(const ExperimentConfig& config);

// Creates the output directory, snapshots the config, and initializes the
// manifest. Refuses a directory whose snapshot hash differs from `config`.
// Idempotent for a matching config.
RunManifest prepare_run_dir(const ExperimentConfig& config);

// Upserts the record (keyed by stage name) into the on-disk manifest,
// writing atomically.
void record_stage(const ExperimentConfig& config, const StageRecord& record);

// The full loop: task generation, rationale bootstrapping, PRM fitting,
// policy optimization, decode evaluation — honoring the stage toggles and
// updating the manifest atomically after every stage. A disabled GRPO stage
// leaves decode evaluating the bootstrapped checkpoint.
RunManifest run_pipeline(const ExperimentConfig& config);

}  // namespace stepwise
