#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stepwise/core.hpp"
#include "stepwise/policy.hpp"
#include "stepwise/prm.hpp"
#include "stepwise/star.hpp"
#include "stepwise/tasks.hpp"

namespace stepwise {

// ============================================================================
// Atomic file primitives
// ============================================================================

// Writes to a sibling temp file, then renames over the target, so readers
// never observe a half-written file. Works for text and binary payloads.
void atomic_write(const std::filesystem::path& path, std::string_view content);

// Whole-file read. Throws RecordError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

// ============================================================================
// Record files: line-delimited JSON with a versioned header
// ============================================================================
//
// Layout: the first line is {"schema": "<name>", "version": 1}; every later
// line is one record object. Token sequences are stored in the vocabulary's
// space-separated rendering. Files always end with a newline; a missing final
// newline reads as a truncated file. All load errors raise RecordError with a
// 1-based line number.

inline constexpr int kRecordVersion = 1;

void save_tasks(const std::filesystem::path& path, const Vocab& vocab,
                std::span<const TaskInstance> tasks);
std::vector<TaskInstance> load_tasks(const std::filesystem::path& path, const Vocab& vocab);

void save_trajectories(const std::filesystem::path& path, const Vocab& vocab,
                       std::span<const Trajectory> trajectories);
std::vector<Trajectory> load_trajectories(const std::filesystem::path& path,
                                          const Vocab& vocab);

void save_labeled_states(const std::filesystem::path& path, const Vocab& vocab,
                         std::span<const LabeledState> states);
std::vector<LabeledState> load_labeled_states(const std::filesystem::path& path,
                                              const Vocab& vocab);

void save_star_records(const std::filesystem::path& path, const Vocab& vocab,
                       std::span<const StarRecord> records);
std::vector<StarRecord> load_star_records(const std::filesystem::path& path,
                                          const Vocab& vocab);

// ============================================================================
// Model checkpoints
// ============================================================================
//
// Binary layout, all integers little-endian:
//   magic "SWCK" | u32 version | u32 kind | 5 x i32 architecture dims |
//   u32 value mode | u64 vocab fingerprint | u64 seed | u64 param count |
//   param count x f64
// The loader rejects wrong magic, unsupported version, kind mismatch,
// inconsistent dimensions, and a vocabulary fingerprint that differs from the
// vocabulary it is asked to load against.

enum class CheckpointKind { Policy, Prm };

struct CheckpointInfo {
    CheckpointKind kind = CheckpointKind::Policy;
    Architecture arch;
    ValueMode mode = ValueMode::Classifier;  // meaningful for Prm only
    std::uint64_t vocab_fingerprint = 0;
    std::uint64_t seed = 0;
    std::uint64_t param_count = 0;
};

// Header fields without materializing the parameters.
CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

void save_policy_checkpoint(const std::filesystem::path& path, const Policy& policy,
                            const Vocab& vocab, std::uint64_t seed);
Policy load_policy_checkpoint(const std::filesystem::path& path, const Vocab& vocab);

void save_prm_checkpoint(const std::filesystem::path& path, const Prm& prm,
                         const Vocab& vocab, std::uint64_t seed);
Prm load_prm_checkpoint(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace stepwise
