#include "stepwise/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "stepwise/error.hpp"

namespace stepwise {

using nlohmann::json;

// ============================================================================
// Atomic file primitives
// ============================================================================

void atomic_write(const std::filesystem::path& path, std::string_view content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw RecordError(0, "cannot open '" + tmp.string() + "' for writing");
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            throw RecordError(0, "short write to '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw RecordError(0, "cannot open '" + path.string() + "'");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return std::move(buffer).str();
}

// ============================================================================
// JSON helpers
// ============================================================================

namespace {

json get_field(const json& object, const char* key, std::size_t line) {
    const auto it = object.find(key);
    if (it == object.end()) {
        throw RecordError(line, std::string("missing field '") + key + "'");
    }
    return *it;
}

json parse_line(const std::string& text, std::size_t line) {
    json parsed = json::parse(text, nullptr, false);
    if (parsed.is_discarded() || !parsed.is_object()) {
        throw RecordError(line, "malformed JSON object");
    }
    return parsed;
}

// ----------------------------------------------------------------------------
// Per-type serializers (tokens rendered space-separated through the vocab)
// ----------------------------------------------------------------------------

Action action_from_tokens(const Vocab& vocab, std::vector<TokenId> tokens, std::size_t line) {
    Action action;
    action.tokens = std::move(tokens);
    if (action.tokens.empty()) {
        throw RecordError(line, "empty action");
    }
    action.kind = action.tokens.back() == vocab.end_marker() ? ActionKind::FinalAnswer
                                                            : ActionKind::ReasoningStep;
    try {
        validate_action(vocab, action, Limits{.max_step_tokens = 1 << 20});
    } catch (const Error& e) {
        throw RecordError(line, std::string("invalid action: ") + e.what());
    }
    return action;
}

json task_to_json(const Vocab& vocab, const TaskInstance& task) {
    return json{{"id", task.id},
                {"kind", task_kind_name(task.kind)},
                {"operands", task.operands},
                {"modulus", task.modulus},
                {"seed", task.seed},
                {"question", vocab.render(task.question)},
                {"gold_answer", vocab.render(task.gold_answer)}};
}

TaskInstance task_from_json(const Vocab& vocab, const json& object, std::size_t line) {
    std::string kind_name;
    try {
        kind_name = get_field(object, "kind", line).get<std::string>();
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad task field: ") + e.what());
    }
    TaskKind kind;
    try {
        kind = task_kind_from_name(kind_name);
    } catch (const Error&) {
        throw RecordError(line, "unknown task kind '" + kind_name + "'");
    }
    // Rebuild from the generative fields, then insist the stored derived
    // fields agree, so a hand-edited file cannot smuggle in a wrong oracle.
    TaskInstance rebuilt;
    try {
        rebuilt = make_instance(vocab, kind, get_field(object, "operands", line).get<std::vector<int>>(),
                                get_field(object, "modulus", line).get<int>(),
                                get_field(object, "seed", line).get<std::uint64_t>());
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad task field: ") + e.what());
    } catch (const RecordError&) {
        throw;
    } catch (const Error& e) {
        throw RecordError(line, std::string("invalid task: ") + e.what());
    }
    try {
        if (get_field(object, "id", line).get<std::string>() != rebuilt.id ||
            vocab.parse(get_field(object, "question", line).get<std::string>()) !=
                rebuilt.question ||
            vocab.parse(get_field(object, "gold_answer", line).get<std::string>()) !=
                rebuilt.gold_answer) {
            throw RecordError(line, "stored task fields disagree with the oracle reconstruction");
        }
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad task field: ") + e.what());
    } catch (const ParseError& e) {
        throw RecordError(line, std::string("bad token text: ") + e.what());
    }
    return rebuilt;
}

json trajectory_to_json(const Vocab& vocab, const Trajectory& traj) {
    json steps = json::array();
    for (const Action& step : traj.steps) {
        steps.push_back(vocab.render(step.tokens));
    }
    json object{{"question", vocab.render(traj.question)},
                {"steps", std::move(steps)},
                {"step_rewards", traj.step_rewards},
                {"token_logprobs", traj.token_logprobs},
                {"truncated", traj.truncated}};
    object["answer"] = traj.answer ? json(vocab.render(traj.answer->tokens)) : json(nullptr);
    object["final_reward"] = traj.final_reward ? json(*traj.final_reward) : json(nullptr);
    return object;
}

Trajectory trajectory_from_json(const Vocab& vocab, const json& object, std::size_t line) {
    Trajectory traj;
    try {
        traj.question = vocab.parse(get_field(object, "question", line).get<std::string>());
        for (const json& step : get_field(object, "steps", line)) {
            traj.steps.push_back(
                action_from_tokens(vocab, vocab.parse(step.get<std::string>()), line));
        }
        const json answer = get_field(object, "answer", line);
        if (!answer.is_null()) {
            traj.answer =
                action_from_tokens(vocab, vocab.parse(answer.get<std::string>()), line);
        }
        traj.step_rewards = get_field(object, "step_rewards", line).get<std::vector<double>>();
        const json final_reward = get_field(object, "final_reward", line);
        if (!final_reward.is_null()) {
            traj.final_reward = final_reward.get<double>();
        }
        traj.token_logprobs =
            get_field(object, "token_logprobs", line).get<std::vector<double>>();
        traj.truncated = get_field(object, "truncated", line).get<bool>();
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad trajectory field: ") + e.what());
    } catch (const ParseError& e) {
        throw RecordError(line, std::string("bad token text: ") + e.what());
    }
    if (traj.answer && traj.answer->kind != ActionKind::FinalAnswer) {
        throw RecordError(line, "answer field does not hold a final answer");
    }
    for (const Action& step : traj.steps) {
        if (step.kind != ActionKind::ReasoningStep) {
            throw RecordError(line, "steps field holds a final answer");
        }
    }
    return traj;
}

json labeled_state_to_json(const Vocab& vocab, const LabeledState& labeled) {
    return json{{"tokens", vocab.render(labeled.state.tokens)},
                {"boundaries", labeled.state.step_boundaries},
                {"label", labeled.label}};
}

LabeledState labeled_state_from_json(const Vocab& vocab, const json& object,
                                     std::size_t line) {
    LabeledState labeled;
    try {
        labeled.state.tokens = vocab.parse(get_field(object, "tokens", line).get<std::string>());
        labeled.state.step_boundaries =
            get_field(object, "boundaries", line).get<std::vector<int>>();
        labeled.label = get_field(object, "label", line).get<double>();
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad labeled state field: ") + e.what());
    } catch (const ParseError& e) {
        throw RecordError(line, std::string("bad token text: ") + e.what());
    }
    const auto& tokens = labeled.state.tokens;
    for (const int boundary : labeled.state.step_boundaries) {
        const bool in_range = boundary >= 0 && boundary < static_cast<int>(tokens.size());
        const bool closes = in_range && (tokens[boundary] == vocab.step_delimiter() ||
                                         tokens[boundary] == vocab.end_marker());
        if (!closes) {
            throw RecordError(line, "boundary does not point at a terminator");
        }
    }
    if (labeled.label < 0.0 || labeled.label > 1.0) {
        throw RecordError(line, "label outside [0, 1]");
    }
    return labeled;
}

json star_record_to_json(const Vocab& vocab, const StarRecord& record) {
    return json{{"instance_id", record.instance_id},
                {"iteration", record.iteration},
                {"provenance", star_mode_name(record.provenance)},
                {"trajectory", trajectory_to_json(vocab, record.traj)}};
}

StarRecord star_record_from_json(const Vocab& vocab, const json& object, std::size_t line) {
    StarRecord record;
    try {
        record.instance_id = get_field(object, "instance_id", line).get<std::string>();
        record.iteration = get_field(object, "iteration", line).get<int>();
        record.provenance =
            star_mode_from_name(get_field(object, "provenance", line).get<std::string>());
    } catch (const json::exception& e) {
        throw RecordError(line, std::string("bad record field: ") + e.what());
    } catch (const ConfigError& e) {
        throw RecordError(line, e.what());
    }
    record.traj = trajectory_from_json(vocab, get_field(object, "trajectory", line), line);
    return record;
}

// ----------------------------------------------------------------------------
// Generic JSONL plumbing
// ----------------------------------------------------------------------------

template <typename T, typename ToJson>
void save_records(const std::filesystem::path& path, std::string_view schema,
                  std::span<const T> items, ToJson&& to_json) {
    std::string out;
    out += json{{"schema", schema}, {"version", kRecordVersion}}.dump();
    out += '\n';
    for (const T& item : items) {
        out += to_json(item).dump();
        out += '\n';
    }
    atomic_write(path, out);
}

template <typename T, typename FromJson>
std::vector<T> load_records(const std::filesystem::path& path, std::string_view schema,
                            FromJson&& from_json) {
    const std::string content = read_file(path);
    if (content.empty()) {
        throw RecordError(1, "missing header line");
    }

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < content.size()) {
        const std::size_t end = content.find('\n', start);
        if (end == std::string::npos) {
            throw RecordError(lines.size() + 1, "truncated final line (no newline)");
        }
        lines.push_back(content.substr(start, end - start));
        start = end + 1;
    }

    const json header = parse_line(lines[0], 1);
    try {
        if (get_field(header, "schema", 1).get<std::string>() != schema) {
            throw RecordError(1, "schema mismatch: expected '" + std::string(schema) + "'");
        }
        if (get_field(header, "version", 1).get<int>() != kRecordVersion) {
            throw RecordError(1, "unsupported record version");
        }
    } catch (const json::exception& e) {
        throw RecordError(1, std::string("bad header: ") + e.what());
    }

    std::vector<T> items;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t line_number = i + 1;
        items.push_back(from_json(parse_line(lines[i], line_number), line_number));
    }
    return items;
}

}  // namespace

// ============================================================================
// Record files
// ============================================================================

void save_tasks(const std::filesystem::path& path, const Vocab& vocab,
                std::span<const TaskInstance> tasks) {
    save_records(path, "tasks", tasks,
                 [&](const TaskInstance& t) { return task_to_json(vocab, t); });
}

std::vector<TaskInstance> load_tasks(const std::filesystem::path& path, const Vocab& vocab) {
    return load_records<TaskInstance>(path, "tasks", [&](const json& j, std::size_t line) {
        return task_from_json(vocab, j, line);
    });
}

void save_trajectories(const std::filesystem::path& path, const Vocab& vocab,
                       std::span<const Trajectory> trajectories) {
    save_records(path, "trajectories", trajectories,
                 [&](const Trajectory& t) { return trajectory_to_json(vocab, t); });
}

std::vector<Trajectory> load_trajectories(const std::filesystem::path& path,
                                          const Vocab& vocab) {
    return load_records<Trajectory>(path, "trajectories",
                                    [&](const json& j, std::size_t line) {
                                        return trajectory_from_json(vocab, j, line);
                                    });
}

void save_labeled_states(const std::filesystem::path& path, const Vocab& vocab,
                         std::span<const LabeledState> states) {
    save_records(path, "labeled-states", states,
                 [&](const LabeledState& s) { return labeled_state_to_json(vocab, s); });
}

std::vector<LabeledState> load_labeled_states(const std::filesystem::path& path,
                                              const Vocab& vocab) {
    return load_records<LabeledState>(path, "labeled-states",
                                      [&](const json& j, std::size_t line) {
                                          return labeled_state_from_json(vocab, j, line);
                                      });
}

void save_star_records(const std::filesystem::path& path, const Vocab& vocab,
                       std::span<const StarRecord> records) {
    save_records(path, "star-records", records,
                 [&](const StarRecord& r) { return star_record_to_json(vocab, r); });
}

std::vector<StarRecord> load_star_records(const std::filesystem::path& path,
                                          const Vocab& vocab) {
    return load_records<StarRecord>(path, "star-records",
                                    [&](const json& j, std::size_t line) {
                                        return star_record_from_json(vocab, j, line);
                                    });
}

// ============================================================================
// Model checkpoints
// ============================================================================

namespace {

constexpr char kMagic[4] = {'S', 'W', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
public:
    explicit ByteReader(const std::string& data) : data_(data) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
    std::uint64_t u64() { return bytes(8); }
    double f64() { return std::bit_cast<double>(bytes(8)); }

    void magic() {
        need(4);
        if (!std::equal(kMagic, kMagic + 4, data_.begin() + static_cast<long>(pos_))) {
            throw RecordError(0, "not a checkpoint file (bad magic)");
        }
        pos_ += 4;
    }

    bool exhausted() const noexcept { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) {
            throw RecordError(0, "checkpoint file truncated");
        }
    }

    std::uint64_t bytes(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i]))
                 << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    const std::string& data_;
    std::size_t pos_ = 0;
};

std::string encode_checkpoint(CheckpointKind kind, const Architecture& arch, ValueMode mode,
                              std::uint64_t fingerprint, std::uint64_t seed,
                              std::span<const double> params) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(kind));
    put_u32(out, static_cast<std::uint32_t>(arch.context_window));
    put_u32(out, static_cast<std::uint32_t>(arch.hint_positions));
    put_u32(out, static_cast<std::uint32_t>(arch.hidden_dim));
    put_u32(out, static_cast<std::uint32_t>(arch.vocab_size));
    put_u32(out, static_cast<std::uint32_t>(arch.output_dim));
    put_u32(out, static_cast<std::uint32_t>(mode));
    put_u64(out, fingerprint);
    put_u64(out, seed);
    put_u64(out, params.size());
    for (const double p : params) {
        put_f64(out, p);
    }
    return out;
}

struct DecodedCheckpoint {
    CheckpointInfo info;
    std::vector<double> params;
};

DecodedCheckpoint decode_checkpoint(const std::filesystem::path& path, bool want_params) {
    const std::string data = read_file(path);
    ByteReader reader(data);
    reader.magic();
    if (reader.u32() != kCheckpointVersion) {
        throw RecordError(0, "unsupported checkpoint version");
    }
    DecodedCheckpoint decoded;
    const std::uint32_t kind = reader.u32();
    if (kind > static_cast<std::uint32_t>(CheckpointKind::Prm)) {
        throw RecordError(0, "unknown checkpoint kind");
    }
    decoded.info.kind = static_cast<CheckpointKind>(kind);
    Architecture& arch = decoded.info.arch;
    arch.context_window = static_cast<int>(reader.u32());
    arch.hint_positions = static_cast<int>(reader.u32());
    arch.hidden_dim = static_cast<int>(reader.u32());
    arch.vocab_size = static_cast<int>(reader.u32());
    arch.output_dim = static_cast<int>(reader.u32());
    const std::uint32_t mode = reader.u32();
    if (mode > static_cast<std::uint32_t>(ValueMode::TdValue)) {
        throw RecordError(0, "unknown value mode");
    }
    decoded.info.mode = static_cast<ValueMode>(mode);
    decoded.info.vocab_fingerprint = reader.u64();
    decoded.info.seed = reader.u64();
    decoded.info.param_count = reader.u64();
    try {
        arch.validate();
    } catch (const Error& e) {
        throw RecordError(0, std::string("invalid checkpoint architecture: ") + e.what());
    }
    if (decoded.info.param_count != arch.param_count()) {
        throw RecordError(0, "parameter count disagrees with the architecture");
    }
    if (want_params) {
        decoded.params.reserve(decoded.info.param_count);
        for (std::uint64_t i = 0; i < decoded.info.param_count; ++i) {
            decoded.params.push_back(reader.f64());
        }
        if (!reader.exhausted()) {
            throw RecordError(0, "trailing bytes after parameters");
        }
    }
    return decoded;
}

void check_vocab(const CheckpointInfo& info, const Vocab& vocab) {
    if (info.vocab_fingerprint != vocab.fingerprint()) {
        throw RecordError(0, "vocabulary fingerprint mismatch");
    }
    if (info.arch.vocab_size != vocab.size()) {
        throw RecordError(0, "vocabulary size mismatch");
    }
}

}  // namespace

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(path, false).info;
}

void save_policy_checkpoint(const std::filesystem::path& path, const Policy& policy,
                            const Vocab& vocab, std::uint64_t seed) {
    atomic_write(path, encode_checkpoint(CheckpointKind::Policy, policy.arch,
                                         ValueMode::Classifier, vocab.fingerprint(), seed,
                                         policy.params));
}

Policy load_policy_checkpoint(const std::filesystem::path& path, const Vocab& vocab) {
    DecodedCheckpoint decoded = decode_checkpoint(path, true);
    if (decoded.info.kind != CheckpointKind::Policy) {
        throw RecordError(0, "checkpoint holds a value model, not a policy");
    }
    check_vocab(decoded.info, vocab);
    Policy policy;
    policy.arch = decoded.info.arch;
    policy.params = std::move(decoded.params);
    return policy;
}

void save_prm_checkpoint(const std::filesystem::path& path, const Prm& prm,
                         const Vocab& vocab, std::uint64_t seed) {
    atomic_write(path, encode_checkpoint(CheckpointKind::Prm, prm.arch, prm.mode,
                                         vocab.fingerprint(), seed, prm.params));
}

Prm load_prm_checkpoint(const std::filesystem::path& path, const Vocab& vocab) {
    DecodedCheckpoint decoded = decode_checkpoint(path, true);
    if (decoded.info.kind != CheckpointKind::Prm) {
        throw RecordError(0, "checkpoint holds a policy, not a value model");
    }
    check_vocab(decoded.info, vocab);
    Prm prm;
    prm.arch = decoded.info.arch;
    prm.params = std::move(decoded.params);
    prm.mode = decoded.info.mode;
    return prm;
}

}  // namespace stepwise
