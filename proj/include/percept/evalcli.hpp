#pragma once

// Experiment configuration, the data / train / eval / sweep commands and the
// command-line front end built on them.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "percept/engine.hpp"

namespace percept {

inline constexpr int kReportSchemaVersion = 1;

struct DataSection {
  int stage1_samples = 4000;
  int stage2_samples = 4000;
  CategoryMix mix;
  bool operator==(const DataSection&) const = default;
};

struct TrainSection {
  int steps = 0;
  int batch_size = 8;
  int log_every = 50;
  OptimizerConfig optimizer;
  LossWeights weights;
  bool operator==(const TrainSection&) const = default;
};

struct EvalSection {
  int suite_size = 500;
  std::uint64_t suite_seed = 1000;
  GenerationLimits limits;
  ForcePolicy force;
  bool traces = false;
  bool operator==(const EvalSection&) const = default;
};

enum class SweepParam : std::uint8_t { eta, slots };
std::string_view to_string(SweepParam p);

struct SweepSection {
  SweepParam param = SweepParam::eta;
  std::vector<double> values = {0.0, 0.1, 0.5};
  int seeds = 3;
  bool operator==(const SweepSection&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  DataSection data;
  TrainSection stage1;
  TrainSection stage2;
  EvalSection eval;
  SweepSection sweep;
  int workers = 1;  // corpus generation and evaluation threads

  static ExperimentConfig defaults();
  void validate() const;  // throws ConfigError
  TrainConfig train_config(int stage, std::uint64_t seed) const;
  EvalOptions eval_options() const;
};

// Strict parsing: unknown keys and wrong types raise ConfigError. Missing keys keep defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// FNV-1a 64 over the canonical (sorted-key, compact) serialization, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& c);

// Pipeline pieces shared by the commands and the acceptance harness.
std::vector<Stage1Sample> stage1_corpus(const ExperimentConfig& c, std::uint64_t seed);
std::vector<PathCandidateSet> stage2_corpus(const ExperimentConfig& c, std::uint64_t seed);
TrainResult run_stage1(const ExperimentConfig& c, std::uint64_t seed);
TrainResult run_stage2(const ExperimentConfig& c, std::uint64_t seed, const Model* init, bool skip_stage1 = false);
std::vector<TaskSample> eval_suite(const ExperimentConfig& c);

// Commands. Each writes its artifacts under `out` and returns its summary document.
nlohmann::json cmd_data(const ExperimentConfig& c, int stage, const std::filesystem::path& out);
nlohmann::json cmd_train(const ExperimentConfig& c, int stage, const std::filesystem::path& out,
                         const std::filesystem::path& corpus_dir = {}, const std::filesystem::path& init = {},
                         bool skip_stage1 = false);
nlohmann::json cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint, const std::filesystem::path& out);
nlohmann::json cmd_sweep(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
void inspect_trace(const std::filesystem::path& path, std::ostream& os, int limit = -1);

// Human-readable comparison table for a sweep summary.
std::string sweep_table(const nlohmann::json& sweep);

// Checks a document against the JSON-schema subset used by the shipped
// schemas: type, required, properties, additionalProperties, items, enum,
// const, minimum, maximum. Throws ValidationError naming the failing path.
void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema);

// Full command line; returns the process exit code (0 ok, 2 usage, 3 validation, 4 runtime).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace percept
