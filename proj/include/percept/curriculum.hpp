#pragma once

// Stage-1 and stage-2 training corpora.
//
// Stage 1 prepends precomputed expert spans to the question and supervises
// the answer. Stage 2 offers several valid reasoning paths per task (full,
// task-specific, minimal coverage); training keeps the cheapest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "percept/chain.hpp"
#include "percept/world.hpp"

namespace percept {

inline constexpr int kCorpusSchemaVersion = 1;
inline constexpr std::string_view kQuestionMarker = "Question:";

enum class PathCategory : std::uint8_t { full = 0, task_specific = 1, minimal = 2 };
inline constexpr std::array<PathCategory, 3> kAllCategories = {PathCategory::full, PathCategory::task_specific,
                                                               PathCategory::minimal};
std::string_view to_string(PathCategory c);
PathCategory category_from_string(std::string_view s);  // throws DataSchemaMismatch

struct CategoryMix {
  std::array<double, 3> weights = {0.20, 0.60, 0.20};  // indexed by PathCategory
  void validate() const;                               // throws ConfigError
  bool operator==(const CategoryMix&) const = default;
};

struct CorpusOptions {
  int slot_count = kDefaultSlotCount;
  int grid_size = 32;
  ExpertDims dims;
  Split split = Split::train;
  int workers = 1;
  bool with_targets = true;  // stage 1: fill Stage1Sample::targets
};

struct Stage1Sample {
  std::uint64_t id = 0;
  Split split = Split::train;
  TaskSample task;
  ReasoningChain context;  // context spans then the answer
  ExpertSet queried;
  ExpertFeatureBundle targets;  // only queried experts are filled
};

struct PathCandidateSet {
  std::uint64_t id = 0;
  Split split = Split::train;
  TaskSample task;
  std::vector<ReasoningChain> paths;  // paths[0] is the primary path
  std::vector<PathCategory> categories;
};

// Per-task think text around the queries.
struct ThinkTemplate {
  std::string preamble;
  std::string conclusion;
};
ThinkTemplate think_template(const TaskSample& task);
const std::vector<std::string>& template_words();

// Experts a path of the given category queries; task_specific draws one extra.
ExpertSet category_experts(const TaskSample& task, PathCategory category, std::uint64_t seed);
// Rule a path of this category must satisfy.
TaskConstraintRule category_rule(const TaskSample& task, PathCategory category);
ReasoningChain stage2_path(const TaskSample& task, ExpertSet experts, int slot_count);

std::vector<Stage1Sample> build_stage1_corpus(int n, std::uint64_t seed, const CorpusOptions& options = {});
std::vector<PathCandidateSet> build_stage2_corpus(int n, const CategoryMix& mix, std::uint64_t seed,
                                                  const CorpusOptions& options = {});

struct CorpusStats {
  std::map<PathCategory, std::size_t> categories;  // primary paths
  std::map<ExpertKind, std::size_t> expert_usage;  // primary paths containing the expert
  double avg_decision_tokens = 0.0;                // primary paths
  std::size_t samples = 0;
};
CorpusStats corpus_stats(const std::vector<PathCandidateSet>& corpus);

// A model-ready token sequence with positions relative to the first text token.
struct TrainingSequence {
  std::vector<std::string> tokens;
  SequenceLayout layout;     // chain positions mapped into the sequence
  std::set<int> ce_targets;  // token indices that are cross-entropy targets
};

// Context spans, question marker and question, then the answer; CE covers
// the question and the answer.
TrainingSequence stage1_sequence(const Stage1Sample& sample);
// Question marker and question, then the chain; CE covers the chain except
// observation slots.
TrainingSequence stage2_sequence(const TaskSample& task, const ReasoningChain& path);
std::vector<std::string> question_prompt(const std::string& question);

nlohmann::json to_json(const Stage1Sample& s);
nlohmann::json to_json(const PathCandidateSet& s);
Stage1Sample stage1_from_json(const nlohmann::json& j, const CorpusOptions& options);
PathCandidateSet stage2_from_json(const nlohmann::json& j, int slot_count);

struct CorpusManifest {
  int schema_version = kCorpusSchemaVersion;
  int stage = 1;
  std::uint64_t seed = 0;
  CategoryMix mix;
  int slot_count = kDefaultSlotCount;
  Split split = Split::train;
  std::size_t count = 0;
  std::string config_hash;
};
nlohmann::json to_json(const CorpusManifest& m);
CorpusManifest manifest_from_json(const nlohmann::json& j);  // throws SchemaVersionMismatch

// `<dir>/corpus.jsonl` plus `<dir>/manifest.json`.
void write_corpus(const std::filesystem::path& dir, const std::vector<Stage1Sample>& corpus, const CorpusManifest& manifest);
void write_corpus(const std::filesystem::path& dir, const std::vector<PathCandidateSet>& corpus, const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& dir);
std::vector<Stage1Sample> read_stage1_corpus(const std::filesystem::path& dir, const CorpusOptions& options = {});
std::vector<PathCandidateSet> read_stage2_corpus(const std::filesystem::path& dir);

}  // namespace percept
