#pragma once

// Two-stage training and the think / query / simulate / think decoding loop.

#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "percept/curriculum.hpp"
#include "percept/losses.hpp"
#include "percept/model.hpp"
#include "percept/rng.hpp"

namespace percept {

struct OptimizerConfig {
  double lr_backbone = 2e-3;  // backbone and embeddings
  double lr_heads = 2e-3;     // projection heads
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int warmup_steps = 20;
  double min_lr_fraction = 0.1;  // cosine floor
  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  int stage = 1;
  ModelConfig model;
  LossWeights weights;
  int steps = 2000;
  int batch_size = 8;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  bool skip_stage1 = false;  // stage 2 from a fresh model
  int log_every = 50;

  int slots() const { return model.slots; }
  void validate() const;  // throws ConfigError
  static TrainConfig defaults(int stage);
};

nlohmann::json to_json(const OptimizerConfig& c);
nlohmann::json to_json(const TrainConfig& c);

// AdamW over two parameter groups with global-norm clipping.
class AdamW {
 public:
  AdamW(std::vector<ag::Var> backbone, std::vector<ag::Var> heads, const OptimizerConfig& config);
  void zero_grad();
  double step(double lr_scale);  // returns the pre-clip gradient norm
  long steps_taken() const { return t_; }

 private:
  struct Slot {
    ag::Var param;
    Mat m, v;
    bool head = false;
  };
  std::vector<Slot> slots_;
  OptimizerConfig config_;
  long t_ = 0;
};

double learning_rate_scale(const OptimizerConfig& c, int step, int total_steps);

// Teacher-forced loss of one sequence. `total` is the differentiable
// ce + gamma * vis; the penalty only enters breakdown.combined.
struct PathLoss {
  LossBreakdown breakdown;
  ag::Var total;
};
PathLoss path_loss(const Model& model, const Image& image, const TrainingSequence& seq, const ExpertFeatureBundle& targets,
                   const LossWeights& weights);

// Expert targets used as alignment supervision during training.
ExpertFeatureBundle training_targets(const TaskSample& task, const ModelConfig& config);

struct TrainResult {
  Model model;
  std::vector<nlohmann::json> metrics;  // one record per logged step
  nlohmann::json summary;
};

TrainResult train_stage1(const TrainConfig& config, const std::vector<Stage1Sample>& corpus);
// Without `init` this throws MissingStage1Init unless config.skip_stage1.
TrainResult train_stage2(const TrainConfig& config, const std::vector<PathCandidateSet>& corpus, const Model* init);

enum class ForceMode : std::uint8_t { none, full, random };

struct GenerationLimits {
  int max_tokens = 64;  // generated tokens, slots included
  int max_queries = 8;
  bool operator==(const GenerationLimits&) const = default;
};

struct ForcePolicy {
  ForceMode mode = ForceMode::none;
  double k = 0.0;  // expected query count for ForceMode::random
  bool operator==(const ForcePolicy&) const = default;
};

struct SpanPrediction {
  ExpertKind expert = ExpertKind::seg;
  int position = 0;  // decision token index within the generated chain
  Mat prediction;
};

struct GenerationTrace {
  ReasoningChain chain;
  std::vector<SpanPrediction> predictions;
  std::string answer;
  int decision_tokens = 0;
  int observation_tokens = 0;
  int generated_tokens = 0;
  bool truncated = false;
  double seconds_decode = 0.0;    // free decoding steps
  double seconds_simulate = 0.0;  // slot feeding and projection
  double seconds_total = 0.0;
};

// Greedy decoding with grammar masking. Decision tokens are force-followed by
// N pad inputs whose hidden states are projected; they are masked after
// </think> and once max_queries is reached.
GenerationTrace generate(const Model& model, const Image& image, const std::string& question, const GenerationLimits& limits,
                         const ForcePolicy& force = {}, Rng* rng = nullptr);

std::vector<TaskSample> build_test_suite(int n, std::uint64_t seed, int grid_size = 32);

struct EvalOptions {
  GenerationLimits limits;
  ForcePolicy force;
  std::uint64_t seed = 0;
  int workers = 1;
  bool keep_traces = false;
};

struct TaskMetrics {
  std::size_t samples = 0;
  std::size_t correct = 0;
  std::size_t decision_tokens = 0;
  std::map<ExpertKind, std::size_t> usage;  // traces with >= 1 query of the expert
  double accuracy() const { return samples ? static_cast<double>(correct) / static_cast<double>(samples) : 0.0; }
  double usage_rate(ExpertKind e) const;
};

struct EvalReport {
  std::map<TaskKind, TaskMetrics> per_task;
  std::size_t samples = 0;
  double accuracy = 0.0;
  double avg_decision_tokens = 0.0;
  double avg_observation_tokens = 0.0;
  double avg_query_tokens = 0.0;  // decision + observation
  double avg_generated_tokens = 0.0;
  double avg_trace_seconds = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t expert_calls = 0;  // oracle invocations during the run
  std::vector<GenerationTrace> traces;
};

EvalReport evaluate(const Model& model, const std::vector<TaskSample>& suite, const EvalOptions& options);
nlohmann::json to_json(const EvalReport& r, int slots);

// Binary trace container: magic, version, count, then per trace a JSON
// header and the raw prediction doubles.
void write_traces(const std::filesystem::path& path, const std::vector<GenerationTrace>& traces, int slot_count);
std::vector<GenerationTrace> read_traces(const std::filesystem::path& path);

}  // namespace percept
