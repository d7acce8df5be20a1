#include "percept/evalcli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "percept/error.hpp"

namespace percept {
namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Strict reader over one config object: typed lookups and an unknown-key check.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(where + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw ConfigError(where + " must be an integer");
      if (std::is_unsigned_v<T> && it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0)
        throw ConfigError(where + " must be >= 0");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(where + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(where + " must be a string");
    }
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where + " has the wrong type");
    }
  }

  template <typename T, std::size_t K>
  void get_array(const std::string& key, std::array<T, K>& out) {
    std::vector<T> v(out.begin(), out.end());
    get_vector(key, v);
    if (v.size() != K) throw ConfigError(path_ + "." + key + " must have " + std::to_string(K) + " entries");
    std::copy(v.begin(), v.end(), out.begin());
  }

  void get_vector(const std::string& key, std::vector<double>& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError(path_ + "." + key + " must be an array");
    out.clear();
    for (const auto& x : *it) {
      if (!x.is_number()) throw ConfigError(path_ + "." + key + " must hold numbers");
      out.push_back(x.get<double>());
    }
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    static const json empty = json::object();
    return Reader(it == j_.end() ? empty : *it, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + path_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string_view to_string(ForceMode m) {
  switch (m) {
    case ForceMode::none: return "none";
    case ForceMode::full: return "full";
    case ForceMode::random: return "random";
  }
  return "none";
}

ForceMode force_from_string(const std::string& s) {
  if (s == "none") return ForceMode::none;
  if (s == "full") return ForceMode::full;
  if (s == "random") return ForceMode::random;
  throw ConfigError("eval.force must be none, full or random");
}

json train_section_json(const TrainSection& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"log_every", t.log_every},
          {"optimizer", to_json(t.optimizer)},
          {"weights", {{"lambda", t.weights.lambda}, {"gamma", t.weights.gamma}, {"eta", t.weights.eta}}}};
}

void read_train_section(Reader r, TrainSection& t) {
  r.get("steps", t.steps);
  r.get("batch_size", t.batch_size);
  r.get("log_every", t.log_every);
  auto o = r.child("optimizer");
  o.get("lr_backbone", t.optimizer.lr_backbone);
  o.get("lr_heads", t.optimizer.lr_heads);
  o.get("beta1", t.optimizer.beta1);
  o.get("beta2", t.optimizer.beta2);
  o.get("eps", t.optimizer.eps);
  o.get("weight_decay", t.optimizer.weight_decay);
  o.get("clip_norm", t.optimizer.clip_norm);
  o.get("warmup_steps", t.optimizer.warmup_steps);
  o.get("min_lr_fraction", t.optimizer.min_lr_fraction);
  o.finish();
  auto w = r.child("weights");
  w.get_array("lambda", t.weights.lambda);
  w.get("gamma", t.weights.gamma);
  w.get("eta", t.weights.eta);
  w.finish();
  r.finish();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
    if (!out) throw RuntimeFailure("short write to " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

CorpusOptions corpus_options(const ExperimentConfig& c) {
  CorpusOptions o;
  o.slot_count = c.model.slots;
  o.grid_size = c.model.backbone.grid_size;
  o.dims = {c.model.patch_grid, c.model.patch_dim};
  o.workers = c.workers;
  o.with_targets = false;
  return o;
}

std::uint64_t corpus_seed(std::uint64_t seed, int stage) { return derive_seed(seed, 0xc0de, static_cast<std::uint64_t>(stage)); }

json report_json(const EvalReport& r, const ExperimentConfig& c, int slots) {
  json j = to_json(r, slots);
  j["config_hash"] = config_hash(c);
  j["force"] = {{"mode", std::string(to_string(c.eval.force.mode))}, {"k", c.eval.force.k}};
  j["workers"] = c.workers;
  return j;
}

// Scalar columns of one sweep run, averaged per value across seeds.
const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = {"accuracy",          "avg_decision_tokens", "avg_observation_tokens",
                                                "avg_query_tokens",  "avg_trace_seconds",   "train_seconds"};
  return cols;
}

}  // namespace

std::string_view to_string(SweepParam p) { return p == SweepParam::eta ? "eta" : "slots"; }

// ---- configuration ---------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  const auto s1 = TrainConfig::defaults(1), s2 = TrainConfig::defaults(2);
  c.stage1 = {s1.steps, s1.batch_size, s1.log_every, s1.optimizer, s1.weights};
  c.stage2 = {s2.steps, s2.batch_size, s2.log_every, s2.optimizer, s2.weights};
  return c;
}

TrainConfig ExperimentConfig::train_config(int stage, std::uint64_t run_seed) const {
  const auto& s = stage == 1 ? stage1 : stage2;
  TrainConfig t;
  t.stage = stage;
  t.model = model;
  t.weights = s.weights;
  t.steps = s.steps;
  t.batch_size = s.batch_size;
  t.optimizer = s.optimizer;
  t.seed = run_seed;
  t.log_every = s.log_every;
  return t;
}

EvalOptions ExperimentConfig::eval_options() const {
  EvalOptions o;
  o.limits = eval.limits;
  o.force = eval.force;
  o.seed = eval.suite_seed;
  o.workers = workers;
  o.keep_traces = eval.traces;
  return o;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (data.stage1_samples < 1 || data.stage2_samples < 1) throw ConfigError("corpus sizes must be >= 1");
  data.mix.validate();
  train_config(1, seed).validate();
  train_config(2, seed).validate();
  if (eval.suite_size < 0) throw ConfigError("eval.suite_size must be >= 0");
  if (eval.limits.max_tokens < 1 || eval.limits.max_queries < 0) throw ConfigError("eval limits must be positive");
  if (eval.force.mode == ForceMode::random && (!std::isfinite(eval.force.k) || eval.force.k < 0.0 || eval.force.k > 4.0))
    throw ConfigError("eval.force_k must lie in [0, 4]");
  if (sweep.values.empty()) throw ConfigError("sweep.values must not be empty");
  if (sweep.seeds < 1) throw ConfigError("sweep.seeds must be >= 1");
  for (double v : sweep.values) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("sweep values must be finite and >= 0");
    if (sweep.param == SweepParam::slots && (v < 1.0 || v != std::floor(v))) throw ConfigError("slot sweep values must be integers >= 1");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"model", to_json(c.model)},
          {"data", {{"stage1_samples", c.data.stage1_samples}, {"stage2_samples", c.data.stage2_samples}, {"mix", c.data.mix.weights}}},
          {"stage1", train_section_json(c.stage1)},
          {"stage2", train_section_json(c.stage2)},
          {"eval",
           {{"suite_size", c.eval.suite_size},
            {"suite_seed", c.eval.suite_seed},
            {"max_tokens", c.eval.limits.max_tokens},
            {"max_queries", c.eval.limits.max_queries},
            {"force", std::string(to_string(c.eval.force.mode))},
            {"force_k", c.eval.force.k},
            {"traces", c.eval.traces}}},
          {"sweep", {{"param", std::string(to_string(c.sweep.param))}, {"values", c.sweep.values}, {"seeds", c.sweep.seeds}}}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  auto c = ExperimentConfig::defaults();
  Reader r(j, "config");
  r.get("seed", c.seed);
  r.get("workers", c.workers);

  auto m = r.child("model");
  auto b = m.child("backbone");
  b.get("hidden", c.model.backbone.hidden);
  b.get("layers", c.model.backbone.layers);
  b.get("heads", c.model.backbone.heads);
  b.get("context", c.model.backbone.context);
  b.get("patch", c.model.backbone.patch);
  b.get("grid_size", c.model.backbone.grid_size);
  b.finish();
  m.get("slots", c.model.slots);
  m.get("patch_grid", c.model.patch_grid);
  m.get("patch_dim", c.model.patch_dim);
  m.finish();

  auto d = r.child("data");
  d.get("stage1_samples", c.data.stage1_samples);
  d.get("stage2_samples", c.data.stage2_samples);
  d.get_array("mix", c.data.mix.weights);
  d.finish();

  read_train_section(r.child("stage1"), c.stage1);
  read_train_section(r.child("stage2"), c.stage2);

  auto e = r.child("eval");
  e.get("suite_size", c.eval.suite_size);
  e.get("suite_seed", c.eval.suite_seed);
  e.get("max_tokens", c.eval.limits.max_tokens);
  e.get("max_queries", c.eval.limits.max_queries);
  std::string force(to_string(c.eval.force.mode));
  e.get("force", force);
  c.eval.force.mode = force_from_string(force);
  e.get("force_k", c.eval.force.k);
  e.get("traces", c.eval.traces);
  e.finish();

  auto s = r.child("sweep");
  std::string param(to_string(c.sweep.param));
  s.get("param", param);
  if (param == "eta") c.sweep.param = SweepParam::eta;
  else if (param == "slots") c.sweep.param = SweepParam::slots;
  else throw ConfigError("sweep.param must be eta or slots");
  s.get_vector("values", c.sweep.values);
  s.get("seeds", c.sweep.seeds);
  s.finish();

  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) h = (h ^ ch) * 0x100000001b3ULL;
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string config_hash(const ExperimentConfig& c) { return config_hash(to_json(c)); }

// ---- pipeline --------------------------------------------------------------

std::vector<Stage1Sample> stage1_corpus(const ExperimentConfig& c, std::uint64_t seed) {
  return build_stage1_corpus(c.data.stage1_samples, corpus_seed(seed, 1), corpus_options(c));
}

std::vector<PathCandidateSet> stage2_corpus(const ExperimentConfig& c, std::uint64_t seed) {
  return build_stage2_corpus(c.data.stage2_samples, c.data.mix, corpus_seed(seed, 2), corpus_options(c));
}

TrainResult run_stage1(const ExperimentConfig& c, std::uint64_t seed) {
  return train_stage1(c.train_config(1, seed), stage1_corpus(c, seed));
}

TrainResult run_stage2(const ExperimentConfig& c, std::uint64_t seed, const Model* init, bool skip_stage1) {
  auto t = c.train_config(2, seed);
  t.skip_stage1 = skip_stage1;
  return train_stage2(t, stage2_corpus(c, seed), init);
}

std::vector<TaskSample> eval_suite(const ExperimentConfig& c) {
  return build_test_suite(c.eval.suite_size, c.eval.suite_seed, c.model.backbone.grid_size);
}

// ---- commands --------------------------------------------------------------

json cmd_data(const ExperimentConfig& c, int stage, const std::filesystem::path& out) {
  c.validate();
  if (stage != 1 && stage != 2) throw ConfigError("--stage must be 1 or 2");
  CorpusManifest m;
  m.stage = stage;
  m.seed = c.seed;
  m.mix = c.data.mix;
  m.slot_count = c.model.slots;
  m.config_hash = config_hash(c);
  if (stage == 1) {
    const auto corpus = stage1_corpus(c, c.seed);
    m.count = corpus.size();
    write_corpus(out, corpus, m);
  } else {
    const auto corpus = stage2_corpus(c, c.seed);
    m.count = corpus.size();
    write_corpus(out, corpus, m);
  }
  return to_json(m);
}

json cmd_train(const ExperimentConfig& c, int stage, const std::filesystem::path& out, const std::filesystem::path& corpus_dir,
               const std::filesystem::path& init, bool skip_stage1) {
  c.validate();
  if (stage != 1 && stage != 2) throw ConfigError("--stage must be 1 or 2");
  auto tc = c.train_config(stage, c.seed);
  tc.skip_stage1 = skip_stage1;
  tc.validate();
  if (!corpus_dir.empty()) {
    const auto m = read_manifest(corpus_dir);
    if (m.stage != stage) throw DataSchemaMismatch("corpus in " + corpus_dir.string() + " is a stage-" + std::to_string(m.stage) + " corpus");
    if (m.slot_count != c.model.slots) throw DataSchemaMismatch("corpus slot count differs from the model's N");
  }

  TrainResult result;
  if (stage == 1) {
    result = train_stage1(tc, corpus_dir.empty() ? stage1_corpus(c, c.seed) : read_stage1_corpus(corpus_dir, corpus_options(c)));
  } else {
    std::optional<Checkpoint> ck;
    if (!init.empty()) {
      ck = load_checkpoint(init);
      if (ck->meta.value("stage", 0) != 1) throw DataSchemaMismatch(init.string() + " is not a stage-1 checkpoint");
    }
    result = train_stage2(tc, corpus_dir.empty() ? stage2_corpus(c, c.seed) : read_stage2_corpus(corpus_dir), ck ? &ck->model : nullptr);
  }

  const std::string hash = config_hash(c);
  std::string lines;
  for (auto rec : result.metrics) {
    rec["config_hash"] = hash;
    lines += rec.dump() + "\n";
  }
  write_text(out / "metrics.jsonl", lines);
  save_checkpoint(out / "checkpoint.bin", result.model,
                  {{"stage", stage}, {"config_hash", hash}, {"train_config", to_json(tc)}, {"seed", c.seed}, {"skip_stage1", skip_stage1}});
  json summary = {{"schema_version", kReportSchemaVersion}, {"kind", "train"}, {"config_hash", hash}, {"stage", stage},
                  {"skip_stage1", skip_stage1}, {"summary", result.summary}};
  write_json(out / "summary.json", summary);
  return summary;
}

json cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint, const std::filesystem::path& out) {
  c.validate();
  const auto ck = load_checkpoint(checkpoint);
  auto cfg = c;
  cfg.model = ck.model.config;
  const auto report = evaluate(ck.model, eval_suite(cfg), cfg.eval_options());
  const json j = report_json(report, cfg, ck.model.config.slots);
  write_json(out / "report.json", j);
  if (cfg.eval.traces) write_traces(out / "traces.bin", report.traces, ck.model.config.slots);
  return j;
}

json cmd_sweep(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log) {
  c.validate();
  if (c.sweep.seeds == 1)
    log << "==============================================================\n"
           "WARNING: single-seed sweep; directional comparisons need >= 3\n"
           "==============================================================\n";
  const std::string hash = config_hash(c);
  json runs = json::array();
  for (int s = 0; s < c.sweep.seeds; ++s) {
    const std::uint64_t seed = c.seed + static_cast<std::uint64_t>(s);
    std::optional<TrainResult> shared_stage1;  // eta does not affect stage 1
    for (double v : c.sweep.values) {
      auto cfg = c;
      if (c.sweep.param == SweepParam::slots) cfg.model.slots = static_cast<int>(v);
      else cfg.stage2.weights.eta = v;
      cfg.validate();
      const auto t0 = Clock::now();
      if (c.sweep.param == SweepParam::slots || !shared_stage1) shared_stage1 = run_stage1(cfg, seed);
      const auto s2 = run_stage2(cfg, seed, &shared_stage1->model);
      const double train_seconds = seconds_since(t0);
      const auto report = evaluate(s2.model, eval_suite(cfg), cfg.eval_options());
      json rj = report_json(report, cfg, cfg.model.slots);
      std::ostringstream dir;
      dir << to_string(c.sweep.param) << "=" << v << "/seed" << seed;
      write_json(out / dir.str() / "report.json", rj);
      json run = {{"value", v},
                  {"seed", seed},
                  {"accuracy", report.accuracy},
                  {"avg_decision_tokens", report.avg_decision_tokens},
                  {"avg_observation_tokens", report.avg_observation_tokens},
                  {"avg_query_tokens", report.avg_query_tokens},
                  {"avg_trace_seconds", report.avg_trace_seconds},
                  {"train_seconds", train_seconds},
                  {"selection_frequency", s2.summary.at("selection_frequency")},
                  {"per_task", rj.at("per_task")}};
      log << to_string(c.sweep.param) << "=" << v << " seed " << seed << ": accuracy " << report.accuracy << ", decision tokens "
          << report.avg_decision_tokens << "\n";
      runs.push_back(std::move(run));
    }
  }

  json table = json::array();
  for (double v : c.sweep.values) {
    json row = {{"value", v}, {"runs", 0}};
    for (const auto& col : sweep_columns()) row[col] = 0.0;
    for (const auto& r : runs)
      if (r.at("value").get<double>() == v) {
        row["runs"] = row["runs"].get<int>() + 1;
        for (const auto& col : sweep_columns()) row[col] = row[col].get<double>() + r.at(col).get<double>();
      }
    for (const auto& col : sweep_columns()) row[col] = row[col].get<double>() / row["runs"].get<int>();
    table.push_back(std::move(row));
  }
  json sweep = {{"schema_version", kReportSchemaVersion},
                {"kind", "sweep"},
                {"config_hash", hash},
                {"param", std::string(to_string(c.sweep.param))},
                {"values", c.sweep.values},
                {"seeds", c.sweep.seeds},
                {"runs", runs},
                {"table", table}};
  write_json(out / "sweep.json", sweep);
  write_text(out / "sweep.txt", sweep_table(sweep));
  return sweep;
}

std::string sweep_table(const json& sweep) {
  std::ostringstream os;
  os << std::left << std::setw(8) << sweep.at("param").get<std::string>() << std::right << std::setw(10) << "accuracy" << std::setw(10)
     << "decision" << std::setw(13) << "observation" << std::setw(10) << "query" << std::setw(12) << "trace_ms" << std::setw(11)
     << "train_s" << "\n";
  os << std::fixed;
  for (const auto& row : sweep.at("table")) {
    os << std::left << std::setw(8) << std::setprecision(3) << row.at("value").get<double>() << std::right << std::setprecision(4)
       << std::setw(10) << row.at("accuracy").get<double>() << std::setprecision(3) << std::setw(10)
       << row.at("avg_decision_tokens").get<double>() << std::setw(13) << row.at("avg_observation_tokens").get<double>()
       << std::setw(10) << row.at("avg_query_tokens").get<double>() << std::setw(12)
       << 1000.0 * row.at("avg_trace_seconds").get<double>() << std::setprecision(1) << std::setw(11)
       << row.at("train_seconds").get<double>() << "\n";
  }
  return os.str();
}

void inspect_trace(const std::filesystem::path& path, std::ostream& os, int limit) {
  const auto traces = read_traces(path);
  os << traces.size() << " traces\n";
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (limit >= 0 && static_cast<int>(i) >= limit) break;
    const auto& t = traces[i];
    os << "[" << i << "] answer=\"" << t.answer << "\" decisions=" << t.decision_tokens << " generated=" << t.generated_tokens
       << (t.truncated ? " truncated" : "") << "\n    " << serialize(t.chain) << "\n";
    for (const auto& p : t.predictions)
      os << "    " << to_string(p.expert) << " @" << p.position << " " << p.prediction.rows() << "x" << p.prediction.cols()
         << " mean=" << p.prediction.mean() << "\n";
  }
}

// ---- schema validation -----------------------------------------------------

namespace {

bool type_matches(const json& doc, const std::string& type) {
  if (type == "object") return doc.is_object();
  if (type == "array") return doc.is_array();
  if (type == "string") return doc.is_string();
  if (type == "integer") return doc.is_number_integer();
  if (type == "number") return doc.is_number();
  if (type == "boolean") return doc.is_boolean();
  if (type == "null") return doc.is_null();
  throw ValidationError("schema uses unsupported type " + type);
}

void validate_node(const json& doc, const json& schema, const std::string& path) {
  if (schema.contains("type")) {
    const auto& t = schema.at("type");
    bool ok = false;
    if (t.is_array()) {
      for (const auto& x : t) ok = ok || type_matches(doc, x.get<std::string>());
    } else {
      ok = type_matches(doc, t.get<std::string>());
    }
    if (!ok) throw ValidationError(path + ": expected type " + t.dump());
  }
  if (schema.contains("const") && doc != schema.at("const")) throw ValidationError(path + ": expected " + schema.at("const").dump());
  if (schema.contains("enum")) {
    const auto& e = schema.at("enum");
    if (std::find(e.begin(), e.end(), doc) == e.end()) throw ValidationError(path + ": value not in enum");
  }
  if (doc.is_number()) {
    if (schema.contains("minimum") && doc.get<double>() < schema.at("minimum").get<double>()) throw ValidationError(path + ": below minimum");
    if (schema.contains("maximum") && doc.get<double>() > schema.at("maximum").get<double>()) throw ValidationError(path + ": above maximum");
  }
  if (doc.is_object()) {
    if (schema.contains("required"))
      for (const auto& k : schema.at("required"))
        if (!doc.contains(k.get<std::string>())) throw ValidationError(path + ": missing required key " + k.get<std::string>());
    const json props = schema.value("properties", json::object());
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      const std::string sub = path + "." + it.key();
      if (props.contains(it.key())) {
        validate_node(it.value(), props.at(it.key()), sub);
      } else if (schema.contains("additionalProperties")) {
        const auto& ap = schema.at("additionalProperties");
        if (ap.is_boolean()) {
          if (!ap.get<bool>()) throw ValidationError(sub + ": unexpected key");
        } else {
          validate_node(it.value(), ap, sub);
        }
      }
    }
  }
  if (doc.is_array() && schema.contains("items"))
    for (std::size_t i = 0; i < doc.size(); ++i) validate_node(doc[i], schema.at("items"), path + "[" + std::to_string(i) + "]");
}

}  // namespace

void validate_against_schema(const json& doc, const json& schema) { validate_node(doc, schema, "$"); }

// ---- command line ----------------------------------------------------------

namespace {

int env_workers() {
  const char* v = std::getenv("PERCEPT_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("PERCEPT_WORKERS must be a positive integer");
  return static_cast<int>(n);
}

std::filesystem::path output_root() {
  const char* v = std::getenv("PERCEPT_OUTPUT_ROOT");
  return v && *v ? std::filesystem::path(v) : std::filesystem::path("runs");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale perception-token reasoning: data, train, eval, sweep"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "root seed override");
  app.add_option("--out", out_dir, "output directory (default: $PERCEPT_OUTPUT_ROOT/<verb>-<config hash>)");

  auto* data = app.add_subcommand("data", "build a training corpus");
  int data_stage = 2;
  std::optional<int> n, slots;
  data->add_option("--stage", data_stage, "corpus stage")->check(CLI::IsMember({1, 2}));
  data->add_option("--n", n, "number of samples");
  data->add_option("--slots", slots, "observation slots per query (N)");

  auto* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  int train_stage = 1;
  std::string init, corpus;
  bool skip_stage1 = false;
  std::optional<double> eta;
  std::optional<int> steps;
  train->add_option("--stage", train_stage, "training stage")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--init", init, "stage-1 checkpoint for stage 2")->check(CLI::ExistingFile);
  train->add_flag("--skip-stage1", skip_stage1, "stage 2 from a fresh model (ablation)");
  train->add_option("--eta", eta, "sparsity weight");
  train->add_option("--slots", slots, "observation slots per query (N)");
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--corpus", corpus, "corpus directory written by `data`")->check(CLI::ExistingDirectory);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test suite");
  std::string checkpoint;
  bool force_full = false, traces = false;
  std::optional<double> force_random;
  std::optional<int> suite;
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  auto* ff = eval->add_flag("--force-full", force_full, "inject all four queries before answering");
  eval->add_option("--force-random", force_random, "inject k random queries (expected count)")->excludes(ff);
  eval->add_option("--suite", suite, "number of test tasks");
  eval->add_flag("--traces", traces, "write traces.bin");

  auto* sweep = app.add_subcommand("sweep", "train and evaluate across a parameter");
  std::string param;
  std::vector<double> values;
  std::optional<int> seeds;
  sweep->add_option("--param", param, "eta or slots")->check(CLI::IsMember({"eta", "slots"}));
  sweep->add_option("--values", values, "comma-separated values")->delimiter(',');
  sweep->add_option("--seeds", seeds, "seed ensemble size");

  auto* inspect = app.add_subcommand("inspect-trace", "print a trace file");
  std::string trace_file;
  int limit = -1;
  inspect->add_option("file", trace_file, "traces.bin")->required()->check(CLI::ExistingFile);
  inspect->add_option("--limit", limit, "maximum traces to print");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (inspect->parsed()) {
      inspect_trace(trace_file, out, limit);
      return 0;
    }
    auto c = config_path.empty() ? ExperimentConfig::defaults() : load_experiment_config(config_path);
    c.workers = env_workers();
    if (seed) c.seed = *seed;
    if (slots) c.model.slots = *slots;
    std::string verb;
    if (data->parsed()) {
      verb = "data";
      if (n) (data_stage == 1 ? c.data.stage1_samples : c.data.stage2_samples) = *n;
    } else if (train->parsed()) {
      verb = "train";
      auto& section = train_stage == 1 ? c.stage1 : c.stage2;
      if (eta) section.weights.eta = *eta;
      if (steps) section.steps = *steps;
      if (train_stage == 1 && (!init.empty() || skip_stage1)) throw ConfigError("--init and --skip-stage1 apply to stage 2 only");
    } else if (eval->parsed()) {
      verb = "eval";
      if (suite) c.eval.suite_size = *suite;
      if (force_full) c.eval.force = {ForceMode::full, 0.0};
      if (force_random) c.eval.force = {ForceMode::random, *force_random};
      if (traces) c.eval.traces = true;
    } else {
      verb = "sweep";
      if (!param.empty()) c.sweep.param = param == "eta" ? SweepParam::eta : SweepParam::slots;
      if (sweep->count("--values")) {
        for (const auto& raw : sweep->get_option("--values")->results())
          if (raw.empty()) throw ConfigError("--values must not be empty");
        c.sweep.values = values;
      }
      if (seeds) c.sweep.seeds = *seeds;
    }
    c.validate();
    const std::filesystem::path dir = out_dir.empty() ? output_root() / (verb + "-" + config_hash(c)) : std::filesystem::path(out_dir);

    json result;
    if (verb == "data") result = cmd_data(c, data_stage, dir);
    else if (verb == "train") result = cmd_train(c, train_stage, dir, corpus, init, skip_stage1);
    else if (verb == "eval") result = cmd_eval(c, checkpoint, dir);
    else result = cmd_sweep(c, dir, err);

    if (verb == "sweep") out << sweep_table(result);
    else if (verb == "train") out << json{{"stage", result.at("stage")}, {"final", result.at("summary").value("final", json())}}.dump() << "\n";
    else out << result.dump(2) << "\n";
    out << "wrote " << dir.string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    err << "validation failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace percept
