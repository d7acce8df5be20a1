#include "percept/curriculum.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "percept/error.hpp"
#include "percept/rng.hpp"

namespace percept {
namespace {

constexpr std::uint64_t kStage1Stream = 0x51a9e1;
constexpr std::uint64_t kStage2Stream = 0x51a9e2;

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Fills out[i] = make(i) for every index, sharding contiguous ranges over threads.
template <typename T, typename F>
std::vector<T> generate_indexed(int n, int workers, F make) {
  std::vector<T> out(static_cast<std::size_t>(n));
  const int w = std::max(1, std::min(workers, n));
  if (w == 1) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = make(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  for (int t = 0; t < w; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = t * n / w; i < (t + 1) * n / w; ++i) out[static_cast<std::size_t>(i)] = make(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

ExpertFeatureBundle restrict_bundle(ExpertFeatureBundle b, ExpertSet keep) {
  if (!keep.contains(ExpertKind::seg)) b.seg.clear();
  if (!keep.contains(ExpertKind::depth)) b.depth = Vec();
  if (!keep.contains(ExpertKind::edge)) b.edge = Vec();
  if (!keep.contains(ExpertKind::patch)) b.patch = Mat();
  return b;
}

Stage1Sample make_stage1(std::uint64_t id, std::uint64_t seed, const CorpusOptions& options) {
  Rng rng(derive_seed(seed, kStage1Stream, id));
  Stage1Sample s;
  s.id = id;
  s.split = options.split;
  const auto kind = kAllTaskKinds[static_cast<std::size_t>(rng.uniform_int(0, 3))];
  s.task = sample_task(kind, scene_seed(seed, options.split, id), options.grid_size);
  s.queried = ExpertSet::from_bits(static_cast<std::uint8_t>(rng.uniform_int(1, 15)));
  ChainBuilder b(options.slot_count);
  for (auto e : s.queried.members()) b.context_query(e);
  s.context = b.answer(s.task.answer).build();
  if (options.with_targets)
    s.targets = restrict_bundle(expert_features(render_scene(s.task.scene), s.task.scene, options.dims), s.queried);
  return s;
}

PathCandidateSet make_stage2(std::uint64_t id, const CategoryMix& mix, std::uint64_t seed, const CorpusOptions& options) {
  Rng rng(derive_seed(seed, kStage2Stream, id));
  PathCandidateSet s;
  s.id = id;
  s.split = options.split;
  const auto kind = kAllTaskKinds[static_cast<std::size_t>(rng.uniform_int(0, 3))];
  s.task = sample_task(kind, scene_seed(seed, options.split, id), options.grid_size);

  const double u = rng.uniform();
  auto primary = PathCategory::minimal;
  if (u < mix.weights[0])
    primary = PathCategory::full;
  else if (u < mix.weights[0] + mix.weights[1])
    primary = PathCategory::task_specific;

  const std::uint64_t extra_seed = rng.next();
  s.categories.push_back(primary);
  for (auto c : kAllCategories)
    if (c != primary) s.categories.push_back(c);
  for (auto c : s.categories) {
    auto path = stage2_path(s.task, category_experts(s.task, c, extra_seed), options.slot_count);
    if (!validate_chain(path, category_rule(s.task, c)).valid)
      throw ValidationError("generated path violates its category rule: " + serialize(path));
    s.paths.push_back(std::move(path));
  }
  return s;
}

void check_schema(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw DataSchemaMismatch(std::string(what) + " record must be an object");
}

void write_lines(const std::filesystem::path& dir, const std::vector<nlohmann::json>& records, const CorpusManifest& manifest) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "corpus.jsonl", std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write " + (dir / "corpus.jsonl").string());
    for (const auto& r : records) out << r.dump() << '\n';
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + (dir / "manifest.json").string());
  out << to_json(manifest).dump(2) << '\n';
}

std::vector<nlohmann::json> read_lines(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.jsonl", std::ios::binary);
  if (!in) throw DataSchemaMismatch("missing corpus file in " + dir.string());
  std::vector<nlohmann::json> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataSchemaMismatch("corpus line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(PathCategory c) {
  switch (c) {
    case PathCategory::full:
      return "full";
    case PathCategory::task_specific:
      return "task_specific";
    case PathCategory::minimal:
      return "minimal";
  }
  return "?";
}

PathCategory category_from_string(std::string_view s) {
  for (auto c : kAllCategories)
    if (to_string(c) == s) return c;
  throw DataSchemaMismatch("unknown path category '" + std::string(s) + "'");
}

void CategoryMix::validate() const {
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("category mix weights must be finite and >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("category mix must sum to 1");
}

ThinkTemplate think_template(const TaskSample& task) {
  switch (task.task_kind) {
    case TaskKind::depth_order: {
      const auto w = split_words(task.question);
      return {"compare " + w.at(4) + " and " + w.at(6), task.answer + " is closer"};
    }
    case TaskKind::count:
      return {"count the objects", "there are " + task.answer};
    case TaskKind::contour_class:
      return {"inspect the outline", "it is a " + task.answer};
    case TaskKind::texture_match:
      return {"compare the two textures", task.answer == "yes" ? "they match" : "they differ"};
  }
  throw UnsupportedTask("unknown task kind");
}

const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words = {"compare", "and", "count", "inspect", "outline", "it",
                                                 "textures", "they", "match", "differ"};
  return words;
}

ExpertSet category_experts(const TaskSample& task, PathCategory category, std::uint64_t seed) {
  switch (category) {
    case PathCategory::full:
      return ExpertSet::all();
    case PathCategory::minimal:
      return task.rule.required;
    case PathCategory::task_specific: {
      const auto extras = task.rule.allowed_extras.members();
      if (extras.empty()) return task.rule.required;
      Rng rng(seed);
      ExpertSet out = task.rule.required;
      out.insert(extras[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(extras.size()) - 1))]);
      return out;
    }
  }
  throw UnsupportedTask("unknown path category");
}

TaskConstraintRule category_rule(const TaskSample& task, PathCategory category) {
  TaskConstraintRule rule = task.rule;
  if (category == PathCategory::full) rule.allowed_extras = ExpertSet::all() - rule.required;
  return rule;
}

ReasoningChain stage2_path(const TaskSample& task, ExpertSet experts, int slot_count) {
  const auto t = think_template(task);
  ChainBuilder b(slot_count);
  b.open_think().think(t.preamble);
  for (auto e : experts.members()) b.query(e);
  return b.think(t.conclusion).close_think().answer(task.answer).build();
}

std::vector<Stage1Sample> build_stage1_corpus(int n, std::uint64_t seed, const CorpusOptions& options) {
  if (n < 1) throw ConfigError("corpus size must be >= 1");
  return generate_indexed<Stage1Sample>(n, options.workers,
                                        [&](int i) { return make_stage1(static_cast<std::uint64_t>(i), seed, options); });
}

std::vector<PathCandidateSet> build_stage2_corpus(int n, const CategoryMix& mix, std::uint64_t seed, const CorpusOptions& options) {
  if (n < 1) throw ConfigError("corpus size must be >= 1");
  mix.validate();
  return generate_indexed<PathCandidateSet>(
      n, options.workers, [&](int i) { return make_stage2(static_cast<std::uint64_t>(i), mix, seed, options); });
}

CorpusStats corpus_stats(const std::vector<PathCandidateSet>& corpus) {
  CorpusStats st;
  for (auto c : kAllCategories) st.categories[c] = 0;
  for (auto e : kAllExperts) st.expert_usage[e] = 0;
  std::size_t decisions = 0;
  for (const auto& s : corpus) {
    if (s.paths.empty()) continue;
    ++st.samples;
    if (!s.categories.empty()) ++st.categories[s.categories.front()];
    for (auto e : experts_of(s.paths.front()).members()) ++st.expert_usage[e];
    decisions += s.paths.front().spans().size();
  }
  if (st.samples > 0) st.avg_decision_tokens = static_cast<double>(decisions) / static_cast<double>(st.samples);
  return st;
}

std::vector<std::string> question_prompt(const std::string& question) {
  std::vector<std::string> out = {std::string(kQuestionMarker)};
  for (auto& w : split_words(question)) out.push_back(std::move(w));
  return out;
}

TrainingSequence stage1_sequence(const Stage1Sample& sample) {
  const auto chain_toks = chain_tokens(sample.context);
  const auto chain_layout = layout(sample.context, chain_toks);
  const auto question = question_prompt(sample.task.question);
  const int split = static_cast<int>(sample.queried.size()) * (1 + sample.context.slot_count);
  const int gap = static_cast<int>(question.size());

  TrainingSequence seq;
  seq.tokens.assign(chain_toks.begin(), chain_toks.begin() + split);
  seq.tokens.insert(seq.tokens.end(), question.begin(), question.end());
  seq.tokens.insert(seq.tokens.end(), chain_toks.begin() + split, chain_toks.end());

  // Context spans keep their positions; the answer moves past the question.
  SequenceLayout l;
  for (const auto& [p, slots] : chain_layout.observation_positions) {
    l.decision_positions.insert(p);
    l.decision_experts[p] = chain_layout.decision_experts.at(p);
    l.observation_positions[p] = slots;
  }
  for (int i = split; i < split + gap; ++i) l.text_positions.insert(i);
  for (int p : chain_layout.answer_positions) l.answer_positions.insert(p + gap);
  seq.layout = std::move(l);
  for (int i = split; i < static_cast<int>(seq.tokens.size()); ++i)
    if (i > 0) seq.ce_targets.insert(i);
  return seq;
}

TrainingSequence stage2_sequence(const TaskSample& task, const ReasoningChain& path) {
  const auto chain_toks = chain_tokens(path);
  TrainingSequence seq;
  seq.tokens = question_prompt(task.question);
  const int gap = static_cast<int>(seq.tokens.size());
  seq.tokens.insert(seq.tokens.end(), chain_toks.begin(), chain_toks.end());
  seq.layout = layout(path, chain_toks).shifted(gap);
  for (int i = 0; i < gap; ++i) seq.layout.text_positions.insert(i);

  std::set<int> observation;
  for (const auto& [p, slots] : seq.layout.observation_positions) observation.insert(slots.begin(), slots.end());
  for (int i = gap; i < static_cast<int>(seq.tokens.size()); ++i)
    if (!observation.count(i)) seq.ce_targets.insert(i);
  return seq;
}

nlohmann::json to_json(const Stage1Sample& s) {
  return {{"id", s.id}, {"split", std::string(to_string(s.split))}, {"task", to_json(s.task)}, {"context", serialize(s.context)}};
}

nlohmann::json to_json(const PathCandidateSet& s) {
  auto paths = nlohmann::json::array();
  auto cats = nlohmann::json::array();
  for (const auto& p : s.paths) paths.push_back(serialize(p));
  for (auto c : s.categories) cats.push_back(std::string(to_string(c)));
  return {{"id", s.id}, {"split", std::string(to_string(s.split))}, {"task", to_json(s.task)}, {"paths", paths}, {"categories", cats}};
}

namespace {

Split split_from_json(const nlohmann::json& j) {
  const auto s = j.get<std::string>();
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataSchemaMismatch("unknown split '" + s + "'");
}

template <typename F>
auto guarded(const char* what, F f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string(what) + ": " + e.what());
  }
}

}  // namespace

Stage1Sample stage1_from_json(const nlohmann::json& j, const CorpusOptions& options) {
  check_schema(j, "stage-1");
  return guarded("stage-1 record", [&] {
    Stage1Sample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.split = split_from_json(j.at("split"));
    s.task = task_from_json(j.at("task"));
    s.context = parse_chain(j.at("context").get<std::string>(), options.slot_count);
    s.queried = experts_of(s.context);
    if (options.with_targets)
      s.targets = restrict_bundle(expert_features(render_scene(s.task.scene), s.task.scene, options.dims), s.queried);
    return s;
  });
}

PathCandidateSet stage2_from_json(const nlohmann::json& j, int slot_count) {
  check_schema(j, "stage-2");
  return guarded("stage-2 record", [&] {
    PathCandidateSet s;
    s.id = j.at("id").get<std::uint64_t>();
    s.split = split_from_json(j.at("split"));
    s.task = task_from_json(j.at("task"));
    for (const auto& p : j.at("paths")) s.paths.push_back(parse_chain(p.get<std::string>(), slot_count));
    for (const auto& c : j.at("categories")) s.categories.push_back(category_from_string(c.get<std::string>()));
    if (s.paths.size() != s.categories.size()) throw DataSchemaMismatch("paths and categories differ in length");
    return s;
  });
}

nlohmann::json to_json(const CorpusManifest& m) {
  return {{"schema_version", m.schema_version},
          {"stage", m.stage},
          {"seed", m.seed},
          {"mix", {{"full", m.mix.weights[0]}, {"task_specific", m.mix.weights[1]}, {"minimal", m.mix.weights[2]}}},
          {"slot_count", m.slot_count},
          {"split", std::string(to_string(m.split))},
          {"count", m.count},
          {"config_hash", m.config_hash}};
}

CorpusManifest manifest_from_json(const nlohmann::json& j) {
  check_schema(j, "manifest");
  return guarded("manifest", [&] {
    CorpusManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kCorpusSchemaVersion)
      throw SchemaVersionMismatch("corpus schema version " + std::to_string(m.schema_version) + ", expected " +
                                  std::to_string(kCorpusSchemaVersion));
    m.stage = j.at("stage").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& mix = j.at("mix");
    m.mix.weights = {mix.at("full").get<double>(), mix.at("task_specific").get<double>(), mix.at("minimal").get<double>()};
    m.slot_count = j.at("slot_count").get<int>();
    m.split = split_from_json(j.at("split"));
    m.count = j.at("count").get<std::size_t>();
    m.config_hash = j.value("config_hash", "");
    return m;
  });
}

void write_corpus(const std::filesystem::path& dir, const std::vector<Stage1Sample>& corpus, const CorpusManifest& manifest) {
  std::vector<nlohmann::json> records;
  for (const auto& s : corpus) records.push_back(to_json(s));
  write_lines(dir, records, manifest);
}

void write_corpus(const std::filesystem::path& dir, const std::vector<PathCandidateSet>& corpus, const CorpusManifest& manifest) {
  std::vector<nlohmann::json> records;
  for (const auto& s : corpus) records.push_back(to_json(s));
  write_lines(dir, records, manifest);
}

CorpusManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw DataSchemaMismatch("missing manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataSchemaMismatch(std::string("manifest: ") + e.what());
  }
  return manifest_from_json(j);
}

std::vector<Stage1Sample> read_stage1_corpus(const std::filesystem::path& dir, const CorpusOptions& options) {
  const auto manifest = read_manifest(dir);
  if (manifest.stage != 1) throw DataSchemaMismatch("corpus in " + dir.string() + " is not a stage-1 corpus");
  CorpusOptions opts = options;
  opts.slot_count = manifest.slot_count;
  std::vector<Stage1Sample> out;
  for (const auto& j : read_lines(dir)) out.push_back(stage1_from_json(j, opts));
  return out;
}

std::vector<PathCandidateSet> read_stage2_corpus(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  if (manifest.stage != 2) throw DataSchemaMismatch("corpus in " + dir.string() + " is not a stage-2 corpus");
  std::vector<PathCandidateSet> out;
  for (const auto& j : read_lines(dir)) out.push_back(stage2_from_json(j, manifest.slot_count));
  return out;
}

}  // namespace percept
