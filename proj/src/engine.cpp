#include "percept/engine.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include "percept/error.hpp"

namespace percept {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

constexpr char kTraceMagic[8] = {'P', 'R', 'C', 'P', 'T', 'T', 'R', 'C'};
constexpr std::uint32_t kTraceVersion = 1;

struct SampleOutcome {
  ag::Var loss;
  LossBreakdown breakdown;
  std::optional<PathCategory> chosen;
  std::size_t paths = 1;
};

struct StepStats {
  double ce = 0, vis = 0, penalty = 0, combined = 0;
  std::map<ExpertKind, double> vis_terms;
  std::map<ExpertKind, int> vis_counts;
  int samples = 0;

  void add(const LossBreakdown& b) {
    ce += b.ce, vis += b.vis_total, penalty += b.penalty, combined += b.combined, ++samples;
    for (auto [e, v] : b.vis_terms) vis_terms[e] += v, ++vis_counts[e];
  }
};

// Shared mini-batch loop: shuffled epochs, per-sample backward, one AdamW step per batch.
template <typename F>
std::vector<nlohmann::json> run_training(const TrainConfig& config, Model& model, std::size_t corpus_size, F&& sample_fn,
                                         std::map<PathCategory, std::size_t>& selections) {
  AdamW opt(model.backbone_parameters(), model.head_parameters(), config.optimizer);
  Rng rng(derive_seed(config.seed, 0x7a1e, static_cast<std::uint64_t>(config.stage)));
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = corpus_size;
  auto next_index = [&] {
    if (cursor == corpus_size) {
      for (std::size_t i = corpus_size; i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<nlohmann::json> records;
  const auto t0 = Clock::now();
  for (int step = 0; step < config.steps; ++step) {
    opt.zero_grad();
    StepStats stats;
    std::map<PathCategory, std::size_t> step_selections;
    for (int b = 0; b < config.batch_size; ++b) {
      SampleOutcome o = sample_fn(next_index());
      ag::backward(ag::scale(o.loss, 1.0 / config.batch_size));
      stats.add(o.breakdown);
      if (o.chosen) ++step_selections[*o.chosen], ++selections[*o.chosen];
    }
    const double scale = learning_rate_scale(config.optimizer, step, config.steps);
    const double grad_norm = opt.step(scale);
    if (!std::isfinite(grad_norm)) throw RuntimeFailure("non-finite gradient at step " + std::to_string(step));

    if (step % config.log_every == 0 || step == config.steps - 1) {
      const double n = stats.samples;
      nlohmann::json terms = nlohmann::json::object();
      for (auto [e, v] : stats.vis_terms) terms[std::string(to_string(e))] = v / stats.vis_counts[e];
      nlohmann::json rec = {{"stage", config.stage},
                            {"step", step},
                            {"ce", stats.ce / n},
                            {"vis_total", stats.vis / n},
                            {"vis_terms", terms},
                            {"penalty", stats.penalty / n},
                            {"combined", stats.combined / n},
                            {"eta", config.weights.eta},
                            {"lr_scale", scale},
                            {"grad_norm", grad_norm},
                            {"seconds", seconds_since(t0)}};
      if (!step_selections.empty()) {
        nlohmann::json sel = nlohmann::json::object();
        for (auto [c, k] : step_selections) sel[std::string(to_string(c))] = static_cast<double>(k) / n;
        rec["selection"] = sel;
      }
      records.push_back(std::move(rec));
    }
  }
  return records;
}

// One curve per expert present in the corpus; null where a logged step saw no query of it.
nlohmann::json training_summary(const TrainConfig& config, const std::vector<nlohmann::json>& metrics, double seconds,
                                ExpertSet present) {
  nlohmann::json curves = nlohmann::json::object();
  for (auto e : present.members()) {
    const std::string name(to_string(e));
    auto& curve = curves[name] = nlohmann::json::array();
    for (const auto& r : metrics) curve.push_back(r.at("vis_terms").value(name, nlohmann::json()));
  }
  nlohmann::json s = {{"stage", config.stage}, {"steps", config.steps}, {"seconds", seconds}, {"alignment_curves", curves}};
  if (!metrics.empty()) {
    s["final"] = metrics.back();
    s["initial"] = metrics.front();
  }
  return s;
}

bool is_word(const std::string& tok) {
  return tok != kQuestionMarker && !(tok.size() > 2 && tok.front() == '<' && tok.back() == '>');
}

}  // namespace

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  model.validate();
  weights.validate();
  if (stage == 1 && weights.eta != 0.0) throw ConfigError("stage 1 requires eta = 0 (the sparsity penalty is a stage-2 term)");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  const auto& o = optimizer;
  for (double v : {o.lr_backbone, o.lr_heads, o.weight_decay, o.clip_norm, o.min_lr_fraction})
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("optimizer settings must be finite and >= 0");
  if (o.beta1 < 0 || o.beta1 >= 1 || o.beta2 < 0 || o.beta2 >= 1) throw ConfigError("adam betas must lie in [0, 1)");
}

TrainConfig TrainConfig::defaults(int stage) {
  TrainConfig c;
  c.stage = stage;
  c.steps = stage == 1 ? 2000 : 1500;
  c.weights.eta = stage == 1 ? 0.0 : 0.1;
  return c;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"lr_backbone", c.lr_backbone}, {"lr_heads", c.lr_heads},     {"beta1", c.beta1},
          {"beta2", c.beta2},             {"eps", c.eps},               {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},     {"warmup_steps", c.warmup_steps}, {"min_lr_fraction", c.min_lr_fraction}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage", c.stage},
          {"model", to_json(c.model)},
          {"weights",
           {{"lambda", c.weights.lambda}, {"gamma", c.weights.gamma}, {"eta", c.weights.eta}}},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"optimizer", to_json(c.optimizer)},
          {"seed", c.seed},
          {"skip_stage1", c.skip_stage1},
          {"log_every", c.log_every}};
}

// ---- optimizer -------------------------------------------------------------

AdamW::AdamW(std::vector<ag::Var> backbone, std::vector<ag::Var> heads, const OptimizerConfig& config) : config_(config) {
  for (auto* group : {&backbone, &heads})
    for (auto& p : *group) {
      Slot s;
      s.param = p;
      s.m = Mat::Zero(p.rows(), p.cols());
      s.v = Mat::Zero(p.rows(), p.cols());
      s.head = group == &heads;
      slots_.push_back(std::move(s));
    }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

double AdamW::step(double lr_scale) {
  double sq = 0.0;
  for (auto& s : slots_)
    if (s.param.grad().size() != 0) sq += s.param.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const double clip = config_.clip_norm > 0.0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    Mat& w = s.param.mutable_value();
    const double lr = lr_scale * (s.head ? config_.lr_heads : config_.lr_backbone);
    // Decay matrices only; gains, biases and single-row tables are left alone.
    if (w.rows() > 1 && w.cols() > 1) w *= 1.0 - lr * config_.weight_decay;
    if (s.param.grad().size() == 0) continue;
    const Mat g = s.param.grad() * clip;
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * g;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    w.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

double learning_rate_scale(const OptimizerConfig& c, int step, int total_steps) {
  const double warm = c.warmup_steps > 0 ? std::min(1.0, (step + 1.0) / c.warmup_steps) : 1.0;
  const double progress = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return warm * (c.min_lr_fraction + (1.0 - c.min_lr_fraction) * cosine);
}

// ---- losses per sequence ---------------------------------------------------

ExpertFeatureBundle training_targets(const TaskSample& task, const ModelConfig& config) {
  return expert_features(render_scene(task.scene), task.scene, ExpertDims{config.patch_grid, config.patch_dim});
}

PathLoss path_loss(const Model& model, const Image& image, const TrainingSequence& seq, const ExpertFeatureBundle& targets,
                   const LossWeights& weights) {
  const auto ids = model.vocab.encode(seq.tokens);
  const auto out = forward(model, image, ids);
  const std::size_t t = ids.size();
  std::vector<int> next(t, 0);
  std::vector<double> mask(t, 0.0);
  for (std::size_t i = 0; i + 1 < t; ++i) {
    next[i] = ids[i + 1];
    mask[i] = seq.ce_targets.count(static_cast<int>(i + 1)) ? 1.0 : 0.0;
  }
  const ag::Var ce = ag::cross_entropy(out.logits, next, mask);

  std::map<ExpertKind, std::vector<Mat>> preds;
  std::vector<std::pair<ExpertKind, ag::Var>> pred_vars;
  ExpertSet queried;
  for (const auto& [d, slots] : seq.layout.observation_positions) {
    const ExpertKind e = seq.layout.decision_experts.at(d);
    ag::Var p = project(model.head(e), ag::gather_rows(out.hidden, slots));
    preds[e].push_back(p.value());
    pred_vars.emplace_back(e, p);
    queried.insert(e);
  }
  const VisualLoss vis = visual_loss(preds, queried, targets, weights);

  ag::Var total = ce;
  std::map<ExpertKind, std::size_t> seen;
  bool first = true;
  for (const auto& [e, v] : pred_vars) {
    const Mat& g = vis.grads.at(e)[seen[e]++];
    total = ag::add(total, ag::external_loss(v, first ? weights.gamma * vis.total : 0.0, g * weights.gamma));
    first = false;
  }
  const int slot_count = seq.layout.observation_positions.empty() ? model.config.slots
                                                                  : static_cast<int>(seq.layout.observation_positions.begin()->second.size());
  return {make_breakdown(ce.item(), vis, sparsity_penalty(seq.layout, slot_count), weights), total};
}

// ---- training --------------------------------------------------------------

TrainResult train_stage1(const TrainConfig& config, const std::vector<Stage1Sample>& corpus) {
  config.validate();
  if (config.stage != 1) throw ConfigError("train_stage1 needs a stage-1 config");
  if (corpus.empty()) throw DataSchemaMismatch("stage-1 corpus is empty");
  for (const auto& s : corpus)
    if (s.context.slot_count != config.slots())
      throw DataSchemaMismatch("stage-1 corpus slot count " + std::to_string(s.context.slot_count) + " differs from N = " +
                               std::to_string(config.slots()));

  TrainResult result{init_model(config.model, config.seed), {}, {}};
  std::map<PathCategory, std::size_t> unused;
  const auto t0 = Clock::now();
  result.metrics = run_training(config, result.model, corpus.size(), [&](std::size_t i) {
    const auto& s = corpus[i];
    const auto pl = path_loss(result.model, render_scene(s.task.scene), stage1_sequence(s), training_targets(s.task, config.model),
                              config.weights);
    return SampleOutcome{pl.total, pl.breakdown, std::nullopt, 1};
  }, unused);
  ExpertSet present;
  for (const auto& s : corpus)
    for (auto e : s.queried.members()) present.insert(e);
  result.summary = training_summary(config, result.metrics, seconds_since(t0), present);
  return result;
}

TrainResult train_stage2(const TrainConfig& config, const std::vector<PathCandidateSet>& corpus, const Model* init) {
  config.validate();
  if (config.stage != 2) throw ConfigError("train_stage2 needs a stage-2 config");
  if (corpus.empty()) throw DataSchemaMismatch("stage-2 corpus is empty");
  TrainResult result;
  if (init) {
    if (init->config != config.model) throw ConfigError("stage-1 checkpoint model config differs from the stage-2 config");
    result.model = clone_model(*init);
  } else if (config.skip_stage1) {
    std::cerr << "warning: stage 2 without a stage-1 initialization (--skip-stage1)\n";
    result.model = init_model(config.model, config.seed);
  } else {
    throw MissingStage1Init("stage 2 requires a stage-1 checkpoint (or --skip-stage1)");
  }
  for (const auto& s : corpus) {
    if (s.paths.empty()) throw EmptyPathSet("sample " + std::to_string(s.id) + " has no candidate paths");
    for (const auto& p : s.paths)
      if (p.slot_count != config.slots()) throw DataSchemaMismatch("stage-2 corpus slot count differs from N");
  }

  std::map<PathCategory, std::size_t> selections;
  const auto t0 = Clock::now();
  result.metrics = run_training(config, result.model, corpus.size(), [&](std::size_t i) {
    const auto& s = corpus[i];
    const auto image = render_scene(s.task.scene);
    const auto targets = training_targets(s.task, config.model);
    std::vector<PathLoss> losses;
    std::vector<LossBreakdown> breakdowns;
    for (const auto& p : s.paths) {
      losses.push_back(path_loss(result.model, image, stage2_sequence(s.task, p), targets, config.weights));
      breakdowns.push_back(losses.back().breakdown);
    }
    const auto pick = sample_loss(breakdowns);
    return SampleOutcome{losses[pick.chosen].total, breakdowns[pick.chosen],
                         pick.chosen < s.categories.size() ? std::optional(s.categories[pick.chosen]) : std::nullopt, s.paths.size()};
  }, selections);
  ExpertSet present;
  for (const auto& s : corpus)
    for (const auto& p : s.paths)
      for (auto e : experts_of(p).members()) present.insert(e);
  result.summary = training_summary(config, result.metrics, seconds_since(t0), present);
  std::size_t total = 0;
  for (auto [c, n] : selections) total += n;
  nlohmann::json freq = nlohmann::json::object();
  for (auto c : kAllCategories) freq[std::string(to_string(c))] = total ? static_cast<double>(selections[c]) / total : 0.0;
  result.summary["selection_frequency"] = freq;
  return result;
}

// ---- generation ------------------------------------------------------------

GenerationTrace generate(const Model& model, const Image& image, const std::string& question, const GenerationLimits& limits,
                         const ForcePolicy& force, Rng* rng) {
  const auto t0 = Clock::now();
  const auto& vocab = model.vocab;
  const int n_slots = model.config.slots;
  const int think_open = vocab.id(kThinkOpen), think_close = vocab.id(kThinkClose);
  const int answer_open = vocab.id(kAnswerOpen), answer_close = vocab.id(kAnswerClose);
  std::vector<int> words;
  for (int i = 0; i < vocab.size(); ++i)
    if (is_word(vocab.token(i))) words.push_back(i);
  std::map<int, ExpertKind> decisions;
  for (auto e : kAllExperts) decisions[vocab.id(decision_token(e))] = e;

  ExpertSet forced;
  if (force.mode == ForceMode::full) {
    forced = ExpertSet::all();
  } else if (force.mode == ForceMode::random) {
    if (!std::isfinite(force.k) || force.k < 0.0) throw ConfigError("forced query count must be finite and >= 0");
    if (force.k > 4.0) throw QueryBudgetExceeded("cannot force more than four distinct experts");
    if (!rng) throw ConfigError("random forcing needs a random source");
    const double fl = std::floor(force.k);
    const int k = static_cast<int>(fl) + (rng->uniform() < force.k - fl ? 1 : 0);
    auto experts = kAllExperts;
    for (std::size_t i = experts.size(); i > 1; --i) std::swap(experts[i - 1], experts[rng->next() % i]);
    for (int i = 0; i < k; ++i) forced.insert(experts[static_cast<std::size_t>(i)]);
  }
  if (force.mode != ForceMode::none && forced.size() > limits.max_queries)
    throw QueryBudgetExceeded("forced queries exceed the query budget");
  if (force.mode != ForceMode::none && static_cast<int>(forced.size()) * (1 + n_slots) + 2 > limits.max_tokens)
    throw QueryBudgetExceeded("forced queries do not fit in the token budget");

  GenerationTrace trace;
  DecodeSession session(model, image);
  DecodeSession::Step last;
  for (const auto& tok : question_prompt(question)) last = session.feed(vocab.id(tok));

  enum class State { start, think, after_think, answer, done } state = State::start;
  std::vector<std::string> out;
  int queries = 0, answer_words = 0;
  bool injected = false;

  auto feed = [&](int id) {
    last = session.feed(id);
    out.push_back(vocab.token(id));
    ++trace.generated_tokens;
  };
  auto run_span = [&](ExpertKind e) {
    const auto ts = Clock::now();
    const int position = static_cast<int>(out.size());
    feed(vocab.id(decision_token(e)));
    Mat rows(n_slots, model.config.backbone.hidden);
    const int pad = vocab.id(pad_token(e));
    for (int k = 0; k < n_slots; ++k) {
      feed(pad);
      rows.row(k) = last.hidden;
    }
    trace.predictions.push_back({e, position, project(model.head(e), rows)});
    ++queries;
    trace.seconds_simulate += seconds_since(ts);
  };
  auto best_of = [&](const std::vector<int>& allowed) {
    int best = allowed.front();
    for (int id : allowed)
      if (last.logits[id] > last.logits[best]) best = id;
    return best;
  };

  while (state != State::done) {
    const int span_cost = 1 + n_slots;
    if (trace.generated_tokens >= limits.max_tokens) {
      trace.truncated = true;
      break;
    }
    if (force.mode != ForceMode::none && state == State::start) {
      feed(think_open);
      state = State::think;
      continue;
    }
    std::vector<int> allowed;
    switch (state) {
      case State::start:
        allowed = {think_open, answer_open};
        break;
      case State::think: {
        allowed = words;
        allowed.push_back(think_close);
        const bool may_query = queries < limits.max_queries && !injected &&
                               trace.generated_tokens + span_cost < limits.max_tokens;
        if (may_query || (force.mode != ForceMode::none && !injected))
          for (auto [id, e] : decisions) allowed.push_back(id);
        break;
      }
      case State::after_think:
        allowed = {answer_open};
        break;
      case State::answer:
        allowed = words;
        if (answer_words > 0) allowed.push_back(answer_close);
        break;
      case State::done:
        break;
    }
    const int choice = best_of(allowed);
    // Forced spans go in at the first decision point, or once the budget leaves just enough room for them.
    const int forced_cost = static_cast<int>(forced.size()) * span_cost;
    const bool last_chance = trace.generated_tokens + forced_cost + 1 >= limits.max_tokens;
    if (force.mode != ForceMode::none && !injected && state == State::think &&
        (decisions.count(choice) || choice == think_close || last_chance)) {
      for (auto e : forced.members()) run_span(e);
      injected = true;
      continue;
    }
    if (auto it = decisions.find(choice); it != decisions.end()) {
      run_span(it->second);
      continue;
    }
    feed(choice);
    if (choice == think_open) state = State::think;
    else if (choice == think_close) state = State::after_think;
    else if (choice == answer_open) state = State::answer;
    else if (choice == answer_close) state = State::done;
    else if (state == State::answer) ++answer_words;
  }

  // A truncated decode is closed so the trace still parses; its answer may be empty.
  if (state == State::start || state == State::think) {
    if (state == State::think) out.emplace_back(kThinkClose);
    state = State::after_think;
  }
  if (state == State::after_think) out.emplace_back(kAnswerOpen), state = State::answer;
  if (state == State::answer) out.emplace_back(kAnswerClose);

  std::string text;
  for (const auto& tok : out) text += (text.empty() ? "" : " ") + tok;
  trace.chain = parse_chain(text, n_slots);
  trace.answer = trace.chain.answer();
  trace.decision_tokens = static_cast<int>(trace.predictions.size());
  trace.observation_tokens = trace.decision_tokens * n_slots;
  trace.seconds_total = seconds_since(t0);
  trace.seconds_decode = trace.seconds_total - trace.seconds_simulate;
  return trace;
}

// ---- evaluation ------------------------------------------------------------

std::vector<TaskSample> build_test_suite(int n, std::uint64_t seed, int grid_size) {
  if (n < 0) throw ConfigError("suite size must be >= 0");
  std::vector<TaskSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(sample_task(kAllTaskKinds[static_cast<std::size_t>(i % 4)], scene_seed(seed, Split::test, static_cast<std::uint64_t>(i)), grid_size));
  return out;
}

double TaskMetrics::usage_rate(ExpertKind e) const {
  auto it = usage.find(e);
  return samples && it != usage.end() ? static_cast<double>(it->second) / static_cast<double>(samples) : 0.0;
}

EvalReport evaluate(const Model& model, const std::vector<TaskSample>& suite, const EvalOptions& options) {
  const auto t0 = Clock::now();
  const auto calls_before = expert_call_count();
  std::vector<GenerationTrace> traces(suite.size());
  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(suite.size())));
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(options.seed, 0xe7a1, i));
      traces[i] = generate(model, render_scene(suite[i].scene), suite[i].question, options.limits, options.force, &rng);
    }
  };
  if (workers <= 1) {
    run(0, suite.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          run(suite.size() * static_cast<std::size_t>(w) / workers, suite.size() * static_cast<std::size_t>(w + 1) / workers);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport r;
  double decision = 0, observation = 0, generated = 0, trace_seconds = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& tr = traces[i];
    auto& m = r.per_task[suite[i].task_kind];
    ++m.samples;
    const bool ok = tr.answer == suite[i].answer;
    m.correct += ok;
    correct += ok;
    m.decision_tokens += static_cast<std::size_t>(tr.decision_tokens);
    ExpertSet used;
    for (const auto& p : tr.predictions) used.insert(p.expert);
    for (auto e : used.members()) ++m.usage[e];
    decision += tr.decision_tokens;
    observation += tr.observation_tokens;
    generated += tr.generated_tokens;
    trace_seconds += tr.seconds_total;
  }
  r.samples = suite.size();
  if (r.samples > 0) {
    const auto n = static_cast<double>(r.samples);
    r.accuracy = static_cast<double>(correct) / n;
    r.avg_decision_tokens = decision / n;
    r.avg_observation_tokens = observation / n;
    r.avg_query_tokens = (decision + observation) / n;
    r.avg_generated_tokens = generated / n;
    r.avg_trace_seconds = trace_seconds / n;
  }
  r.wall_seconds = seconds_since(t0);
  r.expert_calls = expert_call_count() - calls_before;
  if (options.keep_traces) r.traces = std::move(traces);
  return r;
}

nlohmann::json to_json(const EvalReport& r, int slots) {
  nlohmann::json per_task = nlohmann::json::object();
  for (const auto& [k, m] : r.per_task) {
    nlohmann::json usage = nlohmann::json::object();
    for (auto e : kAllExperts) usage[std::string(to_string(e))] = m.usage_rate(e);
    per_task[std::string(to_string(k))] = {
        {"samples", m.samples},
        {"accuracy", m.accuracy()},
        {"avg_decision_tokens", m.samples ? static_cast<double>(m.decision_tokens) / static_cast<double>(m.samples) : 0.0},
        {"usage", usage}};
  }
  return {{"schema_version", 1},
          {"kind", "eval"},
          {"slots", slots},
          {"samples", r.samples},
          {"accuracy", r.accuracy},
          {"tokens",
           {{"avg_decision_tokens", r.avg_decision_tokens},
            {"avg_observation_tokens", r.avg_observation_tokens},
            {"avg_query_tokens", r.avg_query_tokens},
            {"avg_generated_tokens", r.avg_generated_tokens}}},
          {"per_task", per_task},
          {"timing", {{"avg_trace_seconds", r.avg_trace_seconds}, {"wall_seconds", r.wall_seconds}}},
          {"expert_calls", r.expert_calls}};
}

// ---- trace container -------------------------------------------------------

void write_traces(const std::filesystem::path& path, const std::vector<GenerationTrace>& traces, int slot_count) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write traces to " + path.string());
  const std::uint64_t count = traces.size();
  out.write(kTraceMagic, sizeof kTraceMagic);
  out.write(reinterpret_cast<const char*>(&kTraceVersion), sizeof kTraceVersion);
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& t : traces) {
    auto spans = nlohmann::json::array();
    for (const auto& p : t.predictions)
      spans.push_back({{"expert", std::string(to_string(p.expert))}, {"position", p.position}, {"rows", p.prediction.rows()}, {"cols", p.prediction.cols()}});
    const std::string header = nlohmann::json{{"chain", serialize(t.chain)},
                                              {"slot_count", slot_count},
                                              {"answer", t.answer},
                                              {"generated_tokens", t.generated_tokens},
                                              {"truncated", t.truncated},
                                              {"seconds", {t.seconds_decode, t.seconds_simulate, t.seconds_total}},
                                              {"spans", spans}}
                                   .dump();
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(len));
    for (const auto& p : t.predictions)
      out.write(reinterpret_cast<const char*>(p.prediction.data()), static_cast<std::streamsize>(p.prediction.size() * sizeof(double)));
  }
  if (!out) throw RuntimeFailure("short write to " + path.string());
}

std::vector<GenerationTrace> read_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataSchemaMismatch("cannot open trace file " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTraceMagic, sizeof magic) != 0) throw DataSchemaMismatch(path.string() + " is not a trace file");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kTraceVersion) throw SchemaVersionMismatch("trace file version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::vector<GenerationTrace> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1ULL << 28)) throw DataSchemaMismatch("corrupt trace header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    try {
      const auto h = nlohmann::json::parse(text);
      GenerationTrace t;
      const int slots = h.at("slot_count").get<int>();
      t.chain = parse_chain(h.at("chain").get<std::string>(), slots);
      t.answer = h.at("answer").get<std::string>();
      t.generated_tokens = h.at("generated_tokens").get<int>();
      t.truncated = h.at("truncated").get<bool>();
      const auto secs = h.at("seconds").get<std::vector<double>>();
      t.seconds_decode = secs.at(0), t.seconds_simulate = secs.at(1), t.seconds_total = secs.at(2);
      for (const auto& s : h.at("spans")) {
        SpanPrediction p;
        const auto e = expert_from_string(s.at("expert").get<std::string>());
        if (!e) throw DataSchemaMismatch("unknown expert in trace");
        p.expert = *e;
        p.position = s.at("position").get<int>();
        p.prediction.resize(s.at("rows").get<Eigen::Index>(), s.at("cols").get<Eigen::Index>());
        in.read(reinterpret_cast<char*>(p.prediction.data()), static_cast<std::streamsize>(p.prediction.size() * sizeof(double)));
        t.predictions.push_back(std::move(p));
      }
      t.decision_tokens = static_cast<int>(t.predictions.size());
      t.observation_tokens = t.decision_tokens * slots;
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw DataSchemaMismatch(std::string("trace header: ") + e.what());
    }
    if (!in) throw DataSchemaMismatch("trace file truncated");
  }
  return out;
}

}  // namespace percept
