#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "percept/engine.hpp"
#include "percept/error.hpp"

using namespace percept;

namespace {

ModelConfig tiny(int slots = 4) {
  ModelConfig c;
  c.backbone = {.hidden = 16, .layers = 1, .heads = 2, .context = 96};
  c.slots = slots;
  return c;
}

TrainConfig small_config(int stage, int steps) {
  auto c = TrainConfig::defaults(stage);
  c.model = tiny();
  c.steps = steps;
  c.batch_size = 2;
  c.log_every = 1;
  c.seed = 7;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("percept_engine_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("stage gating and config errors") {
  auto c = small_config(1, 1);
  c.weights.eta = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(TrainConfig::defaults(1).weights.eta == 0.0);
  CHECK(TrainConfig::defaults(2).weights.eta == doctest::Approx(0.1));
  CHECK(TrainConfig::defaults(1).steps == 2000);
  CHECK(TrainConfig::defaults(2).steps == 1500);

  const auto corpus1 = build_stage1_corpus(4, 1);
  CHECK_THROWS_AS(train_stage1(c, corpus1), ConfigError);
  CHECK_THROWS_AS(train_stage1(small_config(1, 1), {}), DataSchemaMismatch);
  CHECK_THROWS_AS(train_stage1(small_config(2, 1), corpus1), ConfigError);

  CorpusOptions two;
  two.slot_count = 2;
  CHECK_THROWS_AS(train_stage1(small_config(1, 1), build_stage1_corpus(2, 1, two)), DataSchemaMismatch);
}

TEST_CASE("stage 1 metrics") {
  const auto corpus = build_stage1_corpus(16, 3);
  const auto r = train_stage1(small_config(1, 3), corpus);
  REQUIRE(r.metrics.size() == 3);
  for (const auto& m : r.metrics) {
    CHECK(m.at("eta").get<double>() == 0.0);
    CHECK(m.at("penalty").get<double>() >= 0.0);
    CHECK(std::isfinite(m.at("combined").get<double>()));
  }
  std::set<std::string> present;
  for (const auto& s : corpus)
    for (auto e : s.queried.members()) present.insert(std::string(to_string(e)));
  std::set<std::string> curves;
  for (auto it = r.summary.at("alignment_curves").begin(); it != r.summary.at("alignment_curves").end(); ++it)
  {
    curves.insert(it.key());
    CHECK(it.value().size() == r.metrics.size());
  }
  CHECK(curves == present);
}

TEST_CASE("stage 1 trains the pad embeddings") {
  const auto corpus = build_stage1_corpus(4, 5);
  auto model = init_model(tiny(), 7);
  const auto& s = corpus.front();
  const auto pl = path_loss(model, render_scene(s.task.scene), stage1_sequence(s), training_targets(s.task, model.config), {});
  model.token_embedding.zero_grad();
  ag::backward(pl.total);
  for (auto e : s.queried.members())
    CHECK(model.token_embedding.grad().row(model.vocab.id(pad_token(e))).norm() > 0.0);
}

TEST_CASE("stage 1 determinism") {
  const auto corpus = build_stage1_corpus(8, 3);
  const auto a = train_stage1(small_config(1, 2), corpus);
  const auto b = train_stage1(small_config(1, 2), corpus);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    auto x = a.metrics[i], y = b.metrics[i];
    x.erase("seconds"), y.erase("seconds");
    CHECK(x == y);
  }
  CHECK(a.model.lm_head.value() == b.model.lm_head.value());
}

TEST_CASE("single-batch alignment overfit") {
  auto c = small_config(1, 300);
  c.model.backbone.hidden = 32;
  c.batch_size = 1;
  c.log_every = 300;
  c.optimizer.lr_backbone = c.optimizer.lr_heads = 1e-2;
  auto corpus = build_stage1_corpus(1, 11);
  const auto r = train_stage1(c, corpus);
  const double first = r.metrics.front().at("vis_total").get<double>();
  const double last = r.metrics.back().at("vis_total").get<double>();
  CHECK(first > 0.0);
  CHECK(last < 0.1 * first);
}

TEST_CASE("stage 2 initialization rules") {
  const auto corpus = build_stage2_corpus(4, CategoryMix{}, 2);
  CHECK_THROWS_AS(train_stage2(small_config(2, 1), corpus, nullptr), MissingStage1Init);
  auto c = small_config(2, 1);
  c.skip_stage1 = true;
  CHECK_NOTHROW(train_stage2(c, corpus, nullptr));
  auto other = init_model(tiny(2), 1);
  CHECK_THROWS_AS(train_stage2(small_config(2, 1), corpus, &other), ConfigError);
  const auto base = init_model(tiny(), 1);
  CHECK_THROWS_AS(train_stage2(small_config(2, 1), {}, &base), DataSchemaMismatch);
}

TEST_CASE("stage 2 selection frequencies") {
  const auto corpus = build_stage2_corpus(12, CategoryMix{}, 4);
  const auto init = init_model(tiny(), 7);
  const auto r = train_stage2(small_config(2, 4), corpus, &init);
  double total = 0.0;
  for (auto c : kAllCategories) total += r.summary.at("selection_frequency").at(std::string(to_string(c))).get<double>();
  CHECK(total == doctest::Approx(1.0));
  for (const auto& m : r.metrics) {
    CHECK(m.at("eta").get<double>() == doctest::Approx(0.1));
    double step_total = 0.0;
    for (auto it = m.at("selection").begin(); it != m.at("selection").end(); ++it) step_total += it.value().get<double>();
    CHECK(step_total == doctest::Approx(1.0));
  }
}

TEST_CASE("argmin path is the only gradient source") {
  const auto full = build_stage2_corpus(1, CategoryMix{}, 9);
  const auto init = init_model(tiny(), 3);
  auto c = small_config(2, 1);
  c.batch_size = 1;
  const auto a = train_stage2(c, full, &init);

  std::size_t chosen = 0;
  for (std::size_t i = 0; i < full[0].categories.size(); ++i)
    if (a.summary.at("selection_frequency").at(std::string(to_string(full[0].categories[i]))).get<double>() == 1.0) chosen = i;
  auto single = full;
  single[0].paths = {full[0].paths[chosen]};
  single[0].categories = {full[0].categories[chosen]};
  const auto b = train_stage2(c, single, &init);

  const auto pa = a.model.named_parameters();
  const auto pb = b.model.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second.value() == pb[i].second.value());
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig o;
  o.warmup_steps = 10;
  o.min_lr_fraction = 0.1;
  CHECK(learning_rate_scale(o, 0, 100) == doctest::Approx(0.1 * (0.1 + 0.9 * 1.0)).epsilon(1e-3));
  CHECK(learning_rate_scale(o, 99, 100) == doctest::Approx(0.1));
  double prev = 2.0;
  for (int s = 10; s < 100; ++s) {
    const double v = learning_rate_scale(o, s, 100);
    CHECK(v <= prev);
    prev = v;
  }
}

TEST_CASE("adamw minimizes a quadratic and decays matrices only") {
  auto w = ag::parameter(Mat::Constant(2, 2, 3.0));
  auto b = ag::parameter(Mat::Constant(1, 2, 3.0));
  OptimizerConfig o;
  o.weight_decay = 0.0;
  AdamW opt({w, b}, {}, o);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    ag::backward(ag::add(ag::sum(ag::mul(w, w)), ag::sum(ag::mul(b, b))));
    opt.step(50.0);
  }
  CHECK(w.value().cwiseAbs().maxCoeff() < 0.05);
  CHECK(b.value().cwiseAbs().maxCoeff() < 0.05);

  auto m = ag::parameter(Mat::Constant(2, 2, 1.0));
  auto r = ag::parameter(Mat::Constant(1, 2, 1.0));
  o.weight_decay = 0.5;
  AdamW decay({m, r}, {}, o);
  decay.zero_grad();
  decay.step(1.0);
  CHECK(m.value()(0, 0) == doctest::Approx(1.0 - o.lr_backbone * 0.5));
  CHECK(r.value()(0, 0) == 1.0);
}

TEST_CASE("generation places N slots after each decision token") {
  const auto model = init_model(tiny(), 5);
  const auto task = sample_task(TaskKind::count, 3);
  const auto trace = generate(model, render_scene(task.scene), task.question, {}, {ForceMode::full});
  REQUIRE(trace.predictions.size() == 4);
  CHECK(trace.decision_tokens == 4);
  CHECK(trace.observation_tokens == 16);
  const auto tokens = chain_tokens(trace.chain);
  for (const auto& p : trace.predictions) {
    CHECK(tokens[static_cast<std::size_t>(p.position)] == decision_token(p.expert));
    for (int k = 1; k <= 4; ++k) CHECK(tokens[static_cast<std::size_t>(p.position + k)] == pad_token(p.expert));
    CHECK(p.prediction.rows() == model.head(p.expert).output_rows());
    CHECK(p.prediction.cols() == model.head(p.expert).output_cols());
  }
  CHECK(experts_of(trace.chain) == ExpertSet::all());
}

TEST_CASE("zero queries means zero projections") {
  const auto model = init_model(tiny(), 5);
  const auto task = sample_task(TaskKind::depth_order, 4);
  GenerationLimits limits;
  limits.max_queries = 0;
  const auto trace = generate(model, render_scene(task.scene), task.question, limits);
  CHECK(trace.decision_tokens == 0);
  CHECK(trace.predictions.empty());
  CHECK(trace.generated_tokens <= limits.max_tokens);
}

TEST_CASE("truncated decoding still yields a parsable chain") {
  const auto model = init_model(tiny(), 5);
  const auto task = sample_task(TaskKind::count, 8);
  GenerationLimits limits;
  limits.max_tokens = 3;
  const auto trace = generate(model, render_scene(task.scene), task.question, limits);
  CHECK(trace.generated_tokens <= 3);
  CHECK_NOTHROW(check_well_formed(trace.chain));
}

TEST_CASE("forced random matches its budget in expectation") {
  const auto model = init_model(tiny(), 5);
  const auto task = sample_task(TaskKind::count, 3);
  const auto image = render_scene(task.scene);
  for (double k : {1.0, 1.7, 2.5}) {
    double total = 0.0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
      Rng rng(static_cast<std::uint64_t>(i) + 1);
      total += generate(model, image, task.question, {}, {ForceMode::random, k}, &rng).decision_tokens;
    }
    CHECK(total / n == doctest::Approx(k).epsilon(0.05));
  }
  Rng rng(1);
  CHECK_THROWS_AS(generate(model, image, task.question, {}, {ForceMode::random, 5.0}, &rng), QueryBudgetExceeded);
  CHECK_THROWS_AS(generate(model, image, task.question, {}, {ForceMode::random, 1.0}, nullptr), ConfigError);
}

TEST_CASE("evaluation") {
  const auto model = init_model(tiny(), 5);
  const auto empty = evaluate(model, {}, {});
  CHECK(empty.samples == 0);
  CHECK(empty.accuracy == 0.0);
  CHECK(to_json(empty, 4).at("samples") == 0);

  const auto suite = build_test_suite(12, 2);
  EvalOptions full;
  full.force.mode = ForceMode::full;
  const auto r = evaluate(model, suite, full);
  CHECK(r.expert_calls == 0);
  CHECK(r.samples == 12);
  CHECK(r.avg_observation_tokens == 16.0);
  CHECK(r.avg_query_tokens == 20.0);
  for (const auto& [k, m] : r.per_task)
    for (auto e : kAllExperts) CHECK(m.usage_rate(e) == 1.0);

  EvalOptions parallel = full;
  parallel.workers = 3;
  parallel.keep_traces = true;
  const auto p = evaluate(model, suite, parallel);
  CHECK(p.accuracy == r.accuracy);
  CHECK(p.avg_generated_tokens == r.avg_generated_tokens);
  CHECK(p.traces.size() == 12);
  CHECK(p.expert_calls == 0);
}

TEST_CASE("test suite cycles task kinds and avoids training scenes") {
  const auto suite = build_test_suite(8, 1);
  for (std::size_t i = 0; i < suite.size(); ++i) CHECK(suite[i].task_kind == kAllTaskKinds[i % 4]);
  CHECK_THROWS_AS(build_test_suite(-1, 1), ConfigError);
}

TEST_CASE("trace container round trip") {
  const auto model = init_model(tiny(), 5);
  const auto suite = build_test_suite(4, 3);
  EvalOptions o;
  o.force.mode = ForceMode::full;
  o.keep_traces = true;
  const auto r = evaluate(model, suite, o);
  const auto dir = temp_dir("traces");
  write_traces(dir / "t.bin", r.traces, 4);
  const auto back = read_traces(dir / "t.bin");
  REQUIRE(back.size() == r.traces.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(serialize(back[i].chain) == serialize(r.traces[i].chain));
    CHECK(back[i].answer == r.traces[i].answer);
    REQUIRE(back[i].predictions.size() == r.traces[i].predictions.size());
    for (std::size_t j = 0; j < back[i].predictions.size(); ++j)
      CHECK(back[i].predictions[j].prediction == r.traces[i].predictions[j].prediction);
  }
  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "garbage";
  }
  CHECK_THROWS_AS(read_traces(dir / "bad.bin"), DataSchemaMismatch);
  std::filesystem::remove_all(dir);
}
