#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "percept/curriculum.hpp"
#include "percept/error.hpp"
#include "percept/model.hpp"

using namespace percept;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.backbone = {.hidden = 16, .layers = 2, .heads = 2, .context = 64};
  return c;
}

std::vector<int> sample_ids(const Model& m, std::uint64_t seed) {
  const auto task = sample_task(TaskKind::depth_order, seed);
  const auto path = stage2_path(task, ExpertSet::all(), m.config.slots);
  return m.vocab.encode(stage2_sequence(task, path).tokens);
}

}  // namespace

TEST_CASE("vocabulary") {
  const auto v = Vocab::standard();
  std::set<int> ids;
  for (const auto& t : special_tokens()) ids.insert(v.id(t));
  CHECK(ids.size() == 12);
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
  for (const auto& w : world_words()) CHECK(v.contains(w));
  for (const auto& w : template_words()) CHECK(v.contains(w));
  CHECK(v.contains(kQuestionMarker));
  CHECK_THROWS_AS(v.id("zebra"), UnknownToken);
  CHECK_THROWS_AS(v.token(v.size()), UnknownToken);
  CHECK_THROWS_AS(Vocab({"a", "a"}), ValidationError);
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.backbone.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.slots = 0;
  CHECK_THROWS_AS(init_model(c, 1), ConfigError);
  CHECK(model_config_from_json(to_json(tiny())) == tiny());
}

TEST_CASE("forward is deterministic and causal") {
  const auto m = init_model(tiny(), 3);
  const auto task = sample_task(TaskKind::depth_order, 5);
  const auto img = render_scene(task.scene);
  auto ids = sample_ids(m, 5);
  const auto a = forward(m, img, ids);
  const auto b = forward(m, img, ids);
  CHECK(a.logits.value() == b.logits.value());
  CHECK(a.logits.rows() == static_cast<Eigen::Index>(ids.size()));
  CHECK(a.logits.cols() == m.vocab.size());
  CHECK(a.hidden.cols() == 16);
  CHECK(a.logits.value().allFinite());

  for (std::size_t t : {std::size_t{3}, ids.size() / 2, ids.size() - 1}) {
    auto perturbed = ids;
    perturbed[t] = (perturbed[t] + 1) % m.vocab.size();
    const auto c = forward(m, img, perturbed);
    const auto n = static_cast<Eigen::Index>(t);
    CHECK((c.logits.value().topRows(n) - a.logits.value().topRows(n)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((c.logits.value().row(n) - a.logits.value().row(n)).cwiseAbs().maxCoeff() > 0.0);
  }

  // Every text position sees the image.
  auto other = sample_task(TaskKind::count, 77);
  const auto d = forward(m, render_scene(other.scene), ids);
  CHECK((d.logits.value().row(0) - a.logits.value().row(0)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("slot hidden states feed projection heads directly") {
  const auto m = init_model(tiny(), 3);
  const auto task = sample_task(TaskKind::depth_order, 5);
  const auto seq = stage2_sequence(task, stage2_path(task, ExpertSet{ExpertKind::seg, ExpertKind::depth}, 4));
  const auto out = forward(m, render_scene(task.scene), m.vocab.encode(seq.tokens));
  for (const auto& [d, slots] : seq.layout.observation_positions) {
    const auto e = seq.layout.decision_experts.at(d);
    const auto pred = project(m.head(e), ag::gather_rows(out.hidden, slots));
    CHECK(pred.rows() == m.head(e).output_rows());
  }
}

TEST_CASE("decode session reproduces the training forward") {
  const auto m = init_model(tiny(), 4);
  const auto task = sample_task(TaskKind::texture_match, 6);
  const auto img = render_scene(task.scene);
  const auto ids = sample_ids(m, 6);
  const auto full = forward(m, img, ids);
  DecodeSession session(m, img);
  double worst = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto step = session.feed(ids[t]);
    const auto r = static_cast<Eigen::Index>(t);
    worst = std::max(worst, (step.logits - full.logits.value().row(r)).cwiseAbs().maxCoeff());
    worst = std::max(worst, (step.hidden - full.hidden.value().row(r)).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("context overflow") {
  auto c = tiny();
  c.backbone.context = 4;
  const auto m = init_model(c, 1);
  const auto img = render_scene(sample_task(TaskKind::count, 1).scene);
  const std::vector<int> five(5, 0);
  CHECK_THROWS_AS(forward(m, img, five), ContextOverflow);
  DecodeSession s(m, img);
  for (int i = 0; i < 4; ++i) s.feed(0);
  CHECK_THROWS_AS(s.feed(0), ContextOverflow);
}

TEST_CASE("observation input embeddings") {
  const auto m = init_model(tiny(), 2);
  CHECK(observation_input_embedding(m, ExpertKind::seg) == m.token_embedding.value().row(m.vocab.id("<seg_pad>")));
  for (auto a : kAllExperts)
    for (auto b : kAllExperts)
      if (a != b) CHECK(observation_input_embedding(m, a) != observation_input_embedding(m, b));
}

TEST_CASE("cross-entropy ignores observation-slot targets") {
  const auto m = init_model(tiny(), 2);
  const auto task = sample_task(TaskKind::depth_order, 5);
  const auto seq = stage2_sequence(task, stage2_path(task, ExpertSet::all(), 4));
  auto ids = m.vocab.encode(seq.tokens);
  const auto out = forward(m, render_scene(task.scene), ids);
  auto ce_with = [&](const std::vector<int>& tgt_ids) {
    std::vector<int> targets(ids.size(), 0);
    std::vector<double> weights(ids.size(), 0.0);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      targets[t] = tgt_ids[t + 1];
      weights[t] = seq.ce_targets.count(static_cast<int>(t + 1)) ? 1.0 : 0.0;
    }
    return ag::cross_entropy(out.logits, targets, weights).item();
  };
  auto permuted = ids;
  for (const auto& [d, slots] : seq.layout.observation_positions)
    for (int s : slots) permuted[static_cast<std::size_t>(s)] = (permuted[static_cast<std::size_t>(s)] * 7 + 3) % m.vocab.size();
  CHECK(ce_with(ids) == ce_with(permuted));
}

TEST_CASE("checkpoints round trip and reject other versions") {
  const auto dir = std::filesystem::temp_directory_path() / "percept_test_ckpt";
  std::filesystem::remove_all(dir);
  const auto m = init_model(tiny(), 9);
  save_checkpoint(dir / "a.ckpt", m, {{"stage", 1}});
  const auto ck = load_checkpoint(dir / "a.ckpt");
  CHECK(ck.meta.at("stage") == 1);
  CHECK(ck.model.config == m.config);
  const auto a = m.named_parameters(), b = ck.model.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.value() == b[i].second.value());

  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t bad = 77;
    f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), SchemaVersionMismatch);
  std::ofstream(dir / "junk.ckpt") << "nope";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), DataSchemaMismatch);
}

TEST_CASE("clone shares no parameter storage") {
  const auto m = init_model(tiny(), 1);
  auto c = clone_model(m);
  c.lm_head.mutable_value().setZero();
  c.heads[0].w_out.mutable_value().setZero();
  CHECK(m.lm_head.value().cwiseAbs().maxCoeff() > 0.0);
  CHECK(m.heads[0].w_out.value().cwiseAbs().maxCoeff() > 0.0);
}
