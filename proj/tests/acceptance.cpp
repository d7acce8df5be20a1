// Acceptance harness: one PASS/FAIL line per criterion.
// Exact criteria decide the exit code; directional desk-scale criteria are
// reported with their measured values.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "percept/error.hpp"
#include "percept/evalcli.hpp"
#include "support/generators.hpp"
#include "support/numeric.hpp"

using namespace percept;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  int id = 0;
  std::string name;
  bool exact = true;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> g_outcomes;

void report(int id, std::string name, bool exact, bool pass, std::string detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail << std::endl;
  g_outcomes.push_back({id, std::move(name), exact, pass, std::move(detail)});
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ---- exact criteria --------------------------------------------------------

void hungarian_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(101);
  int mismatches = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const int k = rng.uniform_int(1, 6), m = rng.uniform_int(1, 6);
    Mat cost(k, m);
    // Dyadic values keep every partial sum exact, so equality is bit-for-bit.
    for (Eigen::Index i = 0; i < cost.size(); ++i)
      cost.data()[i] = t % 2 == 0 ? rng.uniform_int(0, 3) : rng.uniform_int(0, 1 << 14) / 1024.0;
    if (hungarian_match(cost).cost != testing::brute_force_assignment(cost)) ++mismatches;
  }
  const double secs = seconds_since(t0);
  report(1, "Hungarian oracle equivalence", true, mismatches == 0 && secs < 60.0,
         std::to_string(trials) + " matrices, " + std::to_string(mismatches) + " mismatches, " + fmt(secs, 2) + " s");
}

void gradient_checks() {
  const auto t0 = Clock::now();
  constexpr double kTol = 1e-4;
  const int instances = 100;
  std::map<std::string, double> worst;
  auto track = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  Rng rng(202);
  for (int t = 0; t < instances; ++t) {
    const int n = rng.uniform_int(4, 40);
    const Vec gt = testing::random_binary(rng, n);
    const Vec logits = testing::as_vec(testing::random_mat(rng, 1, n, 2.0));
    const Vec probs = logits.unaryExpr(sig);
    track("dice", testing::gradient_error([&](const Mat& x) { return dice_loss(testing::as_vec(x), gt).value; }, testing::as_row(probs),
                                          testing::as_row(dice_loss(probs, gt).grad)));
    track("focal", testing::gradient_error([&](const Mat& x) { return focal_loss(testing::as_vec(x), gt).value; }, testing::as_row(logits),
                                           testing::as_row(focal_loss(logits, gt).grad)));
    Vec pred = testing::as_vec(testing::random_mat(rng, 1, n));
    const Vec target = testing::as_vec(testing::random_mat(rng, 1, n));
    for (Eigen::Index i = 0; i < n; ++i)
      if (std::abs(pred[i] - target[i]) < 1e-3) pred[i] += 0.01;
    track("l1", testing::gradient_error([&](const Mat& x) { return dense_l1_loss(testing::as_vec(x), target).value; }, testing::as_row(pred),
                                        testing::as_row(dense_l1_loss(pred, target).grad)));
    const Mat a = testing::random_mat(rng, 4, 5), b = testing::random_mat(rng, 4, 5);
    track("mse", testing::gradient_error([&](const Mat& x) { return patch_mse_loss(x, b).value; }, a, patch_mse_loss(a, b).grad));
    const int slots = rng.uniform_int(1, 4), targets = rng.uniform_int(0, 4);
    const Mat seg_logits = testing::random_mat(rng, slots, 36, 2.0);
    std::vector<Vec> gts;
    for (int j = 0; j < targets; ++j) gts.push_back(testing::random_binary(rng, 36));
    track("seg_align", testing::gradient_error([&](const Mat& x) { return seg_align_loss(x, gts).value; }, seg_logits,
                                               seg_align_loss(seg_logits, gts).grad));
  }
  const HeadDims dims{.hidden = 6, .grid_size = 3, .patch_grid = 2, .patch_dim = 3, .slots = 4, .proj_dim = 5};
  for (int t = 0; t < instances * 4; ++t) {
    const auto expert = kAllExperts[static_cast<std::size_t>(t % 4)];
    const auto head = init_head(expert, dims, static_cast<std::uint64_t>(t));
    const Mat block0 = testing::random_mat(rng, dims.slots, dims.hidden);
    const Mat probe = testing::random_mat(rng, head.output_rows(), head.output_cols());
    ag::Var block = ag::parameter(block0);
    for (auto p : head.parameters()) p.zero_grad();
    ag::backward(ag::sum(ag::mul(project(head, block), ag::constant(probe))));
    const std::string name = "proj_" + std::string(to_string(expert));
    track(name, testing::gradient_error([&](const Mat& x) { return project(head, x).cwiseProduct(probe).sum(); }, block0, block.grad()));
    for (auto p : head.parameters()) {
      const Mat keep = p.value();
      track(name, testing::gradient_error(
                      [&](const Mat& x) {
                        p.mutable_value() = x;
                        const double v = project(head, block0).cwiseProduct(probe).sum();
                        p.mutable_value() = keep;
                        return v;
                      },
                      keep, p.grad()));
    }
  }
  double max_err = 0.0;
  std::string detail;
  for (const auto& [name, err] : worst) {
    max_err = std::max(max_err, err);
    detail += name + "=" + fmt(err * 1e6, 3) + "e-6 ";
  }
  const double secs = seconds_since(t0);
  report(2, "gradient checks", true, max_err <= kTol && secs < 300.0,
         "max rel err " + fmt(max_err * 1e6, 3) + "e-6 over " + std::to_string(instances) + " instances each (" + detail + ") " +
             fmt(secs, 2) + " s");
}

void penalty_exactness() {
  Rng rng(303);
  int bad = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const int n = rng.uniform_int(1, 8);
    const auto chain = testing::random_chain(rng, n);
    const auto tokens = chain_tokens(chain);
    const auto lay = layout(chain, tokens);
    std::size_t decisions = 0;
    for (const auto& tok : tokens) decisions += expert_of_decision_token(tok).has_value();
    if (sparsity_penalty(lay, n) != static_cast<double>(decisions * static_cast<std::size_t>(n))) ++bad;
  }
  report(3, "sparsity penalty exactness", true, bad == 0, std::to_string(trials) + " random layouts, " + std::to_string(bad) + " mismatches");
}

void selection_rule() {
  Rng rng(404);
  int bad = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const int paths = rng.uniform_int(2, 5), n = rng.uniform_int(1, 8);
    LossWeights w;
    w.eta = std::max(1e-6, rng.uniform() * 2.0);
    const double ce = rng.uniform() * 3.0;
    VisualLoss vis;
    vis.total = rng.uniform() * 2.0;
    std::vector<LossBreakdown> bs;
    std::vector<int> decisions;
    for (int p = 0; p < paths; ++p) {
      decisions.push_back(rng.uniform_int(0, 4));
      bs.push_back(make_breakdown(ce, vis, static_cast<double>(decisions.back() * n), w));
    }
    const auto fewest = std::min_element(decisions.begin(), decisions.end()) - decisions.begin();
    if (sample_loss(bs).chosen != static_cast<std::size_t>(fewest)) ++bad;
  }
  report(4, "min-path selection", true, bad == 0,
         std::to_string(trials) + " path sets with equal ce+vis, " + std::to_string(bad) + " wrong picks (fewest decisions, lowest index on ties)");
}

void grammar_round_trip() {
  const auto t0 = Clock::now();
  Rng rng(505);
  int bad = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const int n = rng.uniform_int(1, 8);
    const auto chain = testing::random_chain(rng, n);
    try {
      if (!(parse_chain(serialize(chain), n) == chain)) {
        ++bad;
        continue;
      }
      const auto tokens = chain_tokens(chain);
      const auto lay = layout(chain, tokens);
      bool ok = lay.size() == static_cast<int>(tokens.size());
      for (const auto& [pos, slots] : lay.observation_positions) {
        ok = ok && static_cast<int>(slots.size()) == n;
        for (int k = 0; k < static_cast<int>(slots.size()); ++k)
          ok = ok && slots[static_cast<std::size_t>(k)] == pos + 1 + k &&
               expert_of_pad_token(tokens[static_cast<std::size_t>(slots[static_cast<std::size_t>(k)])]) == lay.decision_experts.at(pos);
      }
      bad += !ok;
    } catch (const Error&) {
      ++bad;
    }
  }
  int accepted = 0;
  const auto fixtures = testing::malformed_chain_fixtures();
  for (const auto& text : fixtures) {
    try {
      parse_chain(text, 4);
      ++accepted;
    } catch (const MalformedChain&) {
    }
  }
  const double secs = seconds_since(t0);
  report(5, "grammar round trip", true, bad == 0 && accepted == 0 && secs < 60.0,
         std::to_string(trials) + " random chains, " + std::to_string(bad) + " failures; " + std::to_string(fixtures.size()) +
             " malformed fixtures, " + std::to_string(accepted) + " accepted; " + fmt(secs, 2) + " s");
}

void corpus_distribution() {
  const auto t0 = Clock::now();
  const auto stats = corpus_stats(build_stage2_corpus(10000, CategoryMix{}, 606));
  const std::array<double, 3> want = {0.20, 0.60, 0.20};
  bool ok = true;
  std::string detail;
  for (auto c : kAllCategories) {
    const double share = static_cast<double>(stats.categories.count(c) ? stats.categories.at(c) : 0) / static_cast<double>(stats.samples);
    ok = ok && std::abs(share - want[static_cast<std::size_t>(c)]) <= 0.03;
    detail += std::string(to_string(c)) + "=" + fmt(share, 4) + " ";
  }
  const double secs = seconds_since(t0);
  report(6, "corpus distribution", true, ok && secs < 120.0, detail + "over " + std::to_string(stats.samples) + " samples, " + fmt(secs, 2) + " s");
}

void overfit_fixture(const ExperimentConfig& desk) {
  auto c = desk.train_config(1, 13);
  c.steps = 300;
  c.batch_size = 1;
  c.log_every = 300;
  c.optimizer.lr_backbone = c.optimizer.lr_heads = 1e-2;
  CorpusOptions o;
  o.slot_count = c.model.slots;
  o.with_targets = false;
  const auto r = train_stage1(c, build_stage1_corpus(1, 13, o));
  const double first = r.metrics.front().at("vis_total").get<double>();
  const double last = r.metrics.back().at("vis_total").get<double>();
  report(13, "stage-1 alignment convergence", true, first > 0.0 && last < 0.1 * first,
         "vis_total " + fmt(first) + " -> " + fmt(last) + " (" + fmt(100.0 * last / first, 2) + "% of step 0) after 300 steps");
}

// ---- directional criteria --------------------------------------------------

struct Eval {
  double accuracy = 0, decision = 0, observation = 0, trace_seconds = 0;
  std::map<TaskKind, std::map<ExpertKind, double>> usage;
  std::map<TaskKind, double> task_accuracy;
  std::uint64_t expert_calls = 0;
};

Eval summarize(const EvalReport& r) {
  Eval e;
  e.accuracy = r.accuracy;
  e.decision = r.avg_decision_tokens;
  e.observation = r.avg_observation_tokens;
  e.trace_seconds = r.avg_trace_seconds;
  e.expert_calls = r.expert_calls;
  for (const auto& [k, m] : r.per_task) {
    e.task_accuracy[k] = m.accuracy();
    for (auto x : kAllExperts) e.usage[k][x] = m.usage_rate(x);
  }
  return e;
}

Eval mean(const std::vector<Eval>& v) {
  Eval m;
  const double n = static_cast<double>(v.size());
  for (const auto& e : v) {
    m.accuracy += e.accuracy / n, m.decision += e.decision / n, m.observation += e.observation / n;
    m.trace_seconds += e.trace_seconds / n, m.expert_calls += e.expert_calls;
    for (const auto& [k, a] : e.task_accuracy) m.task_accuracy[k] += a / n;
    for (const auto& [k, u] : e.usage)
      for (const auto& [x, r] : u) m.usage[k][x] += r / n;
  }
  return m;
}

json to_json(const Eval& e) {
  json usage = json::object(), tasks = json::object();
  for (const auto& [k, u] : e.usage)
    for (const auto& [x, r] : u) usage[std::string(to_string(k))][std::string(to_string(x))] = r;
  for (const auto& [k, a] : e.task_accuracy) tasks[std::string(to_string(k))] = a;
  return {{"accuracy", e.accuracy}, {"avg_decision_tokens", e.decision}, {"avg_observation_tokens", e.observation},
          {"avg_trace_seconds", e.trace_seconds}, {"expert_calls", e.expert_calls}, {"per_task_accuracy", tasks}, {"usage", usage}};
}

struct Arms {
  std::map<std::string, std::vector<Eval>> runs;
  std::vector<double> full_observation;
};

Eval run_eval(const Model& model, const ExperimentConfig& c, const std::vector<TaskSample>& suite, ForcePolicy force = {}) {
  auto o = c.eval_options();
  o.force = force;
  return summarize(evaluate(model, suite, o));
}

void directional(const ExperimentConfig& desk, int seeds, const std::filesystem::path& report_path) {
  const auto t0 = Clock::now();
  const auto calls_at_start = expert_call_count();
  const auto suite = eval_suite(desk);
  Arms arms;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = desk.seed + static_cast<std::uint64_t>(s);
    std::cout << "  seed " << seed << ": stage 1 (N=4)" << std::flush;
    auto c4 = desk;
    c4.model.slots = 4;
    const auto s1 = run_stage1(c4, seed);
    for (double eta : {0.0, 0.1, 0.5}) {
      std::cout << ", stage 2 eta=" << eta << std::flush;
      auto c = c4;
      c.stage2.weights.eta = eta;
      const auto s2 = run_stage2(c, seed, &s1.model);
      const auto policy = run_eval(s2.model, c, suite);
      arms.runs["eta=" + fmt(eta, 1)].push_back(policy);
      if (eta == 0.1) {
        arms.runs["s1+s2"].push_back(policy);
        const auto full = run_eval(s2.model, c, suite, {ForceMode::full, 0.0});
        arms.runs["forced_full"].push_back(full);
        arms.full_observation.push_back(full.observation);
        arms.runs["forced_random"].push_back(run_eval(s2.model, c, suite, {ForceMode::random, policy.decision}));
        arms.runs["N=4"].push_back(policy);
      }
    }
    std::cout << ", stage 2 only" << std::flush;
    auto c = c4;
    c.stage2.weights.eta = 0.1;
    const auto only = run_stage2(c, seed, nullptr, true);
    arms.runs["s2_only"].push_back(run_eval(only.model, c, suite));
    for (int n : {2, 8}) {
      std::cout << ", N=" << n << std::flush;
      auto cn = c;
      cn.model.slots = n;
      const auto a = run_stage1(cn, seed);
      const auto b = run_stage2(cn, seed, &a.model);
      arms.runs["N=" + std::to_string(n)].push_back(run_eval(b.model, cn, suite));
    }
    std::cout << " (" << fmt(seconds_since(t0), 0) << " s elapsed)" << std::endl;
  }
  const bool counter_live = expert_call_count() > calls_at_start;

  std::map<std::string, Eval> m;
  for (const auto& [name, v] : arms.runs) m[name] = mean(v);
  std::uint64_t eval_calls = 0;
  for (const auto& [name, v] : arms.runs)
    for (const auto& e : v) eval_calls += e.expert_calls;
  std::size_t eval_runs = 0;
  for (const auto& [name, v] : arms.runs) eval_runs += v.size();

  report(7, "inference purity", true, eval_calls == 0 && counter_live,
         "expert calls during " + std::to_string(eval_runs) + " evaluation runs = " + std::to_string(eval_calls) +
             (counter_live ? " (counter active during training)" : " (counter never moved)"));

  bool all16 = true;
  for (double o : arms.full_observation) all16 = all16 && o == 16.0;
  report(8, "forced-full token count", true, all16 && !arms.full_observation.empty(),
         "observation tokens per trace with N=4: " + fmt(m["forced_full"].observation, 4) + " in every seed");

  const double gain = m["s1+s2"].accuracy - m["s2_only"].accuracy;
  report(9, "stage ablation", false, gain >= 0.02,
         "S1+S2 " + fmt(100 * m["s1+s2"].accuracy, 1) + " vs S2-only " + fmt(100 * m["s2_only"].accuracy, 1) + " (delta " +
             fmt(100 * gain, 1) + " points, need >= +2.0)");

  const auto& pol = m["s1+s2"];
  const auto& full = m["forced_full"];
  const auto& rnd = m["forced_random"];
  const bool c10a = pol.accuracy >= full.accuracy - 0.01;
  const bool c10b = pol.observation <= 0.6 * full.observation;
  const bool c10c = rnd.accuracy <= pol.accuracy - 0.03;
  report(10, "active vs passive", false, c10a && c10b && c10c,
         "policy " + fmt(100 * pol.accuracy, 1) + " vs forced-full " + fmt(100 * full.accuracy, 1) + (c10a ? " ok" : " FAIL") +
             "; observation tokens " + fmt(pol.observation, 2) + " vs " + fmt(full.observation, 2) + " (" +
             fmt(100 * pol.observation / full.observation, 1) + "%" + (c10b ? " ok" : " FAIL") + "); forced-random at k=" +
             fmt(pol.decision, 2) + " " + fmt(100 * rnd.accuracy, 1) + (c10c ? " ok" : " FAIL"));

  auto &e0 = m["eta=0.0"], &e1 = m["eta=0.1"], &e5 = m["eta=0.5"];
  const bool c11a = e0.decision >= e1.decision && e1.decision >= e5.decision;
  const double depth_gap = e1.usage[TaskKind::depth_order][ExpertKind::depth] - e1.usage[TaskKind::count][ExpertKind::depth];
  const double seg_count = e1.usage[TaskKind::count][ExpertKind::seg];
  const bool c11b = depth_gap >= 0.20 && seg_count >= 0.80;
  const bool c11c = e5.accuracy < e1.accuracy;
  report(11, "eta sweep", false, c11a && c11b && c11c,
         "decision tokens " + fmt(e0.decision, 3) + " / " + fmt(e1.decision, 3) + " / " + fmt(e5.decision, 3) + (c11a ? " ok" : " FAIL") +
             "; depth usage gap " + fmt(100 * depth_gap, 1) + " pts, seg on count " + fmt(100 * seg_count, 1) + "%" +
             (c11b ? " ok" : " FAIL") + "; accuracy eta=0.1 " + fmt(100 * e1.accuracy, 1) + " vs eta=0.5 " + fmt(100 * e5.accuracy, 1) +
             (c11c ? " ok" : " FAIL"));

  const auto &n2 = m["N=2"], &n4 = m["N=4"], &n8 = m["N=8"];
  const bool c12a = n2.accuracy < n4.accuracy;
  const bool c12b = n2.trace_seconds < n4.trace_seconds && n4.trace_seconds < n8.trace_seconds;
  report(12, "N sweep", false, c12a && c12b,
         "accuracy N=2 " + fmt(100 * n2.accuracy, 1) + " vs N=4 " + fmt(100 * n4.accuracy, 1) + (c12a ? " ok" : " FAIL") +
             "; trace ms " + fmt(1000 * n2.trace_seconds, 3) + " / " + fmt(1000 * n4.trace_seconds, 3) + " / " +
             fmt(1000 * n8.trace_seconds, 3) + (c12b ? " ok" : " FAIL"));

  json arms_json = json::object();
  for (const auto& [name, e] : m) arms_json[name] = to_json(e);
  json per_seed = json::object();
  for (const auto& [name, v] : arms.runs)
    for (const auto& e : v) per_seed[name].push_back(e.accuracy);
  const json doc = {{"config", to_json(desk)}, {"config_hash", config_hash(desk)}, {"seeds", seeds},
                    {"suite_size", suite.size()}, {"seconds", seconds_since(t0)}, {"arms", arms_json}, {"per_seed_accuracy", per_seed}};
  std::ofstream(report_path) << doc.dump(2) << "\n";
  std::cout << "  directional runs took " << fmt(seconds_since(t0), 0) << " s; details in " << report_path.string() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path = PERCEPT_DESK_CONFIG;
  int seeds = 3;
  bool exact_only = false;
  std::string report_path = "acceptance_report.json";
  app.add_option("--config", config_path, "desk-scale experiment config")->check(CLI::ExistingFile);
  app.add_option("--seeds", seeds, "seed ensemble size")->check(CLI::PositiveNumber);
  app.add_flag("--exact-only", exact_only, "skip the training-based criteria");
  app.add_option("--report", report_path, "where to write measured values");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto desk = load_experiment_config(config_path);
    hungarian_equivalence();
    gradient_checks();
    penalty_exactness();
    selection_rule();
    grammar_round_trip();
    corpus_distribution();
    overfit_fixture(desk);
    if (!exact_only) {
      if (seeds < 3) std::cout << "WARNING: " << seeds << " seed(s); directional criteria assume an ensemble of >= 3" << std::endl;
      directional(desk, seeds, report_path);
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL harness error: " << e.what() << std::endl;
    return 1;
  }

  std::sort(g_outcomes.begin(), g_outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  int exact_fail = 0, directional_fail = 0;
  std::cout << "\nsummary\n";
  for (const auto& o : g_outcomes) {
    std::cout << "  " << (o.pass ? "PASS" : "FAIL") << " [" << o.id << "] " << o.name << (o.exact ? "" : " (directional)") << "\n";
    if (!o.pass) ++(o.exact ? exact_fail : directional_fail);
  }
  std::cout << exact_fail << " exact and " << directional_fail << " directional criteria failed" << std::endl;
  return exact_fail == 0 ? 0 : 1;
}
