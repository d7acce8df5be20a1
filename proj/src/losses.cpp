#include "percept/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "percept/error.hpp"

namespace percept {
namespace {

void require_same_size(const Vec& a, const Vec& b, const char* what) {
  if (a.size() != b.size()) throw ShapeMismatch(std::string(what) + ": map sizes differ");
}

// Shortest-augmenting-path assignment with potentials; rows.size() <= cols.size().
std::vector<int> solve_rows_le_cols(const Mat& cost, const std::vector<int>& rows, const std::vector<int>& cols) {
  const int n = static_cast<int>(rows.size());
  const int m = static_cast<int>(cols.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  auto a = [&](int i, int j) { return cost(rows[static_cast<std::size_t>(i - 1)], cols[static_cast<std::size_t>(j - 1)]); };
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) minv[static_cast<std::size_t>(j)] = cur, way[static_cast<std::size_t>(j)] = j0;
        if (minv[static_cast<std::size_t>(j)] < delta) delta = minv[static_cast<std::size_t>(j)], j1 = j;
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = cols[static_cast<std::size_t>(j - 1)];
  return row_to_col;
}

// Optimal pairs (global indices) between the given row and column subsets.
std::vector<std::pair<int, int>> solve_subset(const Mat& cost, const std::vector<int>& rows, const std::vector<int>& cols) {
  std::vector<std::pair<int, int>> out;
  if (rows.empty() || cols.empty()) return out;
  if (rows.size() <= cols.size()) {
    const auto r2c = solve_rows_le_cols(cost, rows, cols);
    for (std::size_t i = 0; i < rows.size(); ++i) out.emplace_back(rows[i], r2c[i]);
  } else {
    const Mat t = cost.transpose();
    const auto c2r = solve_rows_le_cols(t, cols, rows);
    for (std::size_t j = 0; j < cols.size(); ++j) out.emplace_back(c2r[j], cols[j]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

double row_order_cost(const Mat& cost, std::vector<std::pair<int, int>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  double total = 0.0;
  for (auto [r, c] : pairs) total += cost(r, c);
  return total;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace

Assignment hungarian_match(const Mat& cost) {
  if (!cost.allFinite()) throw NonFiniteCost("cost matrix has non-finite entries");
  const int k = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  Assignment out;
  if (k == 0 || m == 0) return out;

  std::vector<int> all_rows(static_cast<std::size_t>(k)), all_cols(static_cast<std::size_t>(m));
  std::iota(all_rows.begin(), all_rows.end(), 0);
  std::iota(all_cols.begin(), all_cols.end(), 0);
  double best = row_order_cost(cost, solve_subset(cost, all_rows, all_cols));
  const int target = std::min(k, m);

  // Fix rows in order, each to the smallest column (or to "unassigned", which
  // sorts after every column) that still admits an optimal completion.
  std::vector<std::pair<int, int>> fixed;
  std::vector<int> free_cols = all_cols;
  for (int r = 0; r < k && static_cast<int>(fixed.size()) < target; ++r) {
    std::vector<int> rest_rows;
    for (int rr = r + 1; rr < k; ++rr) rest_rows.push_back(rr);
    bool placed = false;
    for (int c : free_cols) {
      std::vector<int> rest_cols;
      for (int cc : free_cols)
        if (cc != c) rest_cols.push_back(cc);
      auto pairs = fixed;
      pairs.emplace_back(r, c);
      auto completion = solve_subset(cost, rest_rows, rest_cols);
      pairs.insert(pairs.end(), completion.begin(), completion.end());
      if (static_cast<int>(pairs.size()) != target) continue;
      const double total = row_order_cost(cost, pairs);
      if (total <= best + 1e-12 * (1.0 + std::abs(best))) {
        best = std::min(best, total);
        fixed.emplace_back(r, c);
        free_cols = rest_cols;
        placed = true;
        break;
      }
    }
    if (!placed) {
      // Leaving row r unassigned must still allow a full-size optimal completion.
      auto pairs = fixed;
      auto completion = solve_subset(cost, rest_rows, free_cols);
      pairs.insert(pairs.end(), completion.begin(), completion.end());
      if (static_cast<int>(pairs.size()) != target) throw RuntimeFailure("hungarian: no feasible completion");
      best = std::min(best, row_order_cost(cost, pairs));
    }
  }
  std::sort(fixed.begin(), fixed.end());
  out.pairs = std::move(fixed);
  out.cost = row_order_cost(cost, out.pairs);
  return out;
}

MapLoss dice_loss(const Vec& pred_prob, const Vec& gt) {
  require_same_size(pred_prob, gt, "dice_loss");
  const double inter = pred_prob.dot(gt);
  const double denom = pred_prob.sum() + gt.sum() + kDiceSmoothing;
  const double numer = 2.0 * inter + kDiceSmoothing;
  MapLoss out;
  out.value = 1.0 - numer / denom;
  out.grad = -(2.0 * gt * denom - Vec::Constant(gt.size(), numer)) / (denom * denom);
  return out;
}

MapLoss focal_loss(const Vec& pred_logit, const Vec& gt) {
  require_same_size(pred_logit, gt, "focal_loss");
  const auto n = static_cast<double>(gt.size());
  MapLoss out;
  out.grad.resize(gt.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    // Work with z such that p_t = sigmoid(z).
    const bool positive = gt[i] > 0.5;
    const double z = positive ? pred_logit[i] : -pred_logit[i];
    const double alpha_t = positive ? kFocalAlpha : 1.0 - kFocalAlpha;
    const double q = sigmoid(z);
    const double log_q = log_sigmoid(z);
    const double mod = std::pow(1.0 - q, kFocalGamma);
    total += -alpha_t * mod * log_q;
    const double dz = alpha_t * mod * (kFocalGamma * q * log_q - (1.0 - q));
    out.grad[i] = (positive ? dz : -dz) / n;
  }
  out.value = total / n;
  return out;
}

MapLoss dense_l1_loss(const Vec& pred, const Vec& gt) {
  require_same_size(pred, gt, "dense_l1_loss");
  const auto n = static_cast<double>(gt.size());
  const Vec diff = pred - gt;
  MapLoss out;
  out.value = diff.cwiseAbs().sum() / n;
  out.grad = diff.unaryExpr([n](double d) { return d > 0 ? 1.0 / n : (d < 0 ? -1.0 / n : 0.0); });
  return out;
}

MatLoss patch_mse_loss(const Mat& pred, const Mat& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ShapeMismatch("patch_mse_loss: shapes differ");
  const auto n = static_cast<double>(gt.size());
  const Mat diff = pred - gt;
  return {diff.squaredNorm() / n, diff * (2.0 / n)};
}

MatLoss seg_align_loss(const Mat& pred_logits, const std::vector<Vec>& gt_masks) {
  const auto slots = static_cast<int>(pred_logits.rows());
  for (const auto& g : gt_masks)
    if (g.size() != pred_logits.cols()) throw ShapeMismatch("seg_align_loss: mask size differs from prediction");
  const auto targets = static_cast<int>(gt_masks.size());

  std::vector<Vec> logits(static_cast<std::size_t>(slots));
  std::vector<Vec> probs(static_cast<std::size_t>(slots));
  for (int i = 0; i < slots; ++i) {
    logits[static_cast<std::size_t>(i)] = pred_logits.row(i).transpose();
    probs[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)].unaryExpr(&sigmoid);
  }

  Mat cost(slots, targets);
  for (int i = 0; i < slots; ++i)
    for (int j = 0; j < targets; ++j)
      cost(i, j) = dice_loss(probs[static_cast<std::size_t>(i)], gt_masks[static_cast<std::size_t>(j)]).value +
                   focal_loss(logits[static_cast<std::size_t>(i)], gt_masks[static_cast<std::size_t>(j)]).value;
  const Assignment match = hungarian_match(cost);

  MatLoss out;
  out.grad = Mat::Zero(pred_logits.rows(), pred_logits.cols());
  std::vector<char> matched(static_cast<std::size_t>(slots), 0);
  const auto n_matched = static_cast<double>(match.pairs.size());
  for (auto [i, j] : match.pairs) {
    matched[static_cast<std::size_t>(i)] = 1;
    const auto& p = probs[static_cast<std::size_t>(i)];
    const auto dice = dice_loss(p, gt_masks[static_cast<std::size_t>(j)]);
    const auto focal = focal_loss(logits[static_cast<std::size_t>(i)], gt_masks[static_cast<std::size_t>(j)]);
    out.value += (dice.value + focal.value) / n_matched;
    const Vec dlogit = dice.grad.cwiseProduct(p.cwiseProduct(Vec::Ones(p.size()) - p)) + focal.grad;
    out.grad.row(i) += dlogit.transpose() / n_matched;
  }
  const int unmatched = slots - static_cast<int>(match.pairs.size());
  if (unmatched > 0) {
    const Vec empty = Vec::Zero(pred_logits.cols());
    for (int i = 0; i < slots; ++i) {
      if (matched[static_cast<std::size_t>(i)]) continue;
      const auto focal = focal_loss(logits[static_cast<std::size_t>(i)], empty);
      out.value += focal.value / unmatched;
      out.grad.row(i) += focal.grad.transpose() / unmatched;
    }
  }
  out.value += kUnmatchedTargetPenalty * std::max(0, targets - slots);
  return out;
}

void LossWeights::validate() const {
  auto ok = [](double x) { return std::isfinite(x) && x >= 0.0; };
  for (double l : lambda)
    if (!ok(l)) throw ConfigError("loss weight lambda must be finite and >= 0");
  if (!ok(gamma)) throw ConfigError("loss weight gamma must be finite and >= 0");
  if (!ok(eta)) throw ConfigError("sparsity weight eta must be finite and >= 0");
}

double sparsity_penalty(const SequenceLayout& layout, int slot_count) {
  return static_cast<double>(layout.decision_positions.size()) * slot_count;
}

MatLoss expert_alignment_loss(ExpertKind expert, const Mat& prediction, const ExpertFeatureBundle& bundle) {
  auto as_row_loss = [&](const Vec& target) {
    if (prediction.rows() != 1) throw ShapeMismatch("dense expert prediction must be a single map");
    const auto l = dense_l1_loss(prediction.row(0).transpose(), target);
    return MatLoss{l.value, l.grad.transpose()};
  };
  switch (expert) {
    case ExpertKind::seg:
      return seg_align_loss(prediction, bundle.seg);
    case ExpertKind::depth:
      return as_row_loss(bundle.depth);
    case ExpertKind::edge:
      return as_row_loss(bundle.edge);
    case ExpertKind::patch:
      return patch_mse_loss(prediction, bundle.patch);
  }
  throw MissingPrediction("unknown expert");
}

VisualLoss visual_loss(const std::map<ExpertKind, std::vector<Mat>>& preds, ExpertSet queried,
                       const ExpertFeatureBundle& bundle, const LossWeights& weights) {
  VisualLoss out;
  for (const auto& [expert, list] : preds)
    if (!queried.contains(expert) && !list.empty())
      throw MissingPrediction("prediction supplied for unqueried expert " + std::string(to_string(expert)));
  for (auto expert : queried.members()) {
    auto it = preds.find(expert);
    if (it == preds.end() || it->second.empty())
      throw MissingPrediction("no prediction for queried expert " + std::string(to_string(expert)));
    const auto& list = it->second;
    const double share = 1.0 / static_cast<double>(list.size());
    const double lambda = weights.lambda_for(expert);
    double term = 0.0;
    auto& grads = out.grads[expert];
    for (const auto& pred : list) {
      auto l = expert_alignment_loss(expert, pred, bundle);
      term += share * l.value;
      grads.push_back(l.grad * (share * lambda));
    }
    out.terms[expert] = term;
    out.total += lambda * term;
  }
  return out;
}

LossBreakdown make_breakdown(double ce, const VisualLoss& vis, double penalty, const LossWeights& weights) {
  LossBreakdown b;
  b.ce = ce;
  b.vis_terms = vis.terms;
  b.vis_total = vis.total;
  b.penalty = penalty;
  b.combined = ce + weights.gamma * vis.total + weights.eta * penalty;
  return b;
}

SampleLoss sample_loss(const std::vector<LossBreakdown>& paths) {
  if (paths.empty()) throw EmptyPathSet("sample_loss needs at least one path");
  SampleLoss out{paths.front().combined, 0};
  for (std::size_t i = 1; i < paths.size(); ++i)
    if (paths[i].combined < out.value) out = {paths[i].combined, i};
  return out;
}

}  // namespace percept
