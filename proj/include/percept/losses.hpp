#pragma once

// Training objective terms: per-expert alignment distances, the Hungarian
// matched segmentation loss, the decision-token sparsity penalty, and the
// min-over-valid-paths sample loss.
//
// Every differentiable loss returns its value together with the gradient with
// respect to its first argument.

#include <array>
#include <map>
#include <utility>
#include <vector>

#include "percept/autograd.hpp"
#include "percept/chain.hpp"
#include "percept/kinds.hpp"
#include "percept/world.hpp"

namespace percept {

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kUnmatchedTargetPenalty = 1.0;

struct MapLoss {
  double value = 0.0;
  Vec grad;
};

struct MatLoss {
  double value = 0.0;
  Mat grad;
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // sorted by row
  double cost = 0.0;                       // summed in row order
};

// Minimum-cost assignment of min(K, M) pairs. Among optimal assignments the
// lexicographically smallest pair list is returned.
Assignment hungarian_match(const Mat& cost);

MapLoss dice_loss(const Vec& pred_prob, const Vec& gt);
MapLoss focal_loss(const Vec& pred_logit, const Vec& gt);
MapLoss dense_l1_loss(const Vec& pred, const Vec& gt);
MatLoss patch_mse_loss(const Mat& pred, const Mat& gt);

// pred_logits: one mask-logit row per observation slot.
MatLoss seg_align_loss(const Mat& pred_logits, const std::vector<Vec>& gt_masks);

struct LossWeights {
  std::array<double, 4> lambda = {1.0, 1.0, 1.0, 1.0};  // indexed by ExpertKind
  double gamma = 1.0;
  double eta = 0.0;

  double lambda_for(ExpertKind e) const { return lambda[static_cast<std::size_t>(index_of(e))]; }
  void validate() const;  // throws ConfigError
  bool operator==(const LossWeights&) const = default;
};

// |decision tokens| * N. Depends only on the layout, so it carries no
// gradient into observation states or projection heads.
double sparsity_penalty(const SequenceLayout& layout, int slot_count);

// Alignment distance of one expert's prediction against the bundle.
MatLoss expert_alignment_loss(ExpertKind expert, const Mat& prediction, const ExpertFeatureBundle& bundle);

struct VisualLoss {
  double total = 0.0;
  std::map<ExpertKind, double> terms;
  // Gradient of `total` for each prediction, aligned with the input lists.
  std::map<ExpertKind, std::vector<Mat>> grads;
};

// preds[m] holds one prediction per span of expert m; an expert queried more
// than once contributes the mean of its span losses.
VisualLoss visual_loss(const std::map<ExpertKind, std::vector<Mat>>& preds, ExpertSet queried,
                       const ExpertFeatureBundle& bundle, const LossWeights& weights);

struct LossBreakdown {
  double ce = 0.0;
  std::map<ExpertKind, double> vis_terms;
  double vis_total = 0.0;
  double penalty = 0.0;
  double combined = 0.0;
};

LossBreakdown make_breakdown(double ce, const VisualLoss& vis, double penalty, const LossWeights& weights);

struct SampleLoss {
  double value = 0.0;
  std::size_t chosen = 0;
};

// Minimum combined cost over candidate paths; ties go to the lowest index.
SampleLoss sample_loss(const std::vector<LossBreakdown>& paths);

}  // namespace percept
