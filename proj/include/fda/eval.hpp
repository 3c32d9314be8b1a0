#pragma once

#include <vector>

#include "fda/scene.hpp"

namespace fda {

using FrameBoxes = std::vector<BevBox>;

struct MatchResult {
  std::vector<bool> prediction_tp;  // per prediction, in the order given
  std::vector<bool> gt_matched;
  double iou_threshold = 0.5;

  std::size_t true_positives() const;
};

/// Greedy matching of score-ordered predictions: each prediction takes the
/// unmatched ground truth with the highest IoU, if that IoU reaches the threshold.
MatchResult match_frame(const FrameBoxes& predictions, const FrameBoxes& gts, double iou_threshold);

struct PrecisionRecall {
  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t gt_count = 0;
};

/// Cumulative precision/recall over a global descending-score sweep.
PrecisionRecall precision_recall(const std::vector<FrameBoxes>& predictions, const std::vector<FrameBoxes>& gts,
                                 double iou_threshold);

/// All-point interpolated area under the precision–recall curve.
double average_precision(const PrecisionRecall& pr);

/// AP over aligned per-frame prediction and ground-truth lists. Returns 0 (with
/// a warning) when there is no ground truth at all.
double evaluate_ap(const std::vector<FrameBoxes>& predictions, const std::vector<FrameBoxes>& gts, double iou_threshold);

}  // namespace fda
