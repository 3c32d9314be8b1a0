#include "fda/eval.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "fda/geometry.hpp"

namespace fda {

std::size_t MatchResult::true_positives() const {
  return static_cast<std::size_t>(std::count(prediction_tp.begin(), prediction_tp.end(), true));
}

namespace {

/// Index of the best unmatched gt for `pred`, or -1.
long best_match(const BevBox& pred, const FrameBoxes& gts, const std::vector<bool>& matched, double thr) {
  long best = -1;
  double best_iou = thr;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (matched[g]) continue;
    const double iou = rotated_iou(pred, gts[g]);
    if (iou >= best_iou && (best < 0 || iou > best_iou)) {
      best = static_cast<long>(g);
      best_iou = iou;
    }
  }
  return best;
}

}  // namespace

MatchResult match_frame(const FrameBoxes& predictions, const FrameBoxes& gts, double iou_threshold) {
  MatchResult r;
  r.iou_threshold = iou_threshold;
  r.gt_matched.assign(gts.size(), false);
  for (const BevBox& p : predictions) {
    const long g = best_match(p, gts, r.gt_matched, iou_threshold);
    if (g >= 0) r.gt_matched[static_cast<std::size_t>(g)] = true;
    r.prediction_tp.push_back(g >= 0);
  }
  return r;
}

PrecisionRecall precision_recall(const std::vector<FrameBoxes>& predictions, const std::vector<FrameBoxes>& gts,
                                 double iou_threshold) {
  if (predictions.size() != gts.size()) throw ArgumentError("evaluate_ap: prediction and gt frame counts differ");
  struct Entry {
    double score;
    std::size_t frame;
    std::size_t index;
  };
  std::vector<Entry> all;
  PrecisionRecall pr;
  for (std::size_t f = 0; f < predictions.size(); ++f) {
    pr.gt_count += gts[f].size();
    for (std::size_t i = 0; i < predictions[f].size(); ++i) all.push_back({predictions[f][i].score.value_or(0.0), f, i});
  }
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> matched(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) matched[f].assign(gts[f].size(), false);
  std::size_t tp = 0, fp = 0;
  for (const Entry& e : all) {
    const long g = best_match(predictions[e.frame][e.index], gts[e.frame], matched[e.frame], iou_threshold);
    if (g >= 0) {
      matched[e.frame][static_cast<std::size_t>(g)] = true;
      ++tp;
    } else {
      ++fp;
    }
    pr.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    pr.recall.push_back(pr.gt_count ? static_cast<double>(tp) / static_cast<double>(pr.gt_count) : 0.0);
  }
  return pr;
}

double average_precision(const PrecisionRecall& pr) {
  if (pr.gt_count == 0 || pr.recall.empty()) return 0.0;
  const std::size_t n = pr.recall.size();
  // Precision envelope: best precision at any cutoff with at least this recall.
  std::vector<double> envelope(pr.precision);
  for (std::size_t i = n - 1; i-- > 0;) envelope[i] = std::max(envelope[i], envelope[i + 1]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pr.recall[i] > prev_recall) {
      ap += (pr.recall[i] - prev_recall) * envelope[i];
      prev_recall = pr.recall[i];
    }
  }
  return ap;
}

double evaluate_ap(const std::vector<FrameBoxes>& predictions, const std::vector<FrameBoxes>& gts, double iou_threshold) {
  const PrecisionRecall pr = precision_recall(predictions, gts, iou_threshold);
  if (pr.gt_count == 0) {
    std::cerr << "warning: evaluate_ap called without ground-truth boxes; AP defined as 0\n";
    return 0.0;
  }
  return average_precision(pr);
}

}  // namespace fda
