#include "metadetr/evalmetrics.hpp"

#include <algorithm>
#include <cmath>

#include "metadetr/value.hpp"

namespace metadetr {

namespace {

// Marks each ranked detection TP/FP and returns the ground-truth count.
std::pair<std::vector<char>, int> match_detections(
    std::vector<ScoredDet>& dets, const std::map<int, std::vector<Box>>& gt_by_image,
    double iou_thr) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ScoredDet& a, const ScoredDet& b) { return a.score > b.score; });
  int num_gt = 0;
  for (const auto& [img, boxes] : gt_by_image) num_gt += static_cast<int>(boxes.size());
  std::map<int, std::vector<char>> used;
  for (const auto& [img, boxes] : gt_by_image) used[img].assign(boxes.size(), 0);

  std::vector<char> tp(dets.size(), 0);
  for (size_t i = 0; i < dets.size(); ++i) {
    auto it = gt_by_image.find(dets[i].image_id);
    if (it == gt_by_image.end()) continue;
    const auto& boxes = it->second;
    auto& flags = used[dets[i].image_id];
    double best = iou_thr;
    int best_j = -1;
    for (size_t j = 0; j < boxes.size(); ++j) {
      if (flags[j]) continue;
      double v = iou(dets[i].box, boxes[j]);
      if (v >= best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      flags[best_j] = 1;
      tp[i] = 1;
    }
  }
  return {tp, num_gt};
}

}  // namespace

double average_precision(std::vector<ScoredDet> dets,
                         const std::map<int, std::vector<Box>>& gt_by_image, double iou_thr) {
  auto [tp, num_gt] = match_detections(dets, gt_by_image, iou_thr);
  if (num_gt == 0) return 0.0;
  // Cumulate, then integrate precision over recall with right-max
  // interpolation (all-point).
  std::vector<double> recall, precision;
  int tps = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    tps += tp[i];
    recall.push_back(static_cast<double>(tps) / num_gt);
    precision.push_back(static_cast<double>(tps) / static_cast<double>(i + 1));
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    double pmax = 0.0;
    for (size_t j = i; j < precision.size(); ++j) pmax = std::max(pmax, precision[j]);
    ap += (recall[i] - prev_recall) * pmax;
    prev_recall = recall[i];
  }
  return ap;
}

std::vector<std::pair<double, double>> pr_curve(std::vector<ScoredDet> dets,
                                                const std::map<int, std::vector<Box>>& gt_by_image,
                                                double iou_thr) {
  auto [tp, num_gt] = match_detections(dets, gt_by_image, iou_thr);
  std::vector<std::pair<double, double>> out;
  if (num_gt == 0) return out;
  int tps = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    tps += tp[i];
    out.emplace_back(static_cast<double>(tps) / num_gt,
                     static_cast<double>(tps) / static_cast<double>(i + 1));
  }
  return out;
}

double EvalResult::map_at(const std::string& group, double thr) const {
  auto git = map_groups.find(group);
  check(git != map_groups.end(), "EvalResult: unknown group '" + group + "'");
  for (size_t i = 0; i < iou_thresholds.size(); ++i)
    if (std::fabs(iou_thresholds[i] - thr) < 1e-12) return git->second[i];
  fail("EvalResult: threshold not evaluated");
}

}  // namespace metadetr
