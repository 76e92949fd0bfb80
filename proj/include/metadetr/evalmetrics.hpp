#pragma once
#include <map>
#include <string>
#include <vector>

#include "metadetr/image.hpp"

namespace metadetr {

struct ScoredDet {
  double score = 0.0;
  int image_id = -1;
  Box box;
};

// All-point interpolated average precision for one class at one IoU
// threshold. Detections are ranked by score (stable for ties); each ground
// truth box may be matched at most once, highest-scoring detection first.
double average_precision(std::vector<ScoredDet> dets,
                         const std::map<int, std::vector<Box>>& gt_by_image, double iou_thr);

// Precision/recall points of the ranked detection list (for plots).
std::vector<std::pair<double, double>> pr_curve(std::vector<ScoredDet> dets,
                                                const std::map<int, std::vector<Box>>& gt_by_image,
                                                double iou_thr);

struct EvalResult {
  std::vector<double> iou_thresholds;
  // class id -> AP at each threshold (same order as iou_thresholds)
  std::map<int, std::vector<double>> ap_per_class;
  // "base" / "novel" / "all" -> mean AP at each threshold
  std::map<std::string, std::vector<double>> map_groups;
  uint64_t seed = 0;
  int shots = 0;

  double map_at(const std::string& group, double thr) const;
};

}  // namespace metadetr
