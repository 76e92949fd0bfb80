#pragma once
#include <vector>

#include "metadetr/cam.hpp"
#include "metadetr/detector.hpp"
#include "metadetr/encodings.hpp"

namespace metadetr {

// One detection target: an encoding slot (1..C) with a box, or no object.
struct TargetEntry {
  int label = kNoObject;
  Box box;
  bool has_object() const { return label != kNoObject; }
};

// Always padded to the number of object queries N.
struct TargetSet {
  std::vector<TargetEntry> entries;
  int size() const { return static_cast<int>(entries.size()); }
};

struct Assignment {
  std::vector<int> sigma;  // sigma[i] = prediction index assigned to target i
  double total_cost = 0.0;
};

// Globally optimal square assignment (min total cost). Among equal-cost
// optima the lexicographically smallest sigma is returned; the tie set is
// recovered from the dual certificate of a Jonker-Volgenant solve.
// cost is row-major n x n; entries must be finite.
Assignment hungarian(const std::vector<double>& cost, int n);

struct CostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

// Row-major n x n matching cost between targets (rows) and predictions
// (columns). Rows of no-object targets are identically zero.
std::vector<double> matching_cost(const Value& scores, const Value& boxes,
                                  const TargetSet& targets, const CostWeights& w);

// Mean over queries and slots of the sigmoid focal loss against a dense
// 0/1 label matrix (row-major, same shape as logits).
Value focal_loss(const Value& logits, const std::vector<double>& labels, double alpha,
                 double gamma);
// Closed-form focal term for a single logit/label pair, used by the
// matching cost and as an independent check of the Value route.
double focal_term(double logit, bool positive, double alpha, double gamma);

// Generalized IoU of two positive-extent boxes, in (-1, 1].
double giou(const Box& a, const Box& b);

// Differentiable box losses over matched (prediction row, target box)
// pairs; both are means over the pairs.
Value l1_loss_matched(const Value& boxes, const std::vector<int>& pred_idx,
                      const std::vector<Box>& targets);
Value giou_loss_matched(const Value& boxes, const std::vector<int>& pred_idx,
                        const std::vector<Box>& targets);

// Cross-entropy over tau-scaled cosine similarities between the episode's
// prototypes (background excluded) and the class weight bank.
Value proto_cosine_loss(const PrototypeSet& protos, const Value& class_weights, double tau);

struct LossConfig {
  CostWeights weights;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double proto_tau = 20.0;
  double proto_weight = 1.0;
};

struct LossBreakdown {
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double proto_cos = 0.0;
  double total = 0.0;
  std::vector<double> per_layer;
};

struct LossResult {
  Value loss;
  LossBreakdown breakdown;
  std::vector<Assignment> assignments;  // one per decoder layer
};

// Set-based training objective: every decoder layer is matched
// independently against the targets and charged the classification and box
// losses under its own optimal assignment; the prototype cosine loss is
// added once. protos may be null to skip the prototype term.
LossResult total_loss(const DetectionSet& det, const TargetSet& targets,
                      const PrototypeSet* protos, const Value* class_weights,
                      const LossConfig& cfg);

}  // namespace metadetr
