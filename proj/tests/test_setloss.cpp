#include <cmath>
#include <cstring>

#include "doctest.h"
#include "metadetr/grad_check.hpp"
#include "metadetr/ops.hpp"
#include "metadetr/selftest.hpp"
#include "metadetr/setloss.hpp"

using namespace metadetr;

namespace {
Value randv(Rng& rng, int r, int c, bool grad = false) {
  Value v = Value::zeros(r, c, grad);
  for (auto& x : v.data()) x = rng.normal();
  return v;
}
}  // namespace

TEST_CASE("hungarian: basic cases") {
  Assignment a = hungarian({0, 1, 1, 0}, 2);
  CHECK(a.sigma == std::vector<int>{0, 1});
  CHECK(a.total_cost == 0.0);

  // brute force over both permutations picks the diagonal
  Assignment b = hungarian({1, 2, 2, 1}, 2);
  CHECK(b.sigma == std::vector<int>{0, 1});
  CHECK(b.total_cost == 2.0);
}

TEST_CASE("hungarian: ties break to the lexicographically smallest sigma") {
  // all-zero matrix: every permutation is optimal
  Assignment z = hungarian(std::vector<double>(16, 0.0), 4);
  CHECK(z.sigma == std::vector<int>{0, 1, 2, 3});

  // optima are {0,2,1} and {1,0,2}; lexicographic order prefers the former
  std::vector<double> c{0, 0, 1, 0, 1, 0, 1, 0, 0};
  std::vector<int> oracle;
  double best = brute_force_assignment(c, 3, &oracle);
  Assignment a = hungarian(c, 3);
  CHECK(a.sigma == oracle);
  CHECK(a.sigma == std::vector<int>{0, 2, 1});
  CHECK(a.total_cost == best);
}

TEST_CASE("hungarian: 200 random 7x7 matrices agree with exhaustive search") {
  Rng rng(61);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> cost(49);
    for (auto& v : cost) v = rng.uniform(-3.0, 3.0);
    std::vector<int> oracle_sigma;
    double oracle = brute_force_assignment(cost, 7, &oracle_sigma);
    Assignment a = hungarian(cost, 7);
    CHECK(a.sigma == oracle_sigma);
    CHECK(a.total_cost == oracle);
  }
}

TEST_CASE("hungarian: malformed input") {
  CHECK_THROWS_AS(hungarian({1, 2, 3}, 2), std::invalid_argument);
  CHECK_THROWS_AS(hungarian({1, std::nan(""), 2, 3}, 2), std::invalid_argument);
  CHECK_THROWS_AS(hungarian({1, std::numeric_limits<double>::infinity(), 2, 3}, 2),
                  std::invalid_argument);
}

TEST_CASE("matching_cost: no-object rows are zero and ties resolve to identity") {
  Rng rng(62);
  Value scores = randv(rng, 3, 4);
  Value boxes = sigmoid(randv(rng, 3, 4));
  TargetSet targets;
  targets.entries.resize(3);  // all no-object
  auto cost = matching_cost(scores, boxes, targets, {});
  for (double v : cost) CHECK(v == 0.0);
  Assignment a = hungarian(cost, 3);
  CHECK(a.sigma == std::vector<int>{0, 1, 2});
}

TEST_CASE("matching_cost: hand-evaluated 2x2 case") {
  // predictions: logits over 2 slots, boxes in cxcywh
  Value scores = Value::from_data(2, 2, {2.0, -1.0, -0.5, 1.5});
  Value boxes = Value::from_data(2, 4, {0.30, 0.30, 0.20, 0.20, 0.70, 0.60, 0.25, 0.30});
  TargetSet targets;
  targets.entries = {{1, {0.32, 0.28, 0.22, 0.18}}, {2, {0.68, 0.63, 0.24, 0.28}}};
  CostWeights w;  // 2 / 5 / 2
  auto cost = matching_cost(scores, boxes, targets, w);

  auto focal_cost = [](double logit) {
    return focal_term(logit, true, 0.25, 2.0) - focal_term(logit, false, 0.25, 2.0);
  };
  auto l1 = [](const Box& a, const Box& b) {
    return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
           std::fabs(a.h - b.h);
  };
  Box p0{0.30, 0.30, 0.20, 0.20}, p1{0.70, 0.60, 0.25, 0.30};
  Box t0 = targets.entries[0].box, t1 = targets.entries[1].box;
  CHECK(cost[0] == doctest::Approx(2 * focal_cost(2.0) + 5 * l1(p0, t0) +
                                   2 * (1 - giou(p0, t0))).epsilon(1e-12));
  CHECK(cost[1] == doctest::Approx(2 * focal_cost(-0.5) + 5 * l1(p1, t0) +
                                   2 * (1 - giou(p1, t0))).epsilon(1e-12));
  CHECK(cost[2] == doctest::Approx(2 * focal_cost(-1.0) + 5 * l1(p0, t1) +
                                   2 * (1 - giou(p0, t1))).epsilon(1e-12));
  CHECK(cost[3] == doctest::Approx(2 * focal_cost(1.5) + 5 * l1(p1, t1) +
                                   2 * (1 - giou(p1, t1))).epsilon(1e-12));
  // a prediction sitting exactly on its target with a confident logit is
  // the cheapest pairing in its row
  Value perfect_scores = Value::from_data(2, 2, {10.0, -10.0, -10.0, 10.0});
  Value perfect_boxes = Value::from_data(2, 4, {0.32, 0.28, 0.22, 0.18, 0.68, 0.63, 0.24, 0.28});
  auto pc = matching_cost(perfect_scores, perfect_boxes, targets, w);
  CHECK(pc[0] < pc[1]);
  CHECK(pc[3] < pc[2]);
}

TEST_CASE("focal loss: frozen value, saturation, gamma=0 reduction") {
  Value zero_logit = Value::zeros(1, 1);
  CHECK(focal_loss(zero_logit, {1.0}, 0.25, 2.0).item() ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

  Value confident = Value::from_data(1, 1, {40.0});
  CHECK(focal_loss(confident, {1.0}, 0.25, 2.0).item() == doctest::Approx(0.0).epsilon(1e-12));

  // gamma = 0: alpha-weighted binary cross-entropy
  Rng rng(63);
  Value logits = randv(rng, 3, 2);
  std::vector<double> labels{1, 0, 0, 1, 1, 0};
  double got = focal_loss(logits, labels, 0.25, 0.0).item();
  double want = 0.0;
  for (int i = 0; i < 6; ++i) {
    double x = logits.data()[i];
    double p = 1.0 / (1.0 + std::exp(-x));
    want += labels[i] == 1.0 ? -0.25 * std::log(p) : -0.75 * std::log(1.0 - p);
  }
  want /= 6.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("giou: identity, hand case, separation sweep, symmetry, errors") {
  Box unit{0.5, 0.5, 0.2, 0.2};
  CHECK(giou(unit, unit) == doctest::Approx(1.0));

  CHECK(giou({1, 1, 2, 2}, {2, 2, 2, 2}) == doctest::Approx(-0.079365).epsilon(1e-5));

  // separated unit boxes: GIoU decreases monotonically toward -1
  double prev = 1.0;
  for (double gap = 0.0; gap < 40.0; gap += 2.0) {
    double g = giou({0, 0, 1, 1}, {1.0 + gap, 0, 1, 1});
    CHECK(g < prev);
    prev = g;
  }
  CHECK(prev > -1.0);
  CHECK(prev < -0.9);

  Rng rng(64);
  for (int t = 0; t < 100; ++t) {
    Box a{rng.uniform01(), rng.uniform01(), 0.05 + rng.uniform01(), 0.05 + rng.uniform01()};
    Box b{rng.uniform01(), rng.uniform01(), 0.05 + rng.uniform01(), 0.05 + rng.uniform01()};
    CHECK(std::fabs(giou(a, b) - giou(b, a)) <= 1e-12);
    CHECK(giou(a, b) <= 1.0);
    CHECK(giou(a, b) > -1.0);
  }
  CHECK_THROWS_AS(giou({0.5, 0.5, 0.0, 0.1}, unit), std::invalid_argument);
}

TEST_CASE("differentiable giou agrees with the scalar route") {
  Rng rng(65);
  for (int t = 0; t < 50; ++t) {
    Value logits = randv(rng, 2, 4);
    Value boxes = sigmoid(logits);
    Box target{0.2 + 0.6 * rng.uniform01(), 0.2 + 0.6 * rng.uniform01(),
               0.05 + 0.3 * rng.uniform01(), 0.05 + 0.3 * rng.uniform01()};
    double via_value = giou_loss_matched(boxes, {1}, {target}).item();
    Box pred{boxes.at(1, 0), boxes.at(1, 1), boxes.at(1, 2), boxes.at(1, 3)};
    CHECK(via_value == doctest::Approx(1.0 - giou(pred, target)).epsilon(1e-12));
  }
}

TEST_CASE("prototype cosine loss: aligned, uniform, and scale-invariant") {
  int d = 8, num_classes = 6;
  double tau = 20.0;
  Value weights = Value::zeros(num_classes, d);
  for (int i = 0; i < num_classes; ++i) weights.at(i, i) = 1.0;  // orthonormal rows

  PrototypeSet protos;
  protos.bg = Value::zeros(1, d);
  Value aligned = Value::zeros(1, d);
  aligned.at(0, 2) = 3.0;  // same direction as class 2's weight row
  protos.prototypes.push_back({2, 1, aligned});
  double loss = proto_cosine_loss(protos, weights, tau).item();
  double want = -std::log(std::exp(tau) / (std::exp(tau) + (num_classes - 1)));
  CHECK(loss == doctest::Approx(want).epsilon(1e-9));
  CHECK(loss < 1e-6);

  // a prototype with uniform cosine to all classes: log(num_classes)
  Value uniform = Value::full(1, d, 0.5);
  Value uweights = Value::zeros(num_classes, d);
  for (int i = 0; i < num_classes; ++i)
    for (int j = 0; j < d; ++j) uweights.at(i, j) = (j == i ? 1.0 : 0.0) + 0.0;
  // cosine(uniform, e_i) identical for every i
  PrototypeSet uprotos;
  uprotos.bg = Value::zeros(1, d);
  uprotos.prototypes.push_back({0, 1, uniform});
  CHECK(proto_cosine_loss(uprotos, uweights, tau).item() ==
        doctest::Approx(std::log(static_cast<double>(num_classes))).epsilon(1e-9));

  // scaling a prototype leaves the loss unchanged
  Rng rng(66);
  Value w2 = randv(rng, num_classes, d);
  Value p = randv(rng, 1, d);
  PrototypeSet s1;
  s1.bg = Value::zeros(1, d);
  s1.prototypes.push_back({3, 1, p});
  Value p5 = scale(p, 5.0);
  PrototypeSet s2;
  s2.bg = Value::zeros(1, d);
  s2.prototypes.push_back({3, 1, p5});
  CHECK(proto_cosine_loss(s1, w2, tau).item() ==
        doctest::Approx(proto_cosine_loss(s2, w2, tau).item()).epsilon(1e-9));
}

namespace {

DetectionSet fake_detections(Rng& rng, int layers, int n, int c_max, bool grad = false) {
  DetectionSet det;
  for (int l = 0; l < layers; ++l) {
    det.scores.push_back(randv(rng, n, c_max, grad));
    det.boxes.push_back(sigmoid(randv(rng, n, 4, grad)));
  }
  return det;
}

}  // namespace

TEST_CASE("total_loss: perfect predictions cost nearly nothing") {
  int n = 4, c_max = 3;
  TargetSet targets;
  targets.entries.resize(n);
  targets.entries[0] = {1, {0.3, 0.3, 0.2, 0.2}};
  targets.entries[1] = {2, {0.7, 0.6, 0.2, 0.25}};

  DetectionSet det;
  Value scores = Value::full(n, c_max, -10.0);
  scores.at(0, 0) = 10.0;  // slot 1
  scores.at(1, 1) = 10.0;  // slot 2
  Value boxes = Value::full(n, 4, 0.5);
  for (int c = 0; c < 4; ++c) {
    boxes.at(0, c) = c == 0 ? 0.3 : c == 1 ? 0.3 : 0.2;
    boxes.at(1, c) = c == 0 ? 0.7 : c == 1 ? 0.6 : c == 2 ? 0.2 : 0.25;
  }
  det.scores.push_back(scores);
  det.boxes.push_back(boxes);

  LossConfig cfg;
  LossResult res = total_loss(det, targets, nullptr, nullptr, cfg);
  CHECK(res.breakdown.l1 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.breakdown.giou == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.breakdown.cls < 1e-6);
  CHECK(res.assignments[0].sigma[0] == 0);
  CHECK(res.assignments[0].sigma[1] == 1);
}

TEST_CASE("total_loss: empty targets charge only the all-negative focal term") {
  Rng rng(67);
  int n = 5, c_max = 3;
  DetectionSet det = fake_detections(rng, 2, n, c_max);
  TargetSet targets;
  targets.entries.resize(n);
  LossConfig cfg;
  LossResult res = total_loss(det, targets, nullptr, nullptr, cfg);
  CHECK(res.breakdown.l1 == 0.0);
  CHECK(res.breakdown.giou == 0.0);
  CHECK(res.breakdown.cls > 0.0);
  double manual = 0.0;
  for (int l = 0; l < 2; ++l)
    manual += cfg.weights.cls *
              focal_loss(det.scores[l], std::vector<double>(n * c_max, 0.0), cfg.focal_alpha,
                         cfg.focal_gamma)
                  .item();
  CHECK(res.breakdown.total == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("total_loss: two-query case equals the hand-assembled composition") {
  Rng rng(68);
  int n = 2, c_max = 2;
  DetectionSet det = fake_detections(rng, 1, n, c_max);
  TargetSet targets;
  targets.entries = {{1, {0.4, 0.4, 0.3, 0.3}}, {0, {}}};
  LossConfig cfg;
  LossResult res = total_loss(det, targets, nullptr, nullptr, cfg);

  // handmade: hungarian over the matching cost, then each component op
  auto cost = matching_cost(det.scores[0], det.boxes[0], targets, cfg.weights);
  Assignment assign = hungarian(cost, n);
  std::vector<double> labels(n * c_max, 0.0);
  labels[static_cast<size_t>(assign.sigma[0]) * c_max + 0] = 1.0;
  double manual =
      cfg.weights.cls *
          focal_loss(det.scores[0], labels, cfg.focal_alpha, cfg.focal_gamma).item() +
      cfg.weights.l1 *
          l1_loss_matched(det.boxes[0], {assign.sigma[0]}, {targets.entries[0].box}).item() +
      cfg.weights.giou *
          giou_loss_matched(det.boxes[0], {assign.sigma[0]}, {targets.entries[0].box}).item();
  CHECK(res.breakdown.total == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("total_loss: invariant under target order and prediction order permutations") {
  Rng rng(69);
  int n = 6, c_max = 4;
  LossConfig cfg;
  for (int t = 0; t < 10; ++t) {
    DetectionSet det = fake_detections(rng, 2, n, c_max);
    TargetSet targets;
    targets.entries.resize(n);
    targets.entries[0] = {1, {0.3, 0.3, 0.2, 0.2}};
    targets.entries[1] = {3, {0.6, 0.7, 0.25, 0.2}};
    targets.entries[2] = {2, {0.8, 0.2, 0.15, 0.2}};
    double base = total_loss(det, targets, nullptr, nullptr, cfg).breakdown.total;

    // target order
    TargetSet shuffled;
    shuffled.entries = {targets.entries[4], targets.entries[2], targets.entries[0],
                        targets.entries[5], targets.entries[1], targets.entries[3]};
    double t_perm = total_loss(det, shuffled, nullptr, nullptr, cfg).breakdown.total;
    CHECK(std::fabs(t_perm - base) <= 1e-9);

    // prediction order (rows of scores and boxes permuted together)
    std::vector<int> perm{5, 2, 0, 4, 1, 3};
    DetectionSet pdet;
    for (int l = 0; l < 2; ++l) {
      pdet.scores.push_back(gather_rows(det.scores[l], perm));
      pdet.boxes.push_back(gather_rows(det.boxes[l], perm));
    }
    double p_perm = total_loss(pdet, targets, nullptr, nullptr, cfg).breakdown.total;
    CHECK(std::fabs(p_perm - base) <= 1e-9);
  }
}

TEST_CASE("total_loss: components stay non-negative and the breakdown adds up") {
  Rng rng(70);
  LossConfig cfg;
  for (int t = 0; t < 20; ++t) {
    int n = 5, c_max = 3;
    DetectionSet det = fake_detections(rng, 3, n, c_max);
    TargetSet targets;
    targets.entries.resize(n);
    targets.entries[0] = {1 + static_cast<int>(rng.uniform_int(0, c_max - 1)),
                          {0.5, 0.5, 0.3, 0.3}};
    LossResult res = total_loss(det, targets, nullptr, nullptr, cfg);
    CHECK(res.breakdown.cls >= 0.0);
    CHECK(res.breakdown.l1 >= 0.0);
    CHECK(res.breakdown.giou >= 0.0);
    double layer_sum = 0.0;
    for (double v : res.breakdown.per_layer) layer_sum += v;
    CHECK(res.breakdown.total ==
          doctest::Approx(layer_sum + res.breakdown.proto_cos).epsilon(1e-9));
  }
}

TEST_CASE("total_loss is differentiable along the logit and box paths") {
  Rng rng(71);
  int n = 3, c_max = 2;
  Value score_param = randv(rng, n, c_max, true);
  Value box_param = randv(rng, n, 4, true);
  TargetSet targets;
  targets.entries.resize(n);
  targets.entries[0] = {1, {0.35, 0.45, 0.25, 0.3}};
  targets.entries[1] = {2, {0.7, 0.3, 0.2, 0.25}};
  LossConfig cfg;
  auto forward = [&]() {
    DetectionSet det;
    det.scores.push_back(scale(score_param, 1.0));
    det.boxes.push_back(sigmoid(box_param));
    return total_loss(det, targets, nullptr, nullptr, cfg).loss;
  };
  auto rep = grad_check_inputs({score_param, box_param}, forward, 1e-5, 1e-3);
  CHECK(rep.max_rel_err <= 1e-3);
}
