#include "metadetr/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "metadetr/detector.hpp"
#include "metadetr/evalmetrics.hpp"
#include "metadetr/grad_check.hpp"
#include "metadetr/ops.hpp"
#include "metadetr/setloss.hpp"

namespace metadetr {

namespace {

Value rand_mat(Rng& rng, int r, int c, double stddev = 1.0) {
  Value v = Value::zeros(r, c, /*requires_grad=*/true);
  for (auto& x : v.data()) x = rng.normal(0.0, stddev);
  return v;
}

// Entries kept clear of |x| < margin, for ops with kinks at zero.
Value rand_mat_away_from(Rng& rng, int r, int c, double margin) {
  Value v = Value::zeros(r, c, true);
  for (auto& x : v.data()) {
    double m = rng.normal();
    x = (m >= 0 ? 1.0 : -1.0) * (margin + std::fabs(m));
  }
  return v;
}

Value rand_positive(Rng& rng, int r, int c) {
  Value v = Value::zeros(r, c, true);
  for (auto& x : v.data()) x = 0.2 + std::fabs(rng.normal());
  return v;
}

struct OpCase {
  std::string name;
  std::function<std::vector<Value>(Rng&)> inputs;
  std::function<Value(const std::vector<Value>&)> op;
};

std::vector<OpCase> op_cases() {
  auto two = [](int r1, int c1, int r2, int c2) {
    return [=](Rng& rng) {
      return std::vector<Value>{rand_mat(rng, r1, c1), rand_mat(rng, r2, c2)};
    };
  };
  auto one = [](int r, int c) {
    return [=](Rng& rng) { return std::vector<Value>{rand_mat(rng, r, c)}; };
  };
  std::vector<OpCase> cases;
  cases.push_back({"matmul", two(3, 4, 4, 2),
                   [](const std::vector<Value>& in) { return matmul(in[0], in[1]); }});
  cases.push_back({"mix_rows", two(3, 4, 4, 2),
                   [](const std::vector<Value>& in) { return mix_rows(in[0], in[1]); }});
  cases.push_back({"transpose", one(3, 5),
                   [](const std::vector<Value>& in) { return transpose(in[0]); }});
  cases.push_back({"add", two(4, 3, 4, 3),
                   [](const std::vector<Value>& in) { return add(in[0], in[1]); }});
  cases.push_back({"add_row_bcast", two(4, 3, 1, 3),
                   [](const std::vector<Value>& in) { return add(in[0], in[1]); }});
  cases.push_back({"add_scalar_bcast", two(4, 3, 1, 1),
                   [](const std::vector<Value>& in) { return add(in[0], in[1]); }});
  cases.push_back({"sub", two(4, 3, 4, 3),
                   [](const std::vector<Value>& in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul", two(4, 3, 4, 3),
                   [](const std::vector<Value>& in) { return mul(in[0], in[1]); }});
  cases.push_back({"mul_row_bcast", two(4, 3, 1, 3),
                   [](const std::vector<Value>& in) { return mul(in[0], in[1]); }});
  cases.push_back({"div",
                   [](Rng& rng) {
                     return std::vector<Value>{rand_mat(rng, 4, 3),
                                               rand_mat_away_from(rng, 4, 3, 0.3)};
                   },
                   [](const std::vector<Value>& in) { return div(in[0], in[1]); }});
  cases.push_back({"scale", one(4, 3),
                   [](const std::vector<Value>& in) { return scale(in[0], -1.7); }});
  cases.push_back({"add_const", one(4, 3),
                   [](const std::vector<Value>& in) { return add_const(in[0], 0.4); }});
  cases.push_back({"relu",
                   [](Rng& rng) {
                     return std::vector<Value>{rand_mat_away_from(rng, 4, 4, 1e-3)};
                   },
                   [](const std::vector<Value>& in) { return relu(in[0]); }});
  cases.push_back({"sigmoid", one(4, 4),
                   [](const std::vector<Value>& in) { return sigmoid(in[0]); }});
  cases.push_back({"log_sigmoid", one(4, 4),
                   [](const std::vector<Value>& in) { return log_sigmoid(in[0]); }});
  cases.push_back({"exp", one(3, 3),
                   [](const std::vector<Value>& in) { return exp_op(in[0]); }});
  cases.push_back({"log",
                   [](Rng& rng) { return std::vector<Value>{rand_positive(rng, 3, 3)}; },
                   [](const std::vector<Value>& in) { return log_op(in[0]); }});
  cases.push_back({"abs",
                   [](Rng& rng) {
                     return std::vector<Value>{rand_mat_away_from(rng, 4, 4, 1e-3)};
                   },
                   [](const std::vector<Value>& in) { return abs_op(in[0]); }});
  cases.push_back({"pow_const",
                   [](Rng& rng) { return std::vector<Value>{rand_positive(rng, 3, 4)}; },
                   [](const std::vector<Value>& in) { return pow_const(in[0], 2.0); }});
  cases.push_back({"square", one(3, 4),
                   [](const std::vector<Value>& in) { return square(in[0]); }});
  cases.push_back({"min_elem",
                   [](Rng& rng) {
                     Value a = rand_mat(rng, 4, 3);
                     Value b = Value::zeros(4, 3, true);
                     for (size_t i = 0; i < b.data().size(); ++i)
                       b.data()[i] = a.data()[i] + (rng.uniform01() < 0.5 ? -1 : 1) *
                                                       (0.01 + std::fabs(rng.normal()));
                     return std::vector<Value>{a, b};
                   },
                   [](const std::vector<Value>& in) { return min_elem(in[0], in[1]); }});
  cases.push_back({"max_elem",
                   [](Rng& rng) {
                     Value a = rand_mat(rng, 4, 3);
                     Value b = Value::zeros(4, 3, true);
                     for (size_t i = 0; i < b.data().size(); ++i)
                       b.data()[i] = a.data()[i] + (rng.uniform01() < 0.5 ? -1 : 1) *
                                                       (0.01 + std::fabs(rng.normal()));
                     return std::vector<Value>{a, b};
                   },
                   [](const std::vector<Value>& in) { return max_elem(in[0], in[1]); }});
  cases.push_back({"softmax_rows", one(4, 5), [](const std::vector<Value>& in) {
                     return softmax_rows(in[0], 0.7);
                   }});
  cases.push_back({"layer_norm_rows", one(4, 6), [](const std::vector<Value>& in) {
                     return layer_norm_rows(in[0]);
                   }});
  cases.push_back({"l2_normalize_rows", one(4, 6), [](const std::vector<Value>& in) {
                     return l2_normalize_rows(in[0]);
                   }});
  cases.push_back({"mean_pool_rows", one(5, 4),
                   [](const std::vector<Value>& in) { return mean_pool(in[0], 0); }});
  cases.push_back({"mean_pool_cols", one(5, 4),
                   [](const std::vector<Value>& in) { return mean_pool(in[0], 1); }});
  cases.push_back({"sum_all", one(4, 4),
                   [](const std::vector<Value>& in) { return sum_all(in[0]); }});
  cases.push_back({"mean_all", one(4, 4),
                   [](const std::vector<Value>& in) { return mean_all(in[0]); }});
  cases.push_back({"concat_rows", two(3, 4, 2, 4), [](const std::vector<Value>& in) {
                     return concat_rows({in[0], in[1]});
                   }});
  cases.push_back({"concat_cols", two(3, 4, 3, 2), [](const std::vector<Value>& in) {
                     return concat_cols({in[0], in[1]});
                   }});
  cases.push_back({"slice_rows", one(6, 4),
                   [](const std::vector<Value>& in) { return slice_rows(in[0], 1, 3); }});
  cases.push_back({"slice_cols", one(4, 6),
                   [](const std::vector<Value>& in) { return slice_cols(in[0], 2, 3); }});
  cases.push_back({"reshape", one(4, 6),
                   [](const std::vector<Value>& in) { return reshape(in[0], 3, 8); }});
  cases.push_back({"gather_rows", one(5, 4), [](const std::vector<Value>& in) {
                     return gather_rows(in[0], {4, 0, 2, 0});
                   }});
  cases.push_back({"weighted_row_sum", one(5, 4), [](const std::vector<Value>& in) {
                     return weighted_row_sum(in[0], {0, 2, 3}, {0.2, 0.5, 0.3});
                   }});
  cases.push_back({"im2col", one(16, 3), [](const std::vector<Value>& in) {
                     return im2col(in[0], 4, 4, 3, 2, 1);
                   }});
  cases.push_back({"softmax_xent_rows", one(4, 5), [](const std::vector<Value>& in) {
                     return softmax_xent_rows(in[0], {1, 0, 4, 2});
                   }});
  cases.push_back({"focal_loss",
                   [](Rng& rng) { return std::vector<Value>{rand_mat(rng, 4, 5)}; },
                   [](const std::vector<Value>& in) {
                     std::vector<double> labels(20, 0.0);
                     labels[2] = labels[7] = labels[13] = 1.0;
                     return focal_loss(in[0], labels, 0.25, 2.0);
                   }});
  cases.push_back(
      {"giou_l1_matched",
       [](Rng& rng) {
         Value logits = rand_mat(rng, 4, 4, 0.5);
         return std::vector<Value>{logits};
       },
       [](const std::vector<Value>& in) {
         Value boxes = sigmoid(in[0]);
         std::vector<Box> tgts{{0.4, 0.4, 0.3, 0.25}, {0.7, 0.6, 0.2, 0.3}};
         return add(giou_loss_matched(boxes, {0, 2}, tgts), l1_loss_matched(boxes, {0, 2}, tgts));
       }});
  return cases;
}

}  // namespace

CheckResult check_op_gradients() {
  CheckResult res{"op-gradients", true, ""};
  Rng rng(20240811);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& c : op_cases()) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Value> inputs = c.inputs(rng);
      Value probe = c.op(inputs);
      Value proj = rand_mat(rng, probe.rows(), probe.cols());
      proj.node()->requires_grad = false;
      auto forward = [&]() { return sum_all(mul(c.op(inputs), proj)); };
      GradCheckReport rep = grad_check_inputs(inputs, forward, 1e-5, 1e-3);
      if (rep.max_rel_err > worst) {
        worst = rep.max_rel_err;
        worst_op = c.name;
      }
    }
  }
  res.pass = worst <= 1e-3;
  res.detail = "max rel err " + std::to_string(worst) + " (" + worst_op + ")";
  return res;
}

CheckResult check_model_gradients() {
  CheckResult res{"model-gradients", true, ""};
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.num_queries = 5;
  cfg.c_max = 3;
  cfg.ffn_mult = 2;
  cfg.num_classes = 4;
  cfg.backbone.widths = {4, 6, 8, 16};
  cfg.backbone.out_dim = 16;
  cfg.init_seed = 100;
  Model model = Model::build(cfg);

  // Hand-built episode: a 64 x 64 query with two blobs and two supports.
  Rng rng(5);
  auto make_image = [&](int cx, int cy, int size, uint8_t r, uint8_t g, uint8_t b) {
    Image img = Image::filled(64, 64, 140, 140, 140);
    for (auto& px : img.data) px = static_cast<uint8_t>(px + rng.uniform_int(-9, 9));
    for (int y = cy - size / 2; y < cy + size / 2; ++y)
      for (int x = cx - size / 2; x < cx + size / 2; ++x) {
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
      }
    return img;
  };
  Image query = make_image(20, 24, 14, 220, 40, 40);
  Image support1 = make_image(40, 36, 16, 210, 50, 40);
  Image support2 = make_image(30, 30, 12, 40, 60, 210);
  Box sbox1{40.0 / 64, 36.0 / 64, 16.0 / 64, 16.0 / 64};
  Box sbox2{30.0 / 64, 30.0 / 64, 12.0 / 64, 12.0 / 64};

  TargetSet targets;
  targets.entries.resize(cfg.num_queries);
  targets.entries[0] = {1, {20.0 / 64, 24.0 / 64, 14.0 / 64, 14.0 / 64}};

  LossConfig loss_cfg;
  auto forward = [&]() {
    std::vector<std::pair<int, Value>> vecs;
    vecs.emplace_back(0, model.pool_support(support1, sbox1));
    vecs.emplace_back(2, model.pool_support(support2, sbox2));
    PrototypeSet protos = model.make_prototype_set(vecs);
    DetectionSet det = model.detect(query, protos);
    return total_loss(det, targets, &protos, &model.class_weights, loss_cfg).loss;
  };
  GradCheckReport rep = grad_check(model.store, forward, 1e-5, 1e-3);
  res.pass = rep.ok(1e-3);
  res.detail = "max rel err " + std::to_string(rep.max_rel_err) + " over " +
               std::to_string(model.store.scalar_count()) + " parameters";
  return res;
}

double brute_force_assignment(const std::vector<double>& cost, int n,
                              std::vector<int>* best_sigma) {
  check(n >= 1 && n <= 9, "brute_force_assignment: n out of range");
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_perm;
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost[static_cast<size_t>(i) * n + perm[i]];
    if (total < best) {  // lexicographic enumeration keeps the first optimum
      best = total;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (best_sigma) *best_sigma = best_perm;
  return best;
}

CheckResult check_hungarian_oracle(int trials_per_size) {
  CheckResult res{"hungarian-oracle", true, ""};
  Rng rng(424242);
  int checked = 0;
  for (int n = 2; n <= 7; ++n) {
    for (int t = 0; t < trials_per_size; ++t) {
      std::vector<double> cost(static_cast<size_t>(n) * n);
      for (auto& c : cost) c = rng.uniform(-5.0, 5.0);
      std::vector<int> oracle_sigma;
      double oracle = brute_force_assignment(cost, n, &oracle_sigma);
      Assignment a = hungarian(cost, n);
      if (a.sigma != oracle_sigma || a.total_cost != oracle) {
        res.pass = false;
        res.detail = "mismatch at n=" + std::to_string(n) + " trial " + std::to_string(t) +
                     ": got " + std::to_string(a.total_cost) + " want " + std::to_string(oracle);
        return res;
      }
      ++checked;
    }
  }
  res.detail = std::to_string(checked) + " matrices, exact sigma and cost agreement";
  return res;
}

CheckResult check_loss_oracles() {
  CheckResult res{"loss-oracles", true, ""};
  // focal at logit 0, positive label, alpha 0.25, gamma 2
  Value logit = Value::zeros(1, 1);
  double focal = focal_loss(logit, {1.0}, 0.25, 2.0).item();
  double focal_want = 0.043322;
  // GIoU of xyxy [0,0,2,2] vs [1,1,3,3]
  double g = giou({1, 1, 2, 2}, {2, 2, 2, 2});
  double g_want = -0.079365;
  // AP of {TP 0.9, FP 0.8, TP 0.7} with two ground truths
  std::map<int, std::vector<Box>> gts{{0, {{0.2, 0.2, 0.1, 0.1}, {0.7, 0.7, 0.1, 0.1}}}};
  std::vector<ScoredDet> dets{{0.9, 0, {0.2, 0.2, 0.1, 0.1}},
                              {0.8, 0, {0.5, 0.5, 0.05, 0.05}},
                              {0.7, 0, {0.7, 0.7, 0.1, 0.1}}};
  double ap = average_precision(dets, gts, 0.5);
  double ap_want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);

  bool ok_focal = std::fabs(focal - focal_want) <= 1e-6;
  bool ok_giou = std::fabs(g - g_want) <= 1e-6;
  bool ok_ap = std::fabs(ap - ap_want) <= 1e-6;
  res.pass = ok_focal && ok_giou && ok_ap;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "focal %.7f giou %.7f ap %.7f", focal, g, ap);
  res.detail = buf;
  return res;
}

CheckResult check_cam_algebra() {
  CheckResult res{"cam-algebra", true, ""};
  int d = 16, hw = 12, c = 3;
  ParamStore store;
  Rng rng(31);
  Cam cam(store, "cam", d, 2, 4 * d, rng);
  TaskEncodingTable table = build_table(5, d);

  // background encoding is exactly zero
  for (int j = 0; j < d; ++j)
    if (table.rows.at(0, j) != 0.0) {
      res.pass = false;
      res.detail = "background encoding not zero";
      return res;
    }

  Value query = rand_mat(rng, hw, d);
  std::vector<std::pair<int, Value>> vecs;
  for (int i = 0; i < c; ++i) vecs.emplace_back(i, rand_mat(rng, 1, d));
  PrototypeSet protos;
  protos.bg = cam.bg_prototype();
  protos.encodings = &table;
  int slot = 1;
  for (auto& [cid, v] : vecs) protos.prototypes.push_back({cid, slot++, v});

  MatchOutput mo = cam.match(query, protos);
  for (int i = 0; i < hw; ++i) {
    double s = 0.0;
    for (int j = 0; j <= c; ++j) s += mo.coefficients.at(i, j);
    if (std::fabs(s - 1.0) > 1e-9) {
      res.pass = false;
      res.detail = "coefficient row sum off by " + std::to_string(std::fabs(s - 1.0));
      return res;
    }
  }

  // permuting prototypes leaves the feature-matching branch bitwise equal
  PrototypeSet permuted;
  permuted.bg = protos.bg;
  permuted.encodings = &table;
  std::vector<int> order{2, 0, 1};
  slot = 1;
  for (int i : order)
    permuted.prototypes.push_back({vecs[i].first, slot++, vecs[i].second});
  MatchOutput mo_perm = cam.match(query, permuted);
  if (std::memcmp(mo.matched_feat.data().data(), mo_perm.matched_feat.data().data(),
                  mo.matched_feat.size() * sizeof(double)) != 0) {
    res.pass = false;
    res.detail = "feature matching not invariant under prototype permutation";
    return res;
  }
  // while the encoding branch is slot-bound and must differ
  if (std::memcmp(mo.matched_enc.data().data(), mo_perm.matched_enc.data().data(),
                  mo.matched_enc.size() * sizeof(double)) == 0) {
    res.pass = false;
    res.detail = "encoding matching unexpectedly permutation invariant";
    return res;
  }

  // all-zero query features null the feature-matching branch
  Value zero_query = Value::zeros(hw, d);
  MatchOutput mo_zero = cam.match(zero_query, protos);
  for (double v : mo_zero.matched_feat.data())
    if (v != 0.0) {
      res.pass = false;
      res.detail = "zero query did not produce zero matched features";
      return res;
    }
  res.detail = "row sums, permutation invariance, background encoding, zero query";
  return res;
}

std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> all;
  all.push_back(check_op_gradients());
  all.push_back(check_model_gradients());
  all.push_back(check_hungarian_oracle());
  all.push_back(check_loss_oracles());
  all.push_back(check_cam_algebra());
  return all;
}

}  // namespace metadetr
