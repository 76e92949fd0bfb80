#include "metadetr/setloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "metadetr/ops.hpp"

namespace metadetr {

namespace {

// Jonker-Volgenant shortest augmenting path solve; fills the column
// assignment and the dual potentials.
void jv_solve(const std::vector<double>& cost, int n, std::vector<int>& row_of_col,
              std::vector<double>& u, std::vector<double>& v) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  u.assign(n + 1, 0.0);
  v.assign(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  row_of_col.assign(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) row_of_col[j - 1] = p[j] - 1;
}

// Kuhn augmenting-path feasibility: can rows [from, n) all be matched in
// `allowed` given the already-used columns?
bool rows_matchable(const std::vector<std::vector<int>>& allowed, int n, int from,
                    const std::vector<char>& col_used) {
  std::vector<int> match_col(n, -1);  // column -> row, for rows >= from
  std::vector<char> visited(n, 0);
  std::function<bool(int)> try_row = [&](int row) -> bool {
    for (int j : allowed[row]) {
      if (col_used[j] || visited[j]) continue;
      visited[j] = 1;
      if (match_col[j] < 0 || try_row(match_col[j])) {
        match_col[j] = row;
        return true;
      }
    }
    return false;
  };
  for (int row = from; row < n; ++row) {
    std::fill(visited.begin(), visited.end(), 0);
    if (!try_row(row)) return false;
  }
  return true;
}

}  // namespace

Assignment hungarian(const std::vector<double>& cost, int n) {
  check(n >= 1, "hungarian: empty cost matrix");
  check(cost.size() == static_cast<size_t>(n) * n,
        "hungarian: cost matrix is not square, " + std::to_string(cost.size()) +
            " entries for n = " + std::to_string(n));
  double max_abs = 0.0;
  for (double c : cost) {
    check(std::isfinite(c), "hungarian: non-finite cost entry");
    max_abs = std::max(max_abs, std::fabs(c));
  }

  std::vector<int> row_of_col;
  std::vector<double> u, v;
  jv_solve(cost, n, row_of_col, u, v);

  // Edges tight against the dual certificate carry every optimal
  // assignment; pick the lexicographically smallest matching among them.
  double tol = 1e-9 * (1.0 + max_abs);
  std::vector<std::vector<int>> allowed(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (cost[static_cast<size_t>(i) * n + j] - u[i + 1] - v[j + 1] <= tol)
        allowed[i].push_back(j);

  Assignment out;
  out.sigma.assign(n, -1);
  std::vector<char> col_used(n, 0);
  for (int i = 0; i < n; ++i) {
    bool fixed = false;
    for (int j : allowed[i]) {
      if (col_used[j]) continue;
      col_used[j] = 1;
      if (rows_matchable(allowed, n, i + 1, col_used)) {
        out.sigma[i] = j;
        fixed = true;
        break;
      }
      col_used[j] = 0;
    }
    check(fixed, "hungarian: tight-edge matching failed (internal)");
  }
  for (int i = 0; i < n; ++i) out.total_cost += cost[static_cast<size_t>(i) * n + out.sigma[i]];
  return out;
}

double focal_term(double logit, bool positive, double alpha, double gamma) {
  double p = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit))
                        : std::exp(logit) / (1.0 + std::exp(logit));
  double log_p = logit >= 0 ? -std::log1p(std::exp(-logit)) : logit - std::log1p(std::exp(logit));
  double log_1mp = -logit >= 0 ? -std::log1p(std::exp(logit))
                               : -logit - std::log1p(std::exp(-logit));
  if (positive) return -alpha * std::pow(1.0 - p, gamma) * log_p;
  return -(1.0 - alpha) * std::pow(p, gamma) * log_1mp;
}

std::vector<double> matching_cost(const Value& scores, const Value& boxes,
                                  const TargetSet& targets, const CostWeights& w) {
  int n = scores.rows();
  check(boxes.rows() == n && boxes.cols() == 4, "matching_cost: prediction shape mismatch");
  check(targets.size() == n, "matching_cost: need exactly N targets, got " +
                                 std::to_string(targets.size()) + " for N = " + std::to_string(n));
  check(w.cls >= 0 && w.l1 >= 0 && w.giou >= 0, "matching_cost: weights must be non-negative");
  std::vector<double> cost(static_cast<size_t>(n) * n, 0.0);
  constexpr double alpha = 0.25, gamma = 2.0;
  for (int i = 0; i < n; ++i) {
    const TargetEntry& t = targets.entries[i];
    if (!t.has_object()) continue;  // the indicator zeroes the whole row
    check(t.label >= 1 && t.label <= scores.cols(),
          "matching_cost: target label " + std::to_string(t.label) + " outside slot range");
    int col = t.label - 1;
    for (int j = 0; j < n; ++j) {
      double logit = scores.at(j, col);
      // focal-style classification cost on the target slot's probability
      double cls = focal_term(logit, true, alpha, gamma) - focal_term(logit, false, alpha, gamma);
      Box pb{boxes.at(j, 0), boxes.at(j, 1), boxes.at(j, 2), boxes.at(j, 3)};
      double l1 = std::fabs(pb.cx - t.box.cx) + std::fabs(pb.cy - t.box.cy) +
                  std::fabs(pb.w - t.box.w) + std::fabs(pb.h - t.box.h);
      cost[static_cast<size_t>(i) * n + j] =
          w.cls * cls + w.l1 * l1 + w.giou * (1.0 - giou(pb, t.box));
    }
  }
  return cost;
}

Value focal_loss(const Value& logits, const std::vector<double>& labels, double alpha,
                 double gamma) {
  check(alpha > 0.0 && alpha < 1.0, "focal_loss: alpha must be in (0, 1)");
  check(gamma >= 0.0, "focal_loss: gamma must be non-negative");
  check(labels.size() == logits.size(), "focal_loss: label matrix shape mismatch");
  for (double y : labels)
    check(y == 0.0 || y == 1.0, "focal_loss: labels must be 0 or 1");
  Value y = Value::from_data(logits.rows(), logits.cols(), labels);
  Value not_y = add_const(neg(y), 1.0);
  Value pos = scale(mul(pow_const(sigmoid(neg(logits)), gamma), neg(log_sigmoid(logits))), alpha);
  Value negt = scale(mul(pow_const(sigmoid(logits), gamma), neg(log_sigmoid(neg(logits)))),
                     1.0 - alpha);
  return mean_all(add(mul(y, pos), mul(not_y, negt)));
}

double giou(const Box& a, const Box& b) {
  check(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0, "giou: boxes must have positive extents");
  double inter_x0 = std::max(a.x0(), b.x0());
  double inter_y0 = std::max(a.y0(), b.y0());
  double inter_x1 = std::min(a.x1(), b.x1());
  double inter_y1 = std::min(a.y1(), b.y1());
  double inter = std::max(0.0, inter_x1 - inter_x0) * std::max(0.0, inter_y1 - inter_y0);
  double uni = a.area() + b.area() - inter;
  double hull = (std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0())) *
                (std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0()));
  return inter / uni - (hull - uni) / hull;
}

namespace {

struct BoxCols {
  Value x0, y0, x1, y1, w, h;
};

BoxCols split_boxes(const Value& b) {
  BoxCols c;
  Value cx = slice_cols(b, 0, 1);
  Value cy = slice_cols(b, 1, 1);
  c.w = slice_cols(b, 2, 1);
  c.h = slice_cols(b, 3, 1);
  Value hw = scale(c.w, 0.5);
  Value hh = scale(c.h, 0.5);
  c.x0 = sub(cx, hw);
  c.y0 = sub(cy, hh);
  c.x1 = add(cx, hw);
  c.y1 = add(cy, hh);
  return c;
}

Value const_col(const std::vector<Box>& boxes, double Box::*field) {
  std::vector<double> d;
  d.reserve(boxes.size());
  for (const auto& b : boxes) d.push_back(b.*field);
  return Value::from_data(static_cast<int>(boxes.size()), 1, std::move(d));
}

}  // namespace

Value l1_loss_matched(const Value& boxes, const std::vector<int>& pred_idx,
                      const std::vector<Box>& targets) {
  check(pred_idx.size() == targets.size() && !targets.empty(),
        "l1_loss_matched: index/target mismatch");
  Value pred = gather_rows(boxes, pred_idx);
  std::vector<double> t;
  t.reserve(targets.size() * 4);
  for (const auto& b : targets) {
    t.push_back(b.cx);
    t.push_back(b.cy);
    t.push_back(b.w);
    t.push_back(b.h);
  }
  Value tgt = Value::from_data(static_cast<int>(targets.size()), 4, std::move(t));
  // mean over pairs of the per-box coordinate sum
  return scale(sum_all(abs_op(sub(pred, tgt))), 1.0 / static_cast<double>(targets.size()));
}

Value giou_loss_matched(const Value& boxes, const std::vector<int>& pred_idx,
                        const std::vector<Box>& targets) {
  check(pred_idx.size() == targets.size() && !targets.empty(),
        "giou_loss_matched: index/target mismatch");
  for (const auto& b : targets)
    check(b.w > 0 && b.h > 0, "giou_loss_matched: target box with non-positive extent");
  BoxCols p = split_boxes(gather_rows(boxes, pred_idx));
  Value tx0 = const_col(targets, &Box::cx), ty0 = const_col(targets, &Box::cy);
  Value tw = const_col(targets, &Box::w), th = const_col(targets, &Box::h);
  Value thw = scale(tw, 0.5), thh = scale(th, 0.5);
  Value t_x0 = sub(tx0, thw), t_x1 = add(tx0, thw);
  Value t_y0 = sub(ty0, thh), t_y1 = add(ty0, thh);

  Value iw = relu(sub(min_elem(p.x1, t_x1), max_elem(p.x0, t_x0)));
  Value ih = relu(sub(min_elem(p.y1, t_y1), max_elem(p.y0, t_y0)));
  Value inter = mul(iw, ih);
  Value area_p = mul(p.w, p.h);
  Value area_t = mul(tw, th);
  Value uni = sub(add(area_p, area_t), inter);
  Value hull = mul(sub(max_elem(p.x1, t_x1), min_elem(p.x0, t_x0)),
                   sub(max_elem(p.y1, t_y1), min_elem(p.y0, t_y0)));
  Value g = sub(div(inter, uni), div(sub(hull, uni), hull));
  return mean_all(add_const(neg(g), 1.0));
}

Value proto_cosine_loss(const PrototypeSet& protos, const Value& class_weights, double tau) {
  check(tau > 0.0, "proto_cosine_loss: tau must be positive");
  check(protos.c() >= 1, "proto_cosine_loss: no prototypes");
  std::vector<Value> rows;
  std::vector<int> labels;
  for (const auto& p : protos.prototypes) {
    check(p.class_id >= 0 && p.class_id < class_weights.rows(),
          "proto_cosine_loss: class id " + std::to_string(p.class_id) +
              " outside the weight bank");
    rows.push_back(p.vector);
    labels.push_back(p.class_id);
  }
  Value stacked = concat_rows(rows);
  Value cosine = matmul(l2_normalize_rows(stacked), transpose(l2_normalize_rows(class_weights)));
  return softmax_xent_rows(scale(cosine, tau), labels);
}

LossResult total_loss(const DetectionSet& det, const TargetSet& targets,
                      const PrototypeSet* protos, const Value* class_weights,
                      const LossConfig& cfg) {
  check(det.layers() >= 1, "total_loss: no decoder layers");
  int n = det.scores[0].rows();
  int c_max = det.scores[0].cols();
  check(targets.size() == n, "total_loss: targets must be padded to N = " + std::to_string(n));

  LossResult result;
  Value loss = Value::scalar(0.0);
  for (int l = 0; l < det.layers(); ++l) {
    const Value& scores = det.scores[l];
    const Value& boxes = det.boxes[l];
    Assignment assign = hungarian(matching_cost(scores, boxes, targets, cfg.weights), n);

    std::vector<double> labels(static_cast<size_t>(n) * c_max, 0.0);
    std::vector<int> pred_idx;
    std::vector<Box> tgt_boxes;
    for (int i = 0; i < n; ++i) {
      const TargetEntry& t = targets.entries[i];
      if (!t.has_object()) continue;
      labels[static_cast<size_t>(assign.sigma[i]) * c_max + (t.label - 1)] = 1.0;
      pred_idx.push_back(assign.sigma[i]);
      tgt_boxes.push_back(t.box);
    }

    Value cls = scale(focal_loss(scores, labels, cfg.focal_alpha, cfg.focal_gamma),
                      cfg.weights.cls);
    Value layer_loss = cls;
    double l1_v = 0.0, giou_v = 0.0;
    if (!pred_idx.empty()) {
      Value l1 = scale(l1_loss_matched(boxes, pred_idx, tgt_boxes), cfg.weights.l1);
      Value gi = scale(giou_loss_matched(boxes, pred_idx, tgt_boxes), cfg.weights.giou);
      l1_v = l1.item();
      giou_v = gi.item();
      layer_loss = add(add(layer_loss, l1), gi);
    }
    result.breakdown.cls += cls.item();
    result.breakdown.l1 += l1_v;
    result.breakdown.giou += giou_v;
    result.breakdown.per_layer.push_back(cls.item() + l1_v + giou_v);
    result.assignments.push_back(std::move(assign));
    loss = add(loss, layer_loss);
  }

  if (protos != nullptr && class_weights != nullptr && cfg.proto_weight > 0.0) {
    Value pc = scale(proto_cosine_loss(*protos, *class_weights, cfg.proto_tau),
                     cfg.proto_weight);
    result.breakdown.proto_cos = pc.item();
    loss = add(loss, pc);
  }
  result.breakdown.total = loss.item();
  result.loss = loss;
  return result;
}

}  // namespace metadetr
