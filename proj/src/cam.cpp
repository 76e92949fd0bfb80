#include "metadetr/cam.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "metadetr/ops.hpp"

namespace metadetr {

int PrototypeSet::class_of_slot(int slot) const {
  if (slot == 0) return -1;
  check(slot >= 1 && slot <= c(), "slot out of range: " + std::to_string(slot));
  return prototypes[slot - 1].class_id;
}

Value roi_align_pool(const FeatureMap& fm, const Box& box, int grid, int samples,
                     bool* degenerate) {
  check(box.w > 0 && box.h > 0, "roi_align_pool: box must have positive extent");
  double x0 = std::clamp(box.x0(), 0.0, 1.0);
  double y0 = std::clamp(box.y0(), 0.0, 1.0);
  double x1 = std::clamp(box.x1(), 0.0, 1.0);
  double y1 = std::clamp(box.y1(), 0.0, 1.0);
  check(x1 > x0 && y1 > y0, "roi_align_pool: box has no area inside the image");
  if (degenerate) *degenerate = false;

  double cells = (x1 - x0) * fm.w * (y1 - y0) * fm.h;
  if (cells <= 1.0 + 1e-12) {
    // Sub-cell region: a bilinear grid is meaningless at this resolution,
    // pool from the cell nearest to the box center.
    if (degenerate && cells < 1.0 - 1e-12) *degenerate = true;
    int cx = std::clamp(static_cast<int>((x0 + x1) / 2 * fm.w), 0, fm.w - 1);
    int cy = std::clamp(static_cast<int>((y0 + y1) / 2 * fm.h), 0, fm.h - 1);
    return gather_rows(fm.feat, {cy * fm.w + cx});
  }

  // Bilinear taps between cell centers (half-cell convention), clamped at
  // the borders, averaged over grid*grid bins with samples^2 points each.
  std::map<int, double> weight_of_cell;
  double bin_w = (x1 - x0) / grid;
  double bin_h = (y1 - y0) / grid;
  double norm = 1.0 / (grid * grid * samples * samples);
  for (int by = 0; by < grid; ++by) {
    for (int bx = 0; bx < grid; ++bx) {
      for (int sy = 0; sy < samples; ++sy) {
        for (int sx = 0; sx < samples; ++sx) {
          double px = x0 + bin_w * (bx + (sx + 0.5) / samples);
          double py = y0 + bin_h * (by + (sy + 0.5) / samples);
          double u = std::clamp(px * fm.w - 0.5, 0.0, fm.w - 1.0);
          double v = std::clamp(py * fm.h - 0.5, 0.0, fm.h - 1.0);
          int u0 = static_cast<int>(u);
          int v0 = static_cast<int>(v);
          int u1 = std::min(u0 + 1, fm.w - 1);
          int v1 = std::min(v0 + 1, fm.h - 1);
          double fu = u - u0, fv = v - v0;
          weight_of_cell[v0 * fm.w + u0] += norm * (1 - fu) * (1 - fv);
          weight_of_cell[v0 * fm.w + u1] += norm * fu * (1 - fv);
          weight_of_cell[v1 * fm.w + u0] += norm * (1 - fu) * fv;
          weight_of_cell[v1 * fm.w + u1] += norm * fu * fv;
        }
      }
    }
  }
  std::vector<int> idx;
  std::vector<double> w;
  for (auto& [cell, weight] : weight_of_cell) {
    idx.push_back(cell);
    w.push_back(weight);
  }
  return weighted_row_sum(fm.feat, idx, w);
}

Cam::Cam(ParamStore& store, const std::string& prefix, int d, int heads, int ffn_hidden,
         Rng& rng)
    : dim_(d) {
  shared_attn_ = MultiHeadAttention(store, prefix + ".shared_attn", d, heads, rng);
  shared_norm_ = LayerNorm(store, prefix + ".shared_ln", d);
  proj_ = store.get_or_create(prefix + ".proj", d, d, init_xavier(rng, d, d));
  bg_proto_ = store.get_or_create(prefix + ".bg_proto", 1, d, init_normal(rng, 0.02));
  ffn_ = FeedForward(store, prefix + ".ffn", d, ffn_hidden, rng);
  out_norm_ = LayerNorm(store, prefix + ".out_ln", d);
}

Value Cam::shared_encode(const Value& x) const {
  return shared_norm_.apply(add(x, shared_attn_.apply(x, x, x)));
}

MatchOutput Cam::match(const Value& query, const PrototypeSet& protos) const {
  int c = protos.c();
  check(c >= 1, "cam match: needs at least one support class (background-only matching)");
  check(protos.encodings != nullptr, "cam match: prototype set has no encoding table");
  check(c <= protos.encodings->c_max,
        "cam match: " + std::to_string(c) + " support classes exceed C_max = " +
            std::to_string(protos.encodings->c_max));
  check(query.cols() == dim_, "cam match: query width " + std::to_string(query.cols()) +
                                  " does not match model dimension " + std::to_string(dim_));

  // Slot 0 is the background prototype; slots 1..C follow episode order.
  std::vector<Value> rows{protos.bg};
  for (const auto& p : protos.prototypes) {
    check(p.vector.cols() == dim_, "cam match: prototype width mismatch");
    rows.push_back(p.vector);
  }
  Value support = concat_rows(rows);             // (C+1) x d
  Value qp = matmul(query, proj_);               // shared projection W
  Value sp = matmul(support, proj_);
  Value logits = matmul(qp, transpose(sp));      // HW x (C+1)
  Value coeff = softmax_rows(logits, 1.0 / std::sqrt(static_cast<double>(dim_)));
  Value filt = sigmoid(sp);                      // per-class feature filters
  Value qf = mul(mix_rows(coeff, filt), query);  // feature matching
  Value enc = slice_rows(protos.encodings->rows, 0, c + 1);
  Value qe = mix_rows(coeff, enc);               // encoding matching
  Value h = add(qf, qe);
  Value out = out_norm_.apply(add(h, ffn_.apply(h)));

  MatchOutput mo;
  mo.features = out;
  mo.coefficients = coeff;
  mo.matched_feat = qf;
  mo.matched_enc = qe;
  return mo;
}

}  // namespace metadetr
