#include "metadetr/backbone.hpp"

#include <cmath>

#include "metadetr/ops.hpp"

namespace metadetr {

Backbone::Backbone(ParamStore& store, const std::string& prefix, const BackboneConfig& cfg,
                   Rng& rng)
    : cfg_(cfg) {
  int cin = 3;
  for (size_t i = 0; i < cfg.widths.size(); ++i) {
    int cout = cfg.widths[i];
    std::string p = prefix + ".block" + std::to_string(i);
    Block blk;
    blk.w = store.get_or_create(p + ".w", 9 * cin, cout, init_xavier(rng, 9 * cin, cout));
    blk.b = store.get_or_create(p + ".b", 1, cout, init_zeros());
    blk.norm = LayerNorm(store, p + ".ln", cout);
    blocks_.push_back(std::move(blk));
    cin = cout;
  }
  proj_w_ = store.get_or_create(prefix + ".proj.w", cin, cfg.out_dim,
                                init_xavier(rng, cin, cfg.out_dim));
  proj_b_ = store.get_or_create(prefix + ".proj.b", 1, cfg.out_dim, init_zeros());
}

FeatureMap Backbone::extract(const Image& img) const {
  check(img.channels == 3,
        "extract_features: expected 3 channels, got " + std::to_string(img.channels));
  check(img.height >= 32 && img.width >= 32, "extract_features: image smaller than 32 px");

  // Zero-pad right/bottom to a multiple of the total stride.
  int stride = cfg_.total_stride();
  int ph = (img.height + stride - 1) / stride * stride;
  int pw = (img.width + stride - 1) / stride * stride;
  std::vector<double> pixels(static_cast<size_t>(ph) * pw * 3, 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        pixels[(static_cast<size_t>(y) * pw + x) * 3 + c] = img.at(y, x, c) / 255.0;

  Value x = Value::from_data(ph * pw, 3, std::move(pixels));
  int h = ph, w = pw;
  for (const auto& blk : blocks_) {
    Value cols = im2col(x, h, w, 3, 2, 1);
    x = blk.norm.apply(add(matmul(cols, blk.w), blk.b));
    x = relu(x);
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  FeatureMap fm;
  fm.h = h;
  fm.w = w;
  fm.d = cfg_.out_dim;
  fm.feat = add(matmul(x, proj_w_), proj_b_);
  return fm;
}

Value positional_encode(const FeatureMap& fm) {
  int d = fm.d;
  check(d % 4 == 0, "positional_encode: dimension " + std::to_string(d) + " not divisible by 4");
  int half = d / 2;
  Value out = Value::zeros(fm.h * fm.w, d);
  for (int y = 0; y < fm.h; ++y) {
    for (int x = 0; x < fm.w; ++x) {
      double* row = out.data().data() + (static_cast<size_t>(y) * fm.w + x) * d;
      for (int k = 0; k < half / 2; ++k) {
        double freq = std::pow(10000.0, 2.0 * k / half);
        row[2 * k] = std::sin(x / freq);
        row[2 * k + 1] = std::cos(x / freq);
        row[half + 2 * k] = std::sin(y / freq);
        row[half + 2 * k + 1] = std::cos(y / freq);
      }
    }
  }
  return out;
}

}  // namespace metadetr
