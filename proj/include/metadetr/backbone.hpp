#pragma once
#include <string>
#include <vector>

#include "metadetr/attention.hpp"
#include "metadetr/image.hpp"
#include "metadetr/param.hpp"

namespace metadetr {

struct FeatureMap {
  int h = 0;
  int w = 0;
  int d = 0;
  Value feat;  // (h*w) x d, spatial row index = y * w + x
};

struct BackboneConfig {
  std::vector<int> widths{16, 32, 64, 64};  // one 3x3 stride-2 block each
  int out_dim = 64;
  int total_stride() const { return 1 << static_cast<int>(widths.size()); }
};

// Small convolutional extractor shared by the query and support paths:
// stacked (3x3 conv stride 2, channel layer norm, relu) blocks and a final
// 1x1 projection to the model dimension. Convolutions run as im2col +
// matmul so the whole map stays on the differentiation tape.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore& store, const std::string& prefix, const BackboneConfig& cfg, Rng& rng);

  FeatureMap extract(const Image& img) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  struct Block {
    Value w;  // (3*3*cin) x cout
    Value b;  // 1 x cout
    LayerNorm norm;
  };
  std::vector<Block> blocks_;
  Value proj_w_, proj_b_;
};

// Parameter-free 2-D sinusoidal encoding: first d/2 channels encode x,
// the rest encode y, each half interleaving sin/cos over a geometric
// frequency ladder with base 10000. Requires d divisible by 4.
Value positional_encode(const FeatureMap& fm);

}  // namespace metadetr
