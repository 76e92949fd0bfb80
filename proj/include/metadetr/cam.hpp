#pragma once
#include <string>
#include <vector>

#include "metadetr/attention.hpp"
#include "metadetr/backbone.hpp"
#include "metadetr/encodings.hpp"

namespace metadetr {

struct Prototype {
  int class_id = -1;
  int slot = 0;  // 1..C within the episode
  Value vector;  // 1 x d
};

struct PrototypeSet {
  std::vector<Prototype> prototypes;  // slots 1..C in order
  Value bg;                           // 1 x d, learned background prototype
  const TaskEncodingTable* encodings = nullptr;

  int c() const { return static_cast<int>(prototypes.size()); }
  // slot -> class id (slot 0 is background, mapped to -1)
  int class_of_slot(int slot) const;
};

struct MatchOutput {
  Value features;      // HW x d, aggregated query features after the FFN
  Value coefficients;  // HW x (C+1), matching coefficients incl. background
  Value matched_feat;  // HW x d, feature-matching branch before the FFN
  Value matched_enc;   // HW x d, encoding-matching branch before the FFN
};

// RoIAlign followed by average pooling: a P x P bin grid with sub-samples
// per bin, bilinearly interpolated between cell centers and averaged into a
// single d-vector. Boxes at or below one feature cell in area pool from the
// nearest cell; strictly smaller ones are reported through `degenerate`.
Value roi_align_pool(const FeatureMap& fm, const Box& box, int grid = 3, int samples = 2,
                     bool* degenerate = nullptr);

// Matches query features against all support prototypes (plus the learned
// background prototype) at once and mixes in their task encodings, yielding
// class-agnostic features for the detection transformer.
class Cam {
 public:
  Cam() = default;
  Cam(ParamStore& store, const std::string& prefix, int d, int heads, int ffn_hidden, Rng& rng);

  // One weight-shared attention layer applied to query and support features
  // alike, mapping both into the common matching space.
  Value shared_encode(const Value& x) const;

  MatchOutput match(const Value& query, const PrototypeSet& protos) const;

  Value bg_prototype() const { return bg_proto_; }
  int dim() const { return dim_; }

 private:
  int dim_ = 0;
  MultiHeadAttention shared_attn_;
  LayerNorm shared_norm_;
  Value proj_;      // d x d shared projection for queries and prototypes
  Value bg_proto_;  // 1 x d
  FeedForward ffn_;
  LayerNorm out_norm_;
};

}  // namespace metadetr
