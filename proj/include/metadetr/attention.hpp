#pragma once
#include <string>

#include "metadetr/param.hpp"
#include "metadetr/value.hpp"

namespace metadetr {

struct Linear {
  Value w;  // in x out
  Value b;  // 1 x out

  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
  Value apply(const Value& x) const;
};

struct LayerNorm {
  Value gamma;  // 1 x d
  Value beta;   // 1 x d

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, int d);
  Value apply(const Value& x) const;
};

// Scaled-dot-product attention with h heads over d channels. The context
// product uses order-free accumulation so outputs are bitwise invariant
// under a permutation of the key/value rows.
struct MultiHeadAttention {
  int heads = 1;
  int dim = 0;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& prefix, int d, int heads, Rng& rng);
  Value apply(const Value& q_in, const Value& k_in, const Value& v_in) const;
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& prefix, int d, int hidden, Rng& rng);
  Value apply(const Value& x) const;
};

}  // namespace metadetr
