#include "metadetr/attention.hpp"

#include <cmath>

#include "metadetr/ops.hpp"

namespace metadetr {

Linear::Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
  w = store.get_or_create(prefix + ".w", in, out, init_xavier(rng, in, out));
  b = store.get_or_create(prefix + ".b", 1, out, init_zeros());
}

Value Linear::apply(const Value& x) const { return add(matmul(x, w), b); }

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, int d) {
  gamma = store.get_or_create(prefix + ".gamma", 1, d, init_const(1.0));
  beta = store.get_or_create(prefix + ".beta", 1, d, init_zeros());
}

Value LayerNorm::apply(const Value& x) const {
  return add(mul(layer_norm_rows(x), gamma), beta);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& prefix, int d,
                                       int h, Rng& rng)
    : heads(h), dim(d) {
  check(d % h == 0, "attention: dimension " + std::to_string(d) + " not divisible by " +
                        std::to_string(h) + " heads");
  wq = Linear(store, prefix + ".wq", d, d, rng);
  wk = Linear(store, prefix + ".wk", d, d, rng);
  wv = Linear(store, prefix + ".wv", d, d, rng);
  wo = Linear(store, prefix + ".wo", d, d, rng);
}

Value MultiHeadAttention::apply(const Value& q_in, const Value& k_in, const Value& v_in) const {
  check(q_in.cols() == dim && k_in.cols() == dim && v_in.cols() == dim,
        "attention: input width does not match model dimension");
  check(k_in.rows() == v_in.rows(), "attention: key/value row mismatch");
  int dh = dim / heads;
  Value q = wq.apply(q_in);
  Value k = wk.apply(k_in);
  Value v = wv.apply(v_in);
  std::vector<Value> ctx;
  ctx.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Value qh = slice_cols(q, h * dh, dh);
    Value kh = slice_cols(k, h * dh, dh);
    Value vh = slice_cols(v, h * dh, dh);
    Value attn = softmax_rows(matmul(qh, transpose(kh)), 1.0 / std::sqrt(dh));
    ctx.push_back(mix_rows(attn, vh));
  }
  return wo.apply(concat_cols(ctx));
}

FeedForward::FeedForward(ParamStore& store, const std::string& prefix, int d, int hidden,
                         Rng& rng) {
  fc1 = Linear(store, prefix + ".fc1", d, hidden, rng);
  fc2 = Linear(store, prefix + ".fc2", hidden, d, rng);
}

Value FeedForward::apply(const Value& x) const { return fc2.apply(relu(fc1.apply(x))); }

}  // namespace metadetr
