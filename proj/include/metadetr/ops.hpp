#pragma once
#include <vector>

#include "metadetr/value.hpp"

namespace metadetr {

// Differentiable operations over Value. Shapes are validated up front and
// mismatches raise std::invalid_argument naming both operands. Binary
// elementwise ops broadcast the right operand when it is a 1 x n row or a
// 1 x 1 scalar; anything else must be expanded explicitly.

Value matmul(const Value& a, const Value& b);
// Matrix product whose accumulation depends only on the multiset of
// addends, so the result is bitwise invariant under a simultaneous
// permutation of a's columns and b's rows. Used where that invariance is a
// contract (attention context, prototype aggregation).
Value mix_rows(const Value& coeffs, const Value& rowsv);
Value transpose(const Value& a);

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);
Value scale(const Value& a, double s);
Value add_const(const Value& a, double c);
Value neg(const Value& a);

Value relu(const Value& a);
Value sigmoid(const Value& a);
Value log_sigmoid(const Value& a);
Value exp_op(const Value& a);
Value log_op(const Value& a);
Value abs_op(const Value& a);
Value pow_const(const Value& a, double p);
Value square(const Value& a);

Value min_elem(const Value& a, const Value& b);
Value max_elem(const Value& a, const Value& b);

// softmax(scale * x) per row, max-subtracted; row sums are 1 and the
// denominator accumulation is order-free (see mix_rows).
Value softmax_rows(const Value& a, double scale);
// Per-row standardization (x - mean) / sqrt(var + eps); affine terms are
// composed outside with row-broadcast mul/add.
Value layer_norm_rows(const Value& a, double eps = 1e-5);
Value l2_normalize_rows(const Value& a, double eps = 1e-8);

// axis 0 collapses rows (m x n -> 1 x n), axis 1 collapses columns.
Value mean_pool(const Value& a, int axis);
Value sum_all(const Value& a);
Value mean_all(const Value& a);

Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value slice_rows(const Value& a, int start, int len);
Value slice_cols(const Value& a, int start, int len);
Value reshape(const Value& a, int rows, int cols);
// Rows picked by index, duplicates allowed; gradient scatters back.
Value gather_rows(const Value& a, const std::vector<int>& idx);
// 1 x cols weighted combination of rows: sum_i w[i] * a[idx[i], :].
Value weighted_row_sum(const Value& a, const std::vector<int>& idx,
                       const std::vector<double>& w);

// Unfolds k x k patches of an h x w x c feature map (stored as (h*w) x c)
// into rows of a ((ho*wo) x (k*k*c)) matrix, zero padding outside.
// ho = (h + 2*pad - k) / stride + 1 and likewise wo.
Value im2col(const Value& a, int h, int w, int k, int stride, int pad);

// Mean over rows of (logsumexp(row) - row[label]); gradient is
// (softmax - onehot) / rows.
Value softmax_xent_rows(const Value& logits, const std::vector<int>& labels);

}  // namespace metadetr
