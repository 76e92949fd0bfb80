#include "metadetr/ops.hpp"

#include <algorithm>
#include <cmath>

namespace metadetr {

namespace {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(int m, int k, int n, const double* A, const double* B, double* C) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = a[kk];
      const double* b = B + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(int m, int k, int n, const double* A, const double* B, double* C) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += a[kk] * b[kk];
      c[j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(int m, int k, int n, const double* A, const double* B, double* C) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    const double* b = B + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = a[kk];
      double* c = C + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

bool any_grad(const Value& a, const Value& b) {
  return a.requires_grad() || b.requires_grad();
}

void finish(const NodePtr& out, std::vector<NodePtr> parents,
            std::function<void(Node&, BackwardCtx&)> bp) {
  if (out->requires_grad) {
    out->parents = std::move(parents);
    out->backprop = std::move(bp);
  }
}

enum class Bcast { Same, Row, Scalar };

Bcast bcast_kind(const Value& a, const Value& b, const char* opname) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  fail(std::string(opname) + ": incompatible shapes " + shape_str(*a.node()) + " and " +
       shape_str(*b.node()));
}

// Reduction of an output-shaped gradient onto the (possibly broadcast)
// right operand.
void reduce_to_b(Bcast kind, int rows, int cols, const double* g, double* gb) {
  switch (kind) {
    case Bcast::Same:
      for (size_t i = 0; i < static_cast<size_t>(rows) * cols; ++i) gb[i] += g[i];
      break;
    case Bcast::Row:
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) gb[j] += g[static_cast<size_t>(i) * cols + j];
      break;
    case Bcast::Scalar: {
      double s = 0.0;
      for (size_t i = 0; i < static_cast<size_t>(rows) * cols; ++i) s += g[i];
      gb[0] += s;
      break;
    }
  }
}

double b_at(Bcast kind, const std::vector<double>& b, int cols, size_t i) {
  switch (kind) {
    case Bcast::Same: return b[i];
    case Bcast::Row: return b[i % cols];
    case Bcast::Scalar: return b[0];
  }
  return 0.0;
}

void check_finite(const Value& v, const char* opname) {
  for (double x : v.data())
    if (!std::isfinite(x)) fail(std::string(opname) + ": non-finite result");
}

}  // namespace

Value matmul(const Value& a, const Value& b) {
  check(a.cols() == b.rows(), "matmul: inner dimensions disagree, " + shape_str(*a.node()) +
                                  " x " + shape_str(*b.node()));
  int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = detail::make_node(m, n, any_grad(a, b));
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out->data.data());
  finish(out, {a.node(), b.node()},
         [m, k, n, an = a.node().get(), bn = b.node().get()](Node& self, BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           if (ctx.needs(an)) gemm_nt(m, n, k, g, bn->data.data(), ctx.grad_of(*an));
           if (ctx.needs(bn)) gemm_tn(m, k, n, an->data.data(), g, ctx.grad_of(*bn));
         });
  return Value(out);
}

Value mix_rows(const Value& coeffs, const Value& rowsv) {
  check(coeffs.cols() == rowsv.rows(), "mix_rows: inner dimensions disagree, " +
                                           shape_str(*coeffs.node()) + " x " +
                                           shape_str(*rowsv.node()));
  int m = coeffs.rows(), k = coeffs.cols(), n = rowsv.cols();
  auto out = detail::make_node(m, n, any_grad(coeffs, rowsv));
  std::vector<double> buf(k);
  const double* A = coeffs.data().data();
  const double* B = rowsv.data().data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int kk = 0; kk < k; ++kk)
        buf[kk] = A[static_cast<size_t>(i) * k + kk] * B[static_cast<size_t>(kk) * n + j];
      out->data[static_cast<size_t>(i) * n + j] = detail::order_free_sum(buf);
    }
  }
  finish(out, {coeffs.node(), rowsv.node()},
         [m, k, n, an = coeffs.node().get(), bn = rowsv.node().get()](Node& self,
                                                                      BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           if (ctx.needs(an)) gemm_nt(m, n, k, g, bn->data.data(), ctx.grad_of(*an));
           if (ctx.needs(bn)) gemm_tn(m, k, n, an->data.data(), g, ctx.grad_of(*bn));
         });
  return Value(out);
}

Value transpose(const Value& a) {
  int m = a.rows(), n = a.cols();
  auto out = detail::make_node(n, m, a.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  finish(out, {a.node()}, [m, n, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i) ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
  });
  return Value(out);
}

namespace {

Value binary_elem(const Value& a, const Value& b, const char* name,
                  double (*fwd)(double, double), double (*dfa)(double, double),
                  double (*dfb)(double, double)) {
  Bcast kind = bcast_kind(a, b, name);
  int rows = a.rows(), cols = a.cols();
  auto out = detail::make_node(rows, cols, any_grad(a, b));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = fwd(ad[i], b_at(kind, bd, cols, i));
  finish(out, {a.node(), b.node()},
         [kind, rows, cols, dfa, dfb, an = a.node().get(), bn = b.node().get()](
             Node& self, BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           size_t total = static_cast<size_t>(rows) * cols;
           if (ctx.needs(an)) {
             double* ga = ctx.grad_of(*an);
             for (size_t i = 0; i < total; ++i)
               ga[i] += g[i] * dfa(an->data[i], b_at(kind, bn->data, cols, i));
           }
           if (ctx.needs(bn)) {
             // build the output-shaped db then reduce across broadcast axes
             std::vector<double> tmp(total);
             for (size_t i = 0; i < total; ++i)
               tmp[i] = g[i] * dfb(an->data[i], b_at(kind, bn->data, cols, i));
             reduce_to_b(kind, rows, cols, tmp.data(), ctx.grad_of(*bn));
           }
         });
  return Value(out);
}

}  // namespace

Value add(const Value& a, const Value& b) {
  return binary_elem(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
  return binary_elem(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
  return binary_elem(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Value div(const Value& a, const Value& b) {
  for (double y : b.data())
    if (y == 0.0) fail("div: division by zero");
  return binary_elem(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Value min_elem(const Value& a, const Value& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        "min_elem: shape mismatch " + shape_str(*a.node()) + " vs " + shape_str(*b.node()));
  return binary_elem(
      a, b, "min_elem", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Value max_elem(const Value& a, const Value& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        "max_elem: shape mismatch " + shape_str(*a.node()) + " vs " + shape_str(*b.node()));
  return binary_elem(
      a, b, "max_elem", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

namespace {

Value unary_elem(const Value& a, double (*fwd)(double), double (*dfd)(double)) {
  auto out = detail::make_node(a.rows(), a.cols(), a.requires_grad());
  const auto& ad = a.data();
  for (size_t i = 0; i < ad.size(); ++i) out->data[i] = fwd(ad[i]);
  finish(out, {a.node()}, [dfd, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < self.size(); ++i) ga[i] += g[i] * dfd(an->data[i]);
  });
  return Value(out);
}

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid_stable(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace

Value scale(const Value& a, double s) {
  auto out = detail::make_node(a.rows(), a.cols(), a.requires_grad());
  for (size_t i = 0; i < a.size(); ++i) out->data[i] = a.data()[i] * s;
  finish(out, {a.node()}, [s, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < self.size(); ++i) ga[i] += g[i] * s;
  });
  return Value(out);
}

Value add_const(const Value& a, double c) {
  auto out = detail::make_node(a.rows(), a.cols(), a.requires_grad());
  for (size_t i = 0; i < a.size(); ++i) out->data[i] = a.data()[i] + c;
  finish(out, {a.node()}, [an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < self.size(); ++i) ga[i] += g[i];
  });
  return Value(out);
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value relu(const Value& a) {
  return unary_elem(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Value sigmoid(const Value& a) {
  return unary_elem(a, &sigmoid_stable, [](double x) {
    double s = sigmoid_stable(x);
    return s * (1.0 - s);
  });
}

Value log_sigmoid(const Value& a) {
  return unary_elem(a, &log_sigmoid_stable,
                    [](double x) { return sigmoid_stable(-x); });
}

Value exp_op(const Value& a) {
  for (double x : a.data())
    if (x > 700.0) fail("exp: argument too large, result would overflow");
  return unary_elem(
      a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Value log_op(const Value& a) {
  for (double x : a.data())
    if (x <= 0.0) fail("log: argument must be positive");
  return unary_elem(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Value abs_op(const Value& a) {
  return unary_elem(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Value pow_const(const Value& a, double p) {
  if (p != std::floor(p))
    for (double x : a.data())
      if (x < 0.0) fail("pow_const: negative base with non-integer exponent");
  auto out = detail::make_node(a.rows(), a.cols(), a.requires_grad());
  for (size_t i = 0; i < a.size(); ++i) out->data[i] = std::pow(a.data()[i], p);
  finish(out, {a.node()}, [p, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < self.size(); ++i) {
      double x = an->data[i];
      double d = (p == 0.0) ? 0.0 : p * std::pow(x, p - 1.0);
      if (!std::isfinite(d)) d = 0.0;  // subgradient at x=0 with p<1
      ga[i] += g[i] * d;
    }
  });
  check_finite(Value(out), "pow_const");
  return Value(out);
}

Value square(const Value& a) { return mul(a, a); }

Value softmax_rows(const Value& a, double s) {
  check(s > 0.0, "softmax_rows: scale must be positive");
  int rows = a.rows(), cols = a.cols();
  auto out = detail::make_node(rows, cols, a.requires_grad());
  std::vector<double> buf(cols);
  for (int i = 0; i < rows; ++i) {
    const double* x = a.data().data() + static_cast<size_t>(i) * cols;
    double* y = out->data.data() + static_cast<size_t>(i) * cols;
    double mx = x[0] * s;
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j] * s);
    for (int j = 0; j < cols; ++j) buf[j] = std::exp(x[j] * s - mx);
    std::vector<double> tmp(buf);
    double denom = detail::order_free_sum(tmp);
    for (int j = 0; j < cols; ++j) y[j] = buf[j] / denom;
  }
  finish(out, {a.node()}, [s, rows, cols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (int i = 0; i < rows; ++i) {
      const double* y = self.data.data() + static_cast<size_t>(i) * cols;
      const double* gr = g + static_cast<size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += gr[j] * y[j];
      for (int j = 0; j < cols; ++j)
        ga[static_cast<size_t>(i) * cols + j] += s * y[j] * (gr[j] - dot);
    }
  });
  return Value(out);
}

Value layer_norm_rows(const Value& a, double eps) {
  int rows = a.rows(), cols = a.cols();
  auto out = detail::make_node(rows, cols, a.requires_grad());
  std::vector<double> inv_sd(rows);
  for (int i = 0; i < rows; ++i) {
    const double* x = a.data().data() + static_cast<size_t>(i) * cols;
    double* y = out->data.data() + static_cast<size_t>(i) * cols;
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += x[j];
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= cols;
    inv_sd[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) y[j] = (x[j] - mean) * inv_sd[i];
  }
  finish(out, {a.node()},
         [rows, cols, inv_sd = std::move(inv_sd), an = a.node().get()](Node& self,
                                                                       BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           double* ga = ctx.grad_of(*an);
           for (int i = 0; i < rows; ++i) {
             const double* y = self.data.data() + static_cast<size_t>(i) * cols;
             const double* gr = g + static_cast<size_t>(i) * cols;
             double gmean = 0.0, gymean = 0.0;
             for (int j = 0; j < cols; ++j) {
               gmean += gr[j];
               gymean += gr[j] * y[j];
             }
             gmean /= cols;
             gymean /= cols;
             for (int j = 0; j < cols; ++j)
               ga[static_cast<size_t>(i) * cols + j] +=
                   inv_sd[i] * (gr[j] - gmean - y[j] * gymean);
           }
         });
  return Value(out);
}

Value l2_normalize_rows(const Value& a, double eps) {
  int rows = a.rows(), cols = a.cols();
  auto out = detail::make_node(rows, cols, a.requires_grad());
  std::vector<double> norms(rows);
  for (int i = 0; i < rows; ++i) {
    const double* x = a.data().data() + static_cast<size_t>(i) * cols;
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += x[j] * x[j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int j = 0; j < cols; ++j)
      out->data[static_cast<size_t>(i) * cols + j] = x[j] / norms[i];
  }
  finish(out, {a.node()},
         [rows, cols, eps, norms = std::move(norms), an = a.node().get()](Node& self,
                                                                          BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           double* ga = ctx.grad_of(*an);
           for (int i = 0; i < rows; ++i) {
             const double* x = an->data.data() + static_cast<size_t>(i) * cols;
             const double* gr = g + static_cast<size_t>(i) * cols;
             double n = norms[i];
             if (n <= eps) {  // clamped: y = x / eps
               for (int j = 0; j < cols; ++j)
                 ga[static_cast<size_t>(i) * cols + j] += gr[j] / n;
               continue;
             }
             double xg = 0.0;
             for (int j = 0; j < cols; ++j) xg += x[j] * gr[j];
             for (int j = 0; j < cols; ++j)
               ga[static_cast<size_t>(i) * cols + j] += gr[j] / n - x[j] * xg / (n * n * n);
           }
         });
  return Value(out);
}

Value mean_pool(const Value& a, int axis) {
  check(axis == 0 || axis == 1, "mean_pool: axis must be 0 or 1");
  int rows = a.rows(), cols = a.cols();
  int orows = axis == 0 ? 1 : rows;
  int ocols = axis == 0 ? cols : 1;
  auto out = detail::make_node(orows, ocols, a.requires_grad());
  if (axis == 0) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out->data[j] += a.at(i, j) / rows;
  } else {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out->data[i] += a.at(i, j) / cols;
  }
  finish(out, {a.node()}, [axis, rows, cols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        ga[static_cast<size_t>(i) * cols + j] +=
            axis == 0 ? g[j] / rows : g[i] / cols;
  });
  return Value(out);
}

Value sum_all(const Value& a) {
  auto out = detail::make_node(1, 1, a.requires_grad());
  double s = 0.0;
  for (double x : a.data()) s += x;
  out->data[0] = s;
  finish(out, {a.node()}, [an = a.node().get()](Node& self, BackwardCtx& ctx) {
    double g = ctx.grad_of(self)[0];
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < an->size(); ++i) ga[i] += g;
  });
  return Value(out);
}

Value mean_all(const Value& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Value concat_rows(const std::vector<Value>& parts) {
  check(!parts.empty(), "concat_rows: no parts");
  int cols = parts[0].cols();
  int rows = 0;
  bool req = false;
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column mismatch " + shape_str(*p.node()));
    rows += p.rows();
    req = req || p.requires_grad();
  }
  auto out = detail::make_node(rows, cols, req);
  std::vector<NodePtr> parents;
  std::vector<std::pair<Node*, int>> spans;  // parent, starting row
  int r = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(),
              out->data.begin() + static_cast<size_t>(r) * cols);
    parents.push_back(p.node());
    spans.emplace_back(p.node().get(), r);
    r += p.rows();
  }
  finish(out, std::move(parents), [cols, spans = std::move(spans)](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    for (auto& [pn, start] : spans) {
      if (!ctx.needs(pn)) continue;
      double* gp = ctx.grad_of(*pn);
      size_t count = pn->size();
      const double* src = g + static_cast<size_t>(start) * cols;
      for (size_t i = 0; i < count; ++i) gp[i] += src[i];
    }
  });
  return Value(out);
}

Value concat_cols(const std::vector<Value>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  int rows = parts[0].rows();
  int cols = 0;
  bool req = false;
  for (const auto& p : parts) {
    check(p.rows() == rows, "concat_cols: row mismatch " + shape_str(*p.node()));
    cols += p.cols();
    req = req || p.requires_grad();
  }
  auto out = detail::make_node(rows, cols, req);
  std::vector<NodePtr> parents;
  std::vector<std::pair<Node*, int>> spans;  // parent, starting column
  int c = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      std::copy(p.data().begin() + static_cast<size_t>(i) * p.cols(),
                p.data().begin() + static_cast<size_t>(i + 1) * p.cols(),
                out->data.begin() + static_cast<size_t>(i) * cols + c);
    parents.push_back(p.node());
    spans.emplace_back(p.node().get(), c);
    c += p.cols();
  }
  finish(out, std::move(parents),
         [rows, cols, spans = std::move(spans)](Node& self, BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           for (auto& [pn, start] : spans) {
             if (!ctx.needs(pn)) continue;
             double* gp = ctx.grad_of(*pn);
             int pc = pn->cols;
             for (int i = 0; i < rows; ++i)
               for (int j = 0; j < pc; ++j)
                 gp[static_cast<size_t>(i) * pc + j] +=
                     g[static_cast<size_t>(i) * cols + start + j];
           }
         });
  return Value(out);
}

Value slice_rows(const Value& a, int start, int len) {
  check(start >= 0 && len > 0 && start + len <= a.rows(),
        "slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
            ") out of bounds for " + shape_str(*a.node()));
  int cols = a.cols();
  auto out = detail::make_node(len, cols, a.requires_grad());
  std::copy(a.data().begin() + static_cast<size_t>(start) * cols,
            a.data().begin() + static_cast<size_t>(start + len) * cols, out->data.begin());
  finish(out, {a.node()}, [start, cols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an) + static_cast<size_t>(start) * cols;
    for (size_t i = 0; i < self.size(); ++i) ga[i] += g[i];
  });
  return Value(out);
}

Value slice_cols(const Value& a, int start, int len) {
  check(start >= 0 && len > 0 && start + len <= a.cols(),
        "slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
            ") out of bounds for " + shape_str(*a.node()));
  int rows = a.rows(), acols = a.cols();
  auto out = detail::make_node(rows, len, a.requires_grad());
  for (int i = 0; i < rows; ++i)
    std::copy(a.data().begin() + static_cast<size_t>(i) * acols + start,
              a.data().begin() + static_cast<size_t>(i) * acols + start + len,
              out->data.begin() + static_cast<size_t>(i) * len);
  finish(out, {a.node()},
         [start, rows, acols, len, an = a.node().get()](Node& self, BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           double* ga = ctx.grad_of(*an);
           for (int i = 0; i < rows; ++i)
             for (int j = 0; j < len; ++j)
               ga[static_cast<size_t>(i) * acols + start + j] +=
                   g[static_cast<size_t>(i) * len + j];
         });
  return Value(out);
}

Value reshape(const Value& a, int rows, int cols) {
  check(static_cast<size_t>(rows) * cols == a.size(),
        "reshape: element count mismatch, " + shape_str(*a.node()) + " to [" +
            std::to_string(rows) + " x " + std::to_string(cols) + "]");
  auto out = detail::make_node(rows, cols, a.requires_grad());
  out->data = a.data();
  finish(out, {a.node()}, [an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t i = 0; i < self.size(); ++i) ga[i] += g[i];
  });
  return Value(out);
}

Value gather_rows(const Value& a, const std::vector<int>& idx) {
  check(!idx.empty(), "gather_rows: empty index list");
  int cols = a.cols();
  for (int i : idx)
    check(i >= 0 && i < a.rows(),
          "gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(*a.node()));
  auto out = detail::make_node(static_cast<int>(idx.size()), cols, a.requires_grad());
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data().begin() + static_cast<size_t>(idx[r]) * cols,
              a.data().begin() + static_cast<size_t>(idx[r] + 1) * cols,
              out->data.begin() + r * cols);
  finish(out, {a.node()}, [idx, cols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < cols; ++j)
        ga[static_cast<size_t>(idx[r]) * cols + j] += g[r * cols + j];
  });
  return Value(out);
}

Value weighted_row_sum(const Value& a, const std::vector<int>& idx,
                       const std::vector<double>& w) {
  check(idx.size() == w.size() && !idx.empty(), "weighted_row_sum: index/weight mismatch");
  int cols = a.cols();
  for (int i : idx)
    check(i >= 0 && i < a.rows(), "weighted_row_sum: row index out of range");
  auto out = detail::make_node(1, cols, a.requires_grad());
  for (size_t r = 0; r < idx.size(); ++r) {
    const double* src = a.data().data() + static_cast<size_t>(idx[r]) * cols;
    for (int j = 0; j < cols; ++j) out->data[j] += w[r] * src[j];
  }
  finish(out, {a.node()}, [idx, w, cols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
    const double* g = ctx.grad_of(self);
    double* ga = ctx.grad_of(*an);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < cols; ++j)
        ga[static_cast<size_t>(idx[r]) * cols + j] += w[r] * g[j];
  });
  return Value(out);
}

Value im2col(const Value& a, int h, int w, int k, int stride, int pad) {
  check(a.rows() == h * w, "im2col: feature map rows " + std::to_string(a.rows()) +
                               " do not equal h*w = " + std::to_string(h * w));
  check(k >= 1 && stride >= 1 && pad >= 0, "im2col: bad kernel/stride/pad");
  int c = a.cols();
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (w + 2 * pad - k) / stride + 1;
  check(ho > 0 && wo > 0, "im2col: kernel larger than padded input");
  int ocols = k * k * c;
  auto out = detail::make_node(ho * wo, ocols, a.requires_grad());
  // Per output row, source cell index for each (ky, kx) tap, -1 if padded.
  std::vector<int> taps(static_cast<size_t>(ho) * wo * k * k);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          int iy = oy * stride + ky - pad;
          int ix = ox * stride + kx - pad;
          taps[((static_cast<size_t>(oy) * wo + ox) * k + ky) * k + kx] =
              (iy >= 0 && iy < h && ix >= 0 && ix < w) ? iy * w + ix : -1;
        }
  const double* src = a.data().data();
  for (int o = 0; o < ho * wo; ++o) {
    double* dst = out->data.data() + static_cast<size_t>(o) * ocols;
    for (int t = 0; t < k * k; ++t) {
      int cell = taps[static_cast<size_t>(o) * k * k + t];
      if (cell >= 0)
        std::copy(src + static_cast<size_t>(cell) * c, src + static_cast<size_t>(cell + 1) * c,
                  dst + static_cast<size_t>(t) * c);
    }
  }
  finish(out, {a.node()},
         [taps = std::move(taps), c, k, ocols, an = a.node().get()](Node& self, BackwardCtx& ctx) {
           const double* g = ctx.grad_of(self);
           double* ga = ctx.grad_of(*an);
           int rows = self.rows;
           for (int o = 0; o < rows; ++o) {
             const double* gr = g + static_cast<size_t>(o) * ocols;
             for (int t = 0; t < k * k; ++t) {
               int cell = taps[static_cast<size_t>(o) * k * k + t];
               if (cell < 0) continue;
               double* dst = ga + static_cast<size_t>(cell) * c;
               const double* s = gr + static_cast<size_t>(t) * c;
               for (int j = 0; j < c; ++j) dst[j] += s[j];
             }
           }
         });
  return Value(out);
}

Value softmax_xent_rows(const Value& logits, const std::vector<int>& labels) {
  int rows = logits.rows(), cols = logits.cols();
  check(static_cast<int>(labels.size()) == rows,
        "softmax_xent_rows: need one label per row, got " + std::to_string(labels.size()) +
            " labels for " + shape_str(*logits.node()));
  for (int l : labels) check(l >= 0 && l < cols, "softmax_xent_rows: label out of range");
  auto out = detail::make_node(1, 1, logits.requires_grad());
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double* z = logits.data().data() + static_cast<size_t>(i) * cols;
    double mx = z[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
    double se = 0.0;
    for (int j = 0; j < cols; ++j) se += std::exp(z[j] - mx);
    total += mx + std::log(se) - z[labels[i]];
  }
  out->data[0] = total / rows;
  finish(out, {logits.node()},
         [labels, rows, cols, an = logits.node().get()](Node& self, BackwardCtx& ctx) {
           double g = ctx.grad_of(self)[0] / rows;
           double* ga = ctx.grad_of(*an);
           for (int i = 0; i < rows; ++i) {
             const double* z = an->data.data() + static_cast<size_t>(i) * cols;
             double mx = z[0];
             for (int j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
             double se = 0.0;
             for (int j = 0; j < cols; ++j) se += std::exp(z[j] - mx);
             for (int j = 0; j < cols; ++j) {
               double p = std::exp(z[j] - mx) / se;
               ga[static_cast<size_t>(i) * cols + j] +=
                   g * (p - (j == labels[i] ? 1.0 : 0.0));
             }
           }
         });
  return Value(out);
}

}  // namespace metadetr
