#include "metadetr/value.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace metadetr {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

std::string shape_str(const Node& n) {
  return "[" + std::to_string(n.rows) + " x " + std::to_string(n.cols) + "]";
}

namespace detail {

NodePtr make_node(int rows, int cols, bool requires_grad) {
  check(rows > 0 && cols > 0, "node extents must be positive, got [" +
                                  std::to_string(rows) + " x " + std::to_string(cols) + "]");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->requires_grad = requires_grad;
  n->data.assign(static_cast<size_t>(rows) * cols, 0.0);
  if (requires_grad) n->grad.assign(n->data.size(), 0.0);
  return n;
}

double order_free_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

}  // namespace detail

Value Value::zeros(int rows, int cols, bool requires_grad) {
  return Value(detail::make_node(rows, cols, requires_grad));
}

Value Value::full(int rows, int cols, double v, bool requires_grad) {
  auto n = detail::make_node(rows, cols, requires_grad);
  std::fill(n->data.begin(), n->data.end(), v);
  return Value(n);
}

Value Value::from_data(int rows, int cols, std::vector<double> data, bool requires_grad) {
  check(static_cast<size_t>(rows) * cols == data.size(),
        "data length " + std::to_string(data.size()) + " does not match shape [" +
            std::to_string(rows) + " x " + std::to_string(cols) + "]");
  auto n = detail::make_node(rows, cols, requires_grad);
  n->data = std::move(data);
  return Value(n);
}

Value Value::scalar(double v) { return full(1, 1, v); }

double Value::item() const {
  check(node_ && node_->rows == 1 && node_->cols == 1,
        "item() requires a 1 x 1 value, got " + (node_ ? shape_str(*node_) : "<empty>"));
  return node_->data[0];
}

const std::vector<double>& Value::grad() const {
  check(node_ && node_->requires_grad, "grad() on a value that does not require gradients");
  return node_->grad;
}

void Value::zero_grad() {
  if (node_ && node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double* BackwardCtx::grad_of(Node& n) {
  if (sink != nullptr && n.param_index >= 0) {
    if (static_cast<size_t>(n.param_index) >= sink->by_param.size())
      sink->by_param.resize(n.param_index + 1);
    auto& buf = sink->by_param[n.param_index];
    if (buf.size() != n.size()) buf.assign(n.size(), 0.0);
    return buf.data();
  }
  if (n.grad.size() != n.size()) n.grad.assign(n.size(), 0.0);
  return n.grad.data();
}

void backward(const Value& loss, GradSink* sink, bool free_graph) {
  check(loss.defined(), "backward on an empty value");
  check(loss.rows() == 1 && loss.cols() == 1,
        "backward requires a scalar loss, got " + shape_str(*loss.node()));
  if (!loss.requires_grad()) return;  // constant loss: nothing reachable

  // Iterative post-order DFS over parent edges; reverse post-order is a
  // topological order with every consumer ahead of its producers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  BackwardCtx ctx{sink};
  // Intermediate gradients restart at zero each pass; leaf gradients
  // accumulate across passes until zero_grad.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->size(), 0.0);
  }
  ctx.grad_of(*loss.node())[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n, ctx);
  }

  if (free_graph) {
    for (Node* n : order) {
      if (!n->is_leaf()) {
        n->parents.clear();
        n->backprop = nullptr;
      }
    }
  }
}

}  // namespace metadetr
