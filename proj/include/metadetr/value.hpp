#pragma once
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadetr {

struct Node;
struct BackwardCtx;
using NodePtr = std::shared_ptr<Node>;

// One node of the computation tape: a row-major f64 buffer plus, when the
// node participates in differentiation, its parent edges and a pull-back
// that routes the node's gradient to the parents. Rank-1 data is stored as
// 1 x n, scalars as 1 x 1.
struct Node {
  int rows = 0;
  int cols = 0;
  bool requires_grad = false;
  int param_index = -1;  // >= 0 marks a registered Parameter leaf
  std::vector<double> data;
  std::vector<double> grad;
  std::vector<NodePtr> parents;
  std::function<void(Node&, BackwardCtx&)> backprop;

  size_t size() const { return data.size(); }
  bool is_leaf() const { return parents.empty(); }
};

// Accumulates leaf-parameter gradients outside the shared Parameter nodes.
// Used to run backward passes for independent episodes concurrently and then
// reduce their gradients in a fixed order.
struct GradSink {
  std::vector<std::vector<double>> by_param;
  void clear() { by_param.clear(); }
};

struct BackwardCtx {
  GradSink* sink = nullptr;

  // Resolves where a node's gradient buffer lives during this pass.
  double* grad_of(Node& n);
  bool needs(const Node* n) const { return n != nullptr && n->requires_grad; }
};

class Value {
 public:
  Value() = default;
  explicit Value(NodePtr n) : node_(std::move(n)) {}

  static Value zeros(int rows, int cols, bool requires_grad = false);
  static Value full(int rows, int cols, double v, bool requires_grad = false);
  static Value from_data(int rows, int cols, std::vector<double> data,
                         bool requires_grad = false);
  static Value scalar(double v);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  double at(int r, int c) const { return node_->data[static_cast<size_t>(r) * node_->cols + c]; }
  double& at(int r, int c) { return node_->data[static_cast<size_t>(r) * node_->cols + c]; }
  double item() const;

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  const std::vector<double>& grad() const;
  void zero_grad();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Reverse-mode sweep from a scalar loss. Gradients of leaf nodes accumulate
// (into `sink` for registered parameters when one is given, otherwise into
// the node itself); intermediate gradients are zeroed at the start of each
// pass. With free_graph the tape edges are released afterwards, so the same
// graph cannot be swept twice; pass free_graph=false to retain it.
void backward(const Value& loss, GradSink* sink = nullptr, bool free_graph = true);

[[noreturn]] void fail(const std::string& msg);
void check(bool cond, const std::string& msg);
std::string shape_str(const Node& n);

namespace detail {
NodePtr make_node(int rows, int cols, bool requires_grad);
// Sum that depends only on the multiset of addends, not their order:
// the buffer is sorted in place before accumulation.
double order_free_sum(std::vector<double>& buf);
}  // namespace detail

}  // namespace metadetr
