#pragma once

#include <functional>
#include <vector>

#include "fsvi/tensor.hpp"

namespace fsvi {

// Reverse-mode autodiff over a closed set of tensor primitives.
//
// A Graph is a single-use tape: build the forward computation (values are
// computed eagerly), call backward() once on a scalar node, then read leaf
// gradients. Nodes are appended in topological order by construction, so the
// backward pass is a reverse sweep over the node array.
//
// The primitive set is deliberately closed — matmul, elementwise arithmetic,
// exp/log/square/relu/clamp, log-softmax + label gather, reductions, flat
// slicing/concat — plus custom() as the one extension point for composite
// nodes with hand-derived backward rules (linearized function variance, full
// function-space KL). Anything else is a compile error rather than a silent
// numerical wrong-answer.
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves: inputs whose gradients are tracked. Constants: never tracked.
  Var leaf(Tensor2 value);
  Var constant(Tensor2 value);

  Var matmul(Var a, Var b);
  // Equal shapes, or b a 1 x n row vector broadcast over a's rows.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var div(Var a, Var b);  // elementwise
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var relu(Var a);
  Var clamp_min(Var a, double lo);
  Var sum(Var a);  // 1 x 1
  Var log_softmax_rows(Var a);
  // sum_r a[r, labels[r]]; labels[r] must lie in [0, cols).
  Var gather_rows_sum(Var a, const std::vector<int>& labels);
  Var concat_cols(const std::vector<Var>& parts);
  // Reinterpret a contiguous range of the parent's row-major storage as a
  // rows x cols block (used to carve per-layer parameter blocks out of a flat
  // parameter vector).
  Var slice_flat(Var a, std::size_t offset, std::size_t rows, std::size_t cols);
  Var col(Var a, std::size_t c);  // one column as rows x 1

  // Composite node. `backward` receives the upstream gradient and, per input,
  // the forward value and a gradient buffer to accumulate into (null when
  // that input is not tracked).
  using CustomBackward =
      std::function<void(const Tensor2& upstream, const std::vector<const Tensor2*>& input_values,
                         const std::vector<Tensor2*>& input_grads)>;
  Var custom(Tensor2 value, const std::vector<Var>& inputs, CustomBackward backward);

  // Single-shot reverse sweep from a scalar (1 x 1) node.
  void backward(Var loss);

  const Tensor2& value(Var v) const;
  // Gradient of the last backward()'s loss w.r.t. node v. Zero-shaped answers
  // are never returned: reading the grad of an untracked node or before
  // backward() is a StateError.
  const Tensor2& grad(Var v) const;
  bool tracked(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void()> backprop;  // null for leaves/constants
  };

  int push(Node n);
  Node& node(Var v);
  const Node& node(Var v) const;
  // Gradient accumulation buffer for node id, allocated on first touch.
  Tensor2& grad_buf(int id);
  void check_var(Var v, const char* op) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace fsvi
