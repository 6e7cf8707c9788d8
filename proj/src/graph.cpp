#include "fsvi/graph.hpp"

#include <cmath>
#include <string>

#include "fsvi/linalg.hpp"

namespace fsvi {

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Graph::Node& Graph::node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
const Graph::Node& Graph::node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

void Graph::check_var(Var v, const char* op) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw StateError(std::string(op) + ": variable does not belong to this graph");
  }
}

Tensor2& Graph::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = Tensor2(n.value.rows, n.value.cols);
    n.grad_live = true;
  }
  return n.grad;
}

Graph::Var Graph::leaf(Tensor2 value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return Var{push(std::move(n))};
}

Graph::Var Graph::constant(Tensor2 value) {
  Node n;
  n.value = std::move(value);
  return Var{push(std::move(n))};
}

Graph::Var Graph::matmul(Var a, Var b) {
  check_var(a, "matmul");
  check_var(b, "matmul");
  const Tensor2& av = node(a).value;
  const Tensor2& bv = node(b).value;
  if (av.cols != bv.rows) {
    throw ShapeError("graph matmul: inner dimensions disagree, " + av.shape_str() + " * " +
                     bv.shape_str());
  }
  Node n;
  n.value = linalg::matmul(av, bv);
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, b, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      const Tensor2& bv2 = node(b).value;
      if (node(a).requires_grad) {
        Tensor2& ga = grad_buf(a.id);
        linalg::matmul_nt_acc(g.data.data(), bv2.data.data(), ga.data.data(), g.rows, g.cols,
                              bv2.rows);
      }
      if (node(b).requires_grad) {
        Tensor2& gb = grad_buf(b.id);
        linalg::matmul_tn_acc(av2.data.data(), g.data.data(), gb.data.data(), av2.rows, av2.cols,
                              g.cols);
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::add(Var a, Var b) {
  check_var(a, "add");
  check_var(b, "add");
  const Tensor2& av = node(a).value;
  const Tensor2& bv = node(b).value;
  const bool broadcast = (bv.rows == 1 && av.cols == bv.cols && av.rows != 1);
  if (!broadcast) require_same_shape(av, bv, "graph add");
  Node n;
  n.value = av;
  if (broadcast) {
    for (std::size_t r = 0; r < av.rows; ++r)
      for (std::size_t c = 0; c < av.cols; ++c) n.value(r, c) += bv(0, c);
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) n.value.data[i] += bv.data[i];
  }
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, b, id, broadcast]() {
      const Tensor2& g = nodes_[id].grad;
      if (node(a).requires_grad) {
        Tensor2& ga = grad_buf(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (node(b).requires_grad) {
        Tensor2& gb = grad_buf(b.id);
        if (broadcast) {
          for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < g.cols; ++c) gb(0, c) += g(r, c);
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
        }
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::sub(Var a, Var b) {
  check_var(a, "sub");
  check_var(b, "sub");
  const Tensor2& av = node(a).value;
  const Tensor2& bv = node(b).value;
  require_same_shape(av, bv, "graph sub");
  Node n;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value.data[i] -= bv.data[i];
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, b, id]() {
      const Tensor2& g = nodes_[id].grad;
      if (node(a).requires_grad) {
        Tensor2& ga = grad_buf(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (node(b).requires_grad) {
        Tensor2& gb = grad_buf(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::mul(Var a, Var b) {
  check_var(a, "mul");
  check_var(b, "mul");
  const Tensor2& av = node(a).value;
  const Tensor2& bv = node(b).value;
  require_same_shape(av, bv, "graph mul");
  Node n;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value.data[i] *= bv.data[i];
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, b, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      const Tensor2& bv2 = node(b).value;
      if (node(a).requires_grad) {
        Tensor2& ga = grad_buf(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
      }
      if (node(b).requires_grad) {
        Tensor2& gb = grad_buf(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::div(Var a, Var b) {
  check_var(a, "div");
  check_var(b, "div");
  const Tensor2& av = node(a).value;
  const Tensor2& bv = node(b).value;
  require_same_shape(av, bv, "graph div");
  Node n;
  n.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) n.value.data[i] /= bv.data[i];
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, b, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& out = nodes_[id].value;
      const Tensor2& bv2 = node(b).value;
      if (node(a).requires_grad) {
        Tensor2& ga = grad_buf(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] / bv2.data[i];
      }
      if (node(b).requires_grad) {
        Tensor2& gb = grad_buf(b.id);
        for (std::size_t i = 0; i < g.size(); ++i)
          gb.data[i] -= g.data[i] * out.data[i] / bv2.data[i];
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::scale(Var a, double s) {
  check_var(a, "scale");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v *= s;
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id, s]() {
      const Tensor2& g = nodes_[id].grad;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::add_scalar(Var a, double s) {
  check_var(a, "add_scalar");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v += s;
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::exp(Var a) {
  check_var(a, "exp");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v = std::exp(v);
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& out = nodes_[id].value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * out.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::log(Var a) {
  check_var(a, "log");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v = std::log(v);
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] / av2.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::square(Var a) {
  check_var(a, "square");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v *= v;
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += 2.0 * g.data[i] * av2.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::relu(Var a) {
  check_var(a, "relu");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2.data[i] > 0.0) ga.data[i] += g.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::clamp_min(Var a, double lo) {
  check_var(a, "clamp_min");
  Node n;
  n.value = node(a).value;
  for (double& v : n.value.data) v = v > lo ? v : lo;
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id, lo]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& av2 = node(a).value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2.data[i] > lo) ga.data[i] += g.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::sum(Var a) {
  check_var(a, "sum");
  const Tensor2& av = node(a).value;
  double acc = 0.0;
  for (double v : av.data) acc += v;
  Node n;
  n.value = Tensor2(1, 1, {acc});
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const double g = nodes_[id].grad.data[0];
      Tensor2& ga = grad_buf(a.id);
      for (double& v : ga.data) v += g;
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::log_softmax_rows(Var a) {
  check_var(a, "log_softmax_rows");
  const Tensor2& av = node(a).value;
  if (av.cols == 0) throw ShapeError("log_softmax_rows: zero columns");
  Node n;
  n.value = av;
  for (std::size_t r = 0; r < av.rows; ++r) {
    double m = av(r, 0);
    for (std::size_t c = 1; c < av.cols; ++c) m = std::max(m, av(r, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < av.cols; ++c) lse += std::exp(av(r, c) - m);
    lse = m + std::log(lse);
    for (std::size_t c = 0; c < av.cols; ++c) n.value(r, c) = av(r, c) - lse;
  }
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id]() {
      const Tensor2& g = nodes_[id].grad;
      const Tensor2& out = nodes_[id].value;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t r = 0; r < g.rows; ++r) {
        double gsum = 0.0;
        for (std::size_t c = 0; c < g.cols; ++c) gsum += g(r, c);
        for (std::size_t c = 0; c < g.cols; ++c)
          ga(r, c) += g(r, c) - std::exp(out(r, c)) * gsum;
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::gather_rows_sum(Var a, const std::vector<int>& labels) {
  check_var(a, "gather_rows_sum");
  const Tensor2& av = node(a).value;
  if (labels.size() != av.rows) {
    throw ShapeError("gather_rows_sum: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(av.rows) + " rows");
  }
  double acc = 0.0;
  for (std::size_t r = 0; r < av.rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= av.cols) {
      throw DataError("gather_rows_sum: label " + std::to_string(y) + " out of range [0," +
                      std::to_string(av.cols) + ") at row " + std::to_string(r));
    }
    acc += av(r, static_cast<std::size_t>(y));
  }
  Node n;
  n.value = Tensor2(1, 1, {acc});
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id, labels]() {
      const double g = nodes_[id].grad.data[0];
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t r = 0; r < ga.rows; ++r)
        ga(r, static_cast<std::size_t>(labels[r])) += g;
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool req = false;
  for (Var p : parts) {
    check_var(p, "concat_cols");
    const Tensor2& v = node(p).value;
    if (cols == 0 && rows == 0) rows = v.rows;
    if (v.rows != rows) {
      throw ShapeError("concat_cols: row mismatch, " + std::to_string(v.rows) + " vs " +
                       std::to_string(rows));
    }
    cols += v.cols;
    req = req || node(p).requires_grad;
  }
  Node n;
  n.value = Tensor2(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor2& v = node(p).value;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols; ++c) n.value(r, off + c) = v(r, c);
    off += v.cols;
  }
  n.requires_grad = req;
  if (req) {
    const int id = static_cast<int>(nodes_.size());
    std::vector<Var> parts_copy = parts;
    n.backprop = [this, parts_copy, id]() {
      const Tensor2& g = nodes_[id].grad;
      std::size_t off2 = 0;
      for (Var p : parts_copy) {
        const std::size_t w = node(p).value.cols;
        if (node(p).requires_grad) {
          Tensor2& gp = grad_buf(p.id);
          for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off2 + c);
        }
        off2 += w;
      }
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::slice_flat(Var a, std::size_t offset, std::size_t rows, std::size_t cols) {
  check_var(a, "slice_flat");
  const Tensor2& av = node(a).value;
  if (offset + rows * cols > av.size()) {
    throw ShapeError("slice_flat: range [" + std::to_string(offset) + "," +
                     std::to_string(offset + rows * cols) + ") exceeds storage of " +
                     av.shape_str());
  }
  Node n;
  n.value = Tensor2(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) n.value.data[i] = av.data[offset + i];
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id, offset]() {
      const Tensor2& g = nodes_[id].grad;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[offset + i] += g.data[i];
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::col(Var a, std::size_t c) {
  check_var(a, "col");
  const Tensor2& av = node(a).value;
  if (c >= av.cols) {
    throw ShapeError("col: column " + std::to_string(c) + " out of range for " + av.shape_str());
  }
  Node n;
  n.value = Tensor2(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) n.value(r, 0) = av(r, c);
  n.requires_grad = node(a).requires_grad;
  if (n.requires_grad) {
    const int id = static_cast<int>(nodes_.size());
    n.backprop = [this, a, id, c]() {
      const Tensor2& g = nodes_[id].grad;
      Tensor2& ga = grad_buf(a.id);
      for (std::size_t r = 0; r < g.rows; ++r) ga(r, c) += g(r, 0);
    };
  }
  return Var{push(std::move(n))};
}

Graph::Var Graph::custom(Tensor2 value, const std::vector<Var>& inputs, CustomBackward backward) {
  bool req = false;
  for (Var v : inputs) {
    check_var(v, "custom");
    req = req || node(v).requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = req;
  if (req) {
    const int id = static_cast<int>(nodes_.size());
    std::vector<Var> in_copy = inputs;
    n.backprop = [this, in_copy, id, backward = std::move(backward)]() {
      std::vector<const Tensor2*> vals;
      std::vector<Tensor2*> grads;
      vals.reserve(in_copy.size());
      grads.reserve(in_copy.size());
      for (Var v : in_copy) {
        vals.push_back(&node(v).value);
        grads.push_back(node(v).requires_grad ? &grad_buf(v.id) : nullptr);
      }
      backward(nodes_[id].grad, vals, grads);
    };
  }
  return Var{push(std::move(n))};
}

void Graph::backward(Var loss) {
  check_var(loss, "backward");
  if (backward_done_) throw StateError("backward: graph already differentiated (single-use tape)");
  const Node& l = node(loss);
  if (l.value.rows != 1 || l.value.cols != 1) {
    throw StateError("backward: loss must be a 1x1 scalar node, got " + l.value.shape_str());
  }
  if (!l.requires_grad) {
    throw StateError("backward: loss does not depend on any leaf");
  }
  backward_done_ = true;
  grad_buf(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad_live && n.backprop) n.backprop();
  }
}

const Tensor2& Graph::value(Var v) const {
  check_var(v, "value");
  return node(v).value;
}

const Tensor2& Graph::grad(Var v) const {
  check_var(v, "grad");
  if (!backward_done_) throw StateError("grad: backward() has not been run");
  const Node& n = node(v);
  if (!n.requires_grad) throw StateError("grad: node is not tracked (constant)");
  if (!n.grad_live) {
    // Tracked but never touched by the sweep: gradient is identically zero.
    const_cast<Node&>(n).grad = Tensor2(n.value.rows, n.value.cols);
    const_cast<Node&>(n).grad_live = true;
  }
  return n.grad;
}

bool Graph::tracked(Var v) const {
  check_var(v, "tracked");
  return node(v).requires_grad;
}

}  // namespace fsvi
