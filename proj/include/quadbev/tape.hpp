#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "quadbev/tensor.hpp"

namespace qbev::ad {

class Tape;

// Handle to a tape node. Copyable, cheap; valid until Tape::clear().
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  double scalar() const { return val()[0]; }
};

using BackwardFn = std::function<void(Tape&, int self)>;

// Reverse-mode tape over dense tensors. Nodes are appended in topological
// order during the forward pass; backward walks them in reverse. Gradient
// buffers allocate lazily so untouched subgraphs cost nothing.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_alloc = false;
    std::vector<int> parents;
    BackwardFn backward;
  };

  Var leaf(Tensor v) {
    nodes_.push_back(Node{std::move(v), Tensor{}, false, {}, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Tensor v, std::vector<int> parents, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Tensor{}, false, std::move(parents), std::move(fn)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& val_mut(int id) { return nodes_[static_cast<size_t>(id)].value; }

  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }

  // Gradient buffer, zero-initialized on first access.
  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc) {
      n.grad = Tensor(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 and propagates to all nodes with id >=
  // stop_after. Passing the id of an intermediate node as stop_after limits
  // the walk to the subgraph above it (used for per-task gradient norms on
  // the shared reference layer).
  void backward(const Var& root, int stop_after = 0) {
    check_contract(root.tape == this, "backward: var from another tape");
    check_contract(val(root.id).numel() == 1, "backward: root must be scalar");
    grad(root.id)[0] += 1.0;
    for (int id = root.id; id >= stop_after; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad_alloc && n.backward) n.backward(*this, id);
    }
  }

  void zero_grads(int from = 0) {
    for (size_t i = static_cast<size_t>(from); i < nodes_.size(); ++i) nodes_[i].grad_alloc = false;
  }

  void clear() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->val(id); }

// ---- primitive ops -------------------------------------------------------

Var constant(Tape& t, Tensor v);  // alias of leaf; grads never read

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var min_ew(Var a, Var b);
Var max_ew(Var a, Var b);

Var relu(Var x);
Var exp_op(Var x);
Var square(Var x);
Var sqrt_eps(Var x, double eps = 1e-12);
Var sigmoid(Var x);
Var scale(Var x, double c);
Var add_const(Var x, double c);

Var sum_all(Var x);   // -> scalar
Var mean_all(Var x);  // -> scalar

// Channel concat of (C_i, H, W) rasters.
Var concat_ch(std::vector<Var> parts);

// (C,H,W) + flat cell indices -> (C,K)
Var gather_cells(Var x, std::vector<int> cells);
// (C,K) + column subset -> (C,Ki)
Var gather_cols(Var x, std::vector<int> idx);
// (C,K) -> row r as (K)
Var row(Var x, int r);
// (C,K) -> per-row mean (C)
Var mean_cols(Var x);
// (C,K) - v(C) broadcast over columns
Var sub_colvec(Var x, Var v);

// Softmax over axis 0 of (D, ...).
Var softmax_axis0(Var x);

// Same storage, new shape (numel preserved).
Var reshape(Var x, std::vector<int> shape);
// (N, ...) -> item i as (...)
Var slice_item(Var x, int i);

Var conv2d(Var x, Var w, Var b, int stride, int pad);

// Per-raster (slice = one n,c plane) normalization with affine params and
// running statistics for eval mode. running_mean/var are buffers owned by
// the caller; updated in-place when training.
Var raster_norm(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                bool training, double momentum = 0.1, double eps = 1e-5);

// Finite-difference gradient of f at x, central differences.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double step = 1e-4);

// max relative error between analytic grad g and finite-difference grad fd,
// with denominators floored to keep tiny entries meaningful.
double grad_rel_err(const Tensor& g, const Tensor& fd, double floor_ = 1e-3);

}  // namespace qbev::ad
