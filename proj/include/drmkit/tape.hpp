#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "drmkit/params.hpp"
#include "drmkit/tensor.hpp"

namespace drmkit::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Append-only record of one forward pass. Nodes are stored in creation order,
// which is a topological order, and backward() walks them in reverse once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf bound to a named parameter; repeated calls with one name return the same node.
  // Parameter leaves (and external constants) refer to `value` without copying,
  // so it must outlive the tape.
  Var param(const std::string& name, const Tensor& value);
  Var external(const Tensor& value);

  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  // Gradient of the loss with respect to `v`; zeros if `v` was not reached.
  Tensor grad(Var v) const;
  // Gradients for every entry of `params`; zeros where the tape never bound the name.
  GradMap param_grads(const ParamSet& params) const;

  std::size_t size() const { return nodes_.size(); }

  // --- interface for op implementations ---
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward);
  Var record(Tensor value, std::span<const Var> parents, Backward backward);
  const Tensor& value(std::uint32_t id) const {
    const auto& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Tensor& upstream(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator of `id`, zero-initialized on first use.
  std::span<double> grad_buffer(std::uint32_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward);

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> params_;
  bool backward_done_ = false;
};

// Binds the entries of a ParamSet to tape leaves by name. Trainable binders
// create parameter leaves (gradients reported by Tape::param_grads);
// frozen binders create constants. Each name is bound at most once per binder.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamSet& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name);
  Tape& tape() const { return tape_; }
  const ParamSet& params() const { return params_; }

 private:
  Tape& tape_;
  const ParamSet& params_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

// Differentiable operations. Every op checks operand shapes and throws
// ShapeError naming the offending shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);                 // [m,k] x [k,n]
Var affine(Var x, Var weight, Var bias);  // x[m,in] * weight[in,out] + bias[out]
Var relu(Var a);
Var log_sigmoid(Var a);
Var exp(Var a);
Var sum(Var a);    // -> [1]
Var mean(Var a);   // -> [1]
Var mse(Var a, Var b);  // mean over all elements of (a - b)^2 -> [1]
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);  // rank-2, axis 0 or 1
Var transpose(Var a);  // swaps the last two axes of a rank-2 or rank-3 tensor
Var row_sum(Var a);    // [m,n] -> [m,1]
Var gather_rows(Var a, std::span<const std::size_t> rows);  // [m,n] -> [rows.size(),n]

// min(r*A, clip(r, 1-eps, 1+eps)*A) elementwise; `ratio` has one element per advantage.
Var clipped_surrogate(Var ratio, std::span<const double> advantages, double eps_clip);

// Cross-correlation (no kernel flip). input [c,h,w] or batched [n,c,h,w];
// kernels [c_out,c_in,kh,kw].
Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t padding);
Var add_channel_bias(Var input, Var bias);  // [.., c, h, w] + bias[c]
// Per-channel spatial mean: [c,h,w] -> [c], [n,c,h,w] -> [n,c].
Var mean_pool2d(Var input);

}  // namespace drmkit::ad
