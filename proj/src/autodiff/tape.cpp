#include "drmkit/tape.hpp"

#include "drmkit/error.hpp"

namespace drmkit::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::push(Tensor value, bool requires_grad, Backward backward) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{std::move(value), Tensor(), nullptr, requires_grad, requires_grad ? std::move(backward) : Backward()});
  return Var(this, id);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

Var Tape::variable(Tensor value) { return push(std::move(value), true, {}); }

Var Tape::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return Var(this, it->second);
  Var v = push(Tensor(), true, {});
  nodes_[v.id()].external = &value;
  params_.emplace(name, v.id());
  return v;
}

Var Tape::external(const Tensor& value) {
  Var v = push(Tensor(), false, {});
  nodes_[v.id()].external = &value;
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward) {
  bool rg = false;
  for (const auto& p : parents) {
    if (p.tape_ != this) throw ShapeError("operand recorded on a different tape");
    rg = rg || nodes_[p.id_].requires_grad;
  }
  return push(std::move(value), rg, std::move(backward));
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad.data();
}

void Tape::backward(Var loss) {
  if (backward_done_) throw ShapeError("backward called twice on one tape");
  if (loss.tape_ != this) throw ShapeError("loss was recorded on a different tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss.id_)[0] = 1.0;
  for (std::int64_t i = loss.id_; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, static_cast<std::uint32_t>(i));
  }
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor(value(v.id_).shape());
  return n.grad;
}

GradMap Tape::param_grads(const ParamSet& params) const {
  GradMap out;
  for (const auto& [name, p] : params) {
    auto it = params_.find(name);
    if (it == params_.end() || nodes_[it->second].grad.empty()) {
      out.emplace(name, Tensor(p.value.shape()));
    } else {
      out.emplace(name, nodes_[it->second].grad);
    }
  }
  return out;
}

Var ParamBinder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const Tensor& value = params_.at(name);
  Var v = trainable_ ? tape_.param(name, value) : tape_.external(value);
  bound_.emplace(name, v);
  return v;
}

}  // namespace drmkit::ad
