#include "equireg/tape.hpp"

#include <stdexcept>
#include <utility>

namespace equireg {

Tape::Node Tape::constant(VNFeature value) {
  nodes_.push_back({std::move(value), {}, nullptr, false, false});
  return nodes_.size() - 1;
}

Tape::Node Tape::variable(VNFeature value) {
  VNFeature zeros(value.points(), value.channels());
  nodes_.push_back({std::move(value), std::move(zeros), nullptr, true, true});
  return nodes_.size() - 1;
}

Tape::Node Tape::record(VNFeature value, NodeBackward backward) {
  nodes_.push_back({std::move(value), {}, std::move(backward), true, false});
  return nodes_.size() - 1;
}

void Tape::add_loss(double value, LossBackward backward) {
  loss_ += value;
  losses_.push_back(std::move(backward));
}

VNFeature& Tape::grad(Node node) {
  Entry& e = nodes_.at(node);
  if (e.grad.empty() && !e.value.empty()) e.grad = VNFeature(e.value.points(), e.value.channels());
  return e.grad;
}

VNFeature* Tape::grad_if_needed(Node node) {
  return nodes_.at(node).needs_grad ? &grad(node) : nullptr;
}

const VNFeature& Tape::input_grad(Node node) const {
  const Entry& e = nodes_.at(node);
  if (!e.keep_grad) throw std::logic_error("Tape::input_grad: node is not a variable leaf");
  return e.grad;
}

void Tape::backward(double seed) {
  if (consumed_) throw std::logic_error("Tape::backward: tape already consumed");
  if (losses_.empty()) throw std::logic_error("Tape::backward: no loss recorded (backward before forward)");
  consumed_ = true;
  for (auto& loss : losses_) loss(*this, seed);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Entry& e = nodes_[i];
    if (e.backward && !e.grad.empty()) e.backward(*this, e.grad);
    // Each node is visited once; release memory as the sweep passes.
    if (!e.keep_grad) e.grad = VNFeature();
  }
}

Tape::Node record_linear(Tape& tape, Tape::Node in, const Eigen::MatrixXd& w, Eigen::MatrixXd* grad_w) {
  VNFeature out = vn_linear(tape.value(in), w);
  return tape.record(std::move(out), [in, &w, grad_w](Tape& t, const VNFeature& g) {
    vn_linear_backward(t.value(in), w, g, t.grad_if_needed(in), grad_w);
  });
}

Tape::Node record_relu(Tape& tape, Tape::Node in, const Eigen::MatrixXd& u, Eigen::MatrixXd* grad_u) {
  VNFeature out = vn_relu(tape.value(in), u);
  return tape.record(std::move(out), [in, &u, grad_u](Tape& t, const VNFeature& g) {
    vn_relu_backward(t.value(in), u, g, t.grad_if_needed(in), grad_u);
  });
}

Tape::Node record_mean_pool(Tape& tape, Tape::Node in, std::vector<std::size_t> order) {
  VNFeature out = vn_mean_pool(tape.value(in), order);
  return tape.record(std::move(out), [in](Tape& t, const VNFeature& g) {
    vn_mean_pool_backward(t.value(in), g, t.grad_if_needed(in));
  });
}

Tape::Node record_group_mean(Tape& tape, Tape::Node in, std::size_t group) {
  VNFeature out = vn_group_mean(tape.value(in), group);
  return tape.record(std::move(out), [in, group](Tape& t, const VNFeature& g) {
    vn_group_mean_backward(t.value(in), group, g, t.grad_if_needed(in));
  });
}

}  // namespace equireg
