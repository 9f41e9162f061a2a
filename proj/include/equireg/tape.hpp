#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <vector>

#include "equireg/vn.hpp"

namespace equireg {

/// Reverse-mode record of a forward pass over VN features.
///
/// Nodes hold a forward value and a lazily allocated gradient. Scalar loss
/// terms are attached with add_loss; backward() seeds every loss term, then
/// sweeps the nodes once in reverse recording order. Parameter gradients are
/// accumulated into matrices owned by the caller, so several tapes can run in
/// parallel against separate gradient buffers.
class Tape {
 public:
  using Node = std::size_t;
  using NodeBackward = std::function<void(Tape&, const VNFeature& grad_out)>;
  using LossBackward = std::function<void(Tape&, double seed)>;

  /// Leaf that never receives a gradient.
  Node constant(VNFeature value);
  /// Leaf whose gradient is kept after backward() (read it with input_grad).
  Node variable(VNFeature value);
  Node record(VNFeature value, NodeBackward backward);
  void add_loss(double value, LossBackward backward);

  const VNFeature& value(Node node) const { return nodes_.at(node).value; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  VNFeature& grad(Node node);
  /// grad(node) for nodes that take part in differentiation, nullptr for constants.
  VNFeature* grad_if_needed(Node node);
  /// Gradient of a variable leaf after backward().
  const VNFeature& input_grad(Node node) const;

  double loss() const { return loss_; }
  std::size_t size() const { return nodes_.size(); }

  /// Runs the reverse sweep. Throws std::logic_error if nothing was recorded
  /// or the tape was already consumed.
  void backward(double seed = 1.0);

 private:
  struct Entry {
    VNFeature value;
    VNFeature grad;
    NodeBackward backward;
    bool needs_grad = true;
    bool keep_grad = false;
  };

  std::vector<Entry> nodes_;
  std::vector<LossBackward> losses_;
  double loss_ = 0.0;
  bool consumed_ = false;
};

// Layer ops recorded on a tape. Parameter gradients go to the given
// buffers; pass nullptr to treat a parameter as frozen.
Tape::Node record_linear(Tape& tape, Tape::Node in, const Eigen::MatrixXd& w, Eigen::MatrixXd* grad_w);
Tape::Node record_relu(Tape& tape, Tape::Node in, const Eigen::MatrixXd& u, Eigen::MatrixXd* grad_u);
Tape::Node record_mean_pool(Tape& tape, Tape::Node in, std::vector<std::size_t> order = {});
Tape::Node record_group_mean(Tape& tape, Tape::Node in, std::size_t group);

}  // namespace equireg
