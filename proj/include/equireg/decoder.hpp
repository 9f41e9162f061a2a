#pragma once

#include <Eigen/Core>
#include <vector>

#include "equireg/random.hpp"
#include "equireg/shapes.hpp"
#include "equireg/tape.hpp"
#include "equireg/vn.hpp"

namespace equireg {

/// Scalar MLP (C + 1) -> hidden... -> 1 over rotation-invariant inputs.
struct DecoderParams {
  std::vector<Eigen::MatrixXd> weights;  ///< layer l: out x in
  std::vector<Eigen::MatrixXd> biases;   ///< layer l: out x 1

  static constexpr double kLeakySlope = 0.01;
  static constexpr double kLogitClamp = 30.0;

  static DecoderParams init(std::size_t channels, const std::vector<std::size_t>& hidden, RandomStream& rng);
  DecoderParams zeros_like() const;
  std::size_t channels() const { return weights.empty() ? 0 : static_cast<std::size_t>(weights.front().cols()) - 1; }
  void validate(std::size_t channels) const;
};

/// Per-query invariant inputs: <q_c, p> for every channel, then |p|^2.
Eigen::MatrixXd invariant_inputs(const FeatureMatrix& q, const Points& queries);

/// Clamped logits for a batch of query points.
Eigen::VectorXd decode_logits(const FeatureMatrix& q, const Points& queries, const DecoderParams& params);

/// Occupancy probability v(p; q) in [0, 1].
double decode_occupancy(const FeatureMatrix& q, const Vec3& p, const DecoderParams& params);

/// Mean binary cross-entropy over the batch.
double occupancy_loss(const FeatureMatrix& q, const QueryBatch& batch, const DecoderParams& params);

struct OccupancyGradient {
  double loss = 0.0;
  FeatureMatrix grad_q;
};

/// Loss plus scale * d(loss)/dq; scale * d(loss)/d(params) is added to grad_params when non-null.
OccupancyGradient occupancy_loss_and_grad(const FeatureMatrix& q, const QueryBatch& batch,
                                          const DecoderParams& params, DecoderParams* grad_params,
                                          double scale = 1.0);

/// Fraction of queries whose thresholded prediction (v >= 0.5) matches the label.
double occupancy_accuracy(const FeatureMatrix& q, const QueryBatch& batch, const DecoderParams& params);

/// Adds weight * occupancy_loss(q) to the tape, with q read from a 1 x C x 3 node.
void record_occupancy_loss(Tape& tape, Tape::Node q, const QueryBatch& batch, const DecoderParams& params,
                           DecoderParams* grad_params, double weight);

}  // namespace equireg
