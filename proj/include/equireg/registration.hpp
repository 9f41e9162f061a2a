#pragma once

#include "equireg/geom3.hpp"
#include "equireg/tape.hpp"
#include "equireg/vn.hpp"

namespace equireg {

/// Closed-form rotation aligning two matched C x 3 feature sets.
struct ProcrustesSolution {
  Mat3 h = Mat3::Zero();     ///< cross-covariance q^T q'
  Svd3 svd;
  double lambda_det = 1.0;   ///< det(U V^T), the reflection correction
  Rotation r_est;            ///< U diag(1, 1, lambda_det) V^T
  bool degenerate = false;   ///< s2 - s3 or s3 within 1e-9 * s1
};

/// h = q^T q_prime, summed over channels.
Mat3 cross_covariance(const FeatureMatrix& q, const FeatureMatrix& q_prime);

/// Rotation maximising trace(R^T h), i.e. minimising ||q R - q'||_F.
ProcrustesSolution solve_rotation(const Mat3& h);

ProcrustesSolution register_features(const FeatureMatrix& q, const FeatureMatrix& q_prime);

/// Chordal loss ||r_gt^T r_est - I||_F^2.
double registration_loss(const Rotation& r_gt, const ProcrustesSolution& sol);
/// d(registration_loss)/d(r_est).
Mat3 registration_loss_grad(const Rotation& r_gt, const Mat3& r_est);

/// Gradient with respect to h given the gradient with respect to r_est.
/// Throws GradientUnavailable when sol.degenerate is set.
Mat3 backward_through_svd(const ProcrustesSolution& sol, const Mat3& upstream);

struct RegistrationStep {
  double loss = 0.0;
  Mat3 grad_h = Mat3::Zero();
  bool fallback = false;        ///< near-repeated singular values; h was nudged by 1e-9 I
  bool gradient_dropped = false;  ///< still degenerate after the nudge; zero gradient
};

/// Training-time loss and gradient. When s2 - s3 < 1e-6 * s1 the backward
/// pass runs on h + 1e-9 I; the reported loss always uses the unperturbed h.
RegistrationStep registration_step(const Mat3& h, const Rotation& r_gt);

/// Adds weight * registration loss between two 1 x C x 3 nodes to the tape.
RegistrationStep record_registration_loss(Tape& tape, Tape::Node q, Tape::Node q_prime, const Rotation& r_gt,
                                          double weight);

}  // namespace equireg
