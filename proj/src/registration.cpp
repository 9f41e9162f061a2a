#include "equireg/registration.hpp"

#include <Eigen/LU>

#include <cmath>
#include <stdexcept>

#include "equireg/errors.hpp"

namespace equireg {

Mat3 cross_covariance(const FeatureMatrix& q, const FeatureMatrix& q_prime) {
  if (q.rows() != q_prime.rows()) throw std::invalid_argument("cross_covariance: channel count mismatch");
  return q.transpose() * q_prime;
}

ProcrustesSolution solve_rotation(const Mat3& h) {
  if (!h.allFinite()) throw std::invalid_argument("solve_rotation: non-finite cross-covariance");
  ProcrustesSolution sol;
  sol.h = h;
  sol.svd = svd3(h);
  const Mat3& u = sol.svd.u;
  const Mat3& v = sol.svd.v;
  sol.lambda_det = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Vector3d lambda(1.0, 1.0, sol.lambda_det);
  sol.r_est = Rotation::unchecked(u * lambda.asDiagonal() * v.transpose());
  const auto& s = sol.svd.s;
  sol.degenerate = (s(1) - s(2) <= 1e-9 * s(0)) || (s(2) <= 1e-9 * s(0));
  return sol;
}

ProcrustesSolution register_features(const FeatureMatrix& q, const FeatureMatrix& q_prime) {
  return solve_rotation(cross_covariance(q, q_prime));
}

double registration_loss(const Rotation& r_gt, const ProcrustesSolution& sol) { return chordal_sq(r_gt, sol.r_est); }

Mat3 registration_loss_grad(const Rotation& r_gt, const Mat3& r_est) {
  const Mat3& g = r_gt.matrix();
  return 2.0 * g * (g.transpose() * r_est - Mat3::Identity());
}

Mat3 backward_through_svd(const ProcrustesSolution& sol, const Mat3& upstream) {
  if (sol.degenerate) {
    throw GradientUnavailable("backward_through_svd: repeated or vanishing singular values");
  }
  const Mat3& u = sol.svd.u;
  const Mat3& v = sol.svd.v;
  const Eigen::Vector3d& s = sol.svd.s;
  const Eigen::Vector3d lambda(1.0, 1.0, sol.lambda_det);

  // With P = U^T dH V, the SVD differentials are
  //   (U^T dU)_ij = F_ij (P_ij s_j + P_ji s_i),  (V^T dV)_ij = F_ij (P_ij s_i + P_ji s_j),
  // F_ij = 1 / (s_j^2 - s_i^2). Pulling M = U^T G V back through
  // R = U Lambda V^T gives dL/dH = U X V^T with
  //   X_ij = F_ij [M_ij (l_j s_j - l_i s_i) - M_ji (l_i s_j - l_j s_i)],
  // evaluated below with the common factor of F_ij cancelled.
  const Mat3 m = u.transpose() * upstream * v;
  Mat3 x = Mat3::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      if (lambda(i) == lambda(j)) {
        x(i, j) = lambda(i) * (m(i, j) - m(j, i)) / (s(i) + s(j));
      } else {
        x(i, j) = -lambda(i) * (m(i, j) + m(j, i)) / (s(j) - s(i));
      }
    }
  }
  return u * x * v.transpose();
}

RegistrationStep registration_step(const Mat3& h, const Rotation& r_gt) {
  RegistrationStep step;
  const ProcrustesSolution sol = solve_rotation(h);
  step.loss = registration_loss(r_gt, sol);
  const auto& s = sol.svd.s;
  const ProcrustesSolution* used = &sol;
  ProcrustesSolution nudged;
  if (s(1) - s(2) < 1e-6 * s(0) || sol.degenerate) {
    step.fallback = true;
    nudged = solve_rotation(h + 1e-9 * Mat3::Identity());
    used = &nudged;
  }
  if (used->degenerate) {
    step.gradient_dropped = true;
    return step;
  }
  step.grad_h = backward_through_svd(*used, registration_loss_grad(r_gt, used->r_est.matrix()));
  return step;
}

RegistrationStep record_registration_loss(Tape& tape, Tape::Node q, Tape::Node q_prime, const Rotation& r_gt,
                                          double weight) {
  const FeatureMatrix a = tape.value(q).global();
  const FeatureMatrix b = tape.value(q_prime).global();
  RegistrationStep step = registration_step(cross_covariance(a, b), r_gt);
  const Mat3 grad_h = weight * step.grad_h;
  tape.add_loss(weight * step.loss, [q, q_prime, grad_h](Tape& t, double seed) {
    const FeatureMatrix fa = t.value(q).global();
    const FeatureMatrix fb = t.value(q_prime).global();
    // h = a^T b  =>  dL/da = b (dL/dh)^T,  dL/db = a dL/dh
    if (VNFeature* ga = t.grad_if_needed(q)) *ga += VNFeature::from_global(seed * (fb * grad_h.transpose()));
    if (VNFeature* gb = t.grad_if_needed(q_prime)) *gb += VNFeature::from_global(seed * (fa * grad_h));
  });
  return step;
}

}  // namespace equireg
