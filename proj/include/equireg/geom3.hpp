#pragma once

#include <Eigen/Core>

#include "equireg/random.hpp"

namespace equireg {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::RowVector3d;

/// Element of SO(3) acting on row vectors: p' = p * R.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Throws std::invalid_argument unless m is orthonormal with det +1 (tol 1e-9).
  explicit Rotation(const Mat3& m);
  /// Skips validation; for matrices already known to lie in SO(3).
  static Rotation unchecked(const Mat3& m);

  static Rotation identity() { return Rotation(); }

  const Mat3& matrix() const { return m_; }
  Rotation transpose() const { return unchecked(m_.transpose()); }
  Rotation operator*(const Rotation& other) const { return unchecked(m_ * other.m_); }

  Vec3 apply(const Vec3& p) const { return p * m_; }

 private:
  Mat3 m_;
};

struct AxisAngle {
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  double angle = 0.0;  ///< radians, [0, pi]
};

/// Rodrigues construction under the row-vector convention.
Rotation rotation_from_axis_angle(const AxisAngle& aa);
AxisAngle rotation_to_axis_angle(const Rotation& r);

/// Angle uniform on [0, max_angle], axis uniform on the sphere.
Rotation sample_rotation(double max_angle, RandomStream& rng);

/// Angle of r_gt^T r_est in degrees, in [0, 180].
double isotropic_rotation_error(const Rotation& r_gt, const Rotation& r_est);

/// ||r_gt^T r_est - I||_F^2.
double chordal_sq(const Rotation& r_gt, const Rotation& r_est);

struct Svd3 {
  Mat3 u;
  Eigen::Vector3d s;  ///< descending, non-negative
  Mat3 v;
};

/// h = u * diag(s) * v^T. Throws std::invalid_argument on non-finite input.
Svd3 svd3(const Mat3& h);

bool is_rotation(const Mat3& m, double tol = 1e-9);

}  // namespace equireg
