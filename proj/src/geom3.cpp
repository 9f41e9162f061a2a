#include "equireg/geom3.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace equireg {

bool is_rotation(const Mat3& m, double tol) {
  if (!m.allFinite()) return false;
  if ((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(m.determinant() - 1.0) <= tol;
}

Rotation::Rotation(const Mat3& m) : m_(m) {
  if (!is_rotation(m)) throw std::invalid_argument("Rotation: matrix is not in SO(3)");
}

Rotation Rotation::unchecked(const Mat3& m) {
  Rotation r;
  r.m_ = m;
  return r;
}

Rotation rotation_from_axis_angle(const AxisAngle& aa) {
  const double norm = aa.axis.norm();
  if (!(norm > 0.0) || !std::isfinite(norm) || !std::isfinite(aa.angle)) {
    throw std::invalid_argument("rotation_from_axis_angle: axis must be a finite non-zero vector");
  }
  const Eigen::Vector3d a = aa.axis / norm;
  const double c = std::cos(aa.angle);
  const double s = std::sin(aa.angle);
  Mat3 skew;
  skew << 0, -a.z(), a.y(),  //
      a.z(), 0, -a.x(),      //
      -a.y(), a.x(), 0;
  // Column-vector Rodrigues matrix, transposed for p' = p * R.
  const Mat3 col = c * Mat3::Identity() + s * skew + (1.0 - c) * a * a.transpose();
  return Rotation::unchecked(col.transpose());
}

AxisAngle rotation_to_axis_angle(const Rotation& r) {
  // Work with the column-vector form R_col = R^T.
  const Mat3 m = r.matrix().transpose();
  const Eigen::Vector3d w(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  const double sin2 = w.norm();                 // 2 sin(theta)
  const double cos2 = m.trace() - 1.0;          // 2 cos(theta)
  const double angle = std::atan2(sin2, cos2);

  AxisAngle out;
  out.angle = angle;
  if (angle < 1e-12) {
    out.axis = Eigen::Vector3d::UnitZ();
    return out;
  }
  if (angle < std::numbers::pi / 2) {
    out.axis = w / sin2;
    return out;
  }
  // Near pi the skew part vanishes; read the axis off the symmetric part
  // (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T, pick the largest column.
  const Mat3 b = 0.5 * (m + m.transpose()) - std::cos(angle) * Mat3::Identity();
  Eigen::Index col = 0;
  b.diagonal().maxCoeff(&col);
  Eigen::Vector3d a = b.col(col);
  a.normalize();
  if (a.dot(w) < 0.0) a = -a;
  out.axis = a;
  return out;
}

Rotation sample_rotation(double max_angle, RandomStream& rng) {
  if (!(max_angle >= 0.0 && max_angle <= std::numbers::pi)) {
    throw std::invalid_argument("sample_rotation: max_angle must lie in [0, pi]");
  }
  const double angle = rng.uniform() * max_angle;
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
  return rotation_from_axis_angle({Eigen::Vector3d(rho * std::cos(phi), rho * std::sin(phi), z), angle});
}

double isotropic_rotation_error(const Rotation& r_gt, const Rotation& r_est) {
  // m = r_gt^T r_est, written out so that swapping the arguments yields the
  // exact transpose; cos from the trace, sin from the skew part.
  const Mat3& a = r_gt.matrix();
  const Mat3& b = r_est.matrix();
  double m[3][3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m[i][j] = a(0, i) * b(0, j) + a(1, i) * b(1, j) + a(2, i) * b(2, j);
  }
  const double c = std::clamp((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0, -1.0, 1.0);
  const double sx = m[2][1] - m[1][2];
  const double sy = m[0][2] - m[2][0];
  const double sz = m[1][0] - m[0][1];
  const double s = 0.5 * std::sqrt(sx * sx + sy * sy + sz * sz);
  return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

double chordal_sq(const Rotation& r_gt, const Rotation& r_est) {
  return (r_gt.matrix().transpose() * r_est.matrix() - Mat3::Identity()).squaredNorm();
}

Svd3 svd3(const Mat3& h) {
  if (!h.allFinite()) throw std::invalid_argument("svd3: non-finite input");
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

}  // namespace equireg
