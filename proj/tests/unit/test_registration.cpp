#include <doctest.h>

#include <Eigen/LU>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "equireg/errors.hpp"
#include "equireg/registration.hpp"

using namespace equireg;
constexpr double kPi = std::numbers::pi;

namespace {

FeatureMatrix random_q(Eigen::Index c, RandomStream& rng) {
  FeatureMatrix q(c, 3);
  for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
  return q;
}

Mat3 numeric_grad(const Mat3& h, const Rotation& r_gt, double step) {
  Mat3 g;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Mat3 hp = h, hm = h;
      hp(i, j) += step;
      hm(i, j) -= step;
      g(i, j) = (registration_loss(r_gt, solve_rotation(hp)) - registration_loss(r_gt, solve_rotation(hm))) / (2 * step);
    }
  }
  return g;
}

}  // namespace

TEST_SUITE("registration") {

TEST_CASE("cross_covariance examples") {
  RandomStream rng(1);
  const FeatureMatrix q = random_q(6, rng);
  const Mat3 g = cross_covariance(q, q);
  CHECK((g - g.transpose()).norm() == 0.0);
  CHECK(svd3(g).s.minCoeff() >= 0.0);

  const Rotation r = sample_rotation(kPi, rng);
  const FeatureMatrix e = FeatureMatrix::Identity(3, 3);
  CHECK((cross_covariance(e, FeatureMatrix(e * r.matrix())) - r.matrix()).norm() < 1e-15);
  CHECK(cross_covariance(FeatureMatrix::Zero(4, 3), q.topRows(4)).norm() == 0.0);
  CHECK_THROWS_AS(cross_covariance(q, q.topRows(5)), std::invalid_argument);
}

TEST_CASE("solve_rotation examples") {
  CHECK((solve_rotation(Mat3::Identity()).r_est.matrix() - Mat3::Identity()).norm() < 1e-15);
  RandomStream rng(2);
  for (int t = 0; t < 100; ++t) {
    const Rotation r = sample_rotation(kPi, rng);
    CHECK((solve_rotation(r.matrix()).r_est.matrix() - r.matrix()).cwiseAbs().maxCoeff() < 1e-10);
  }
  const Mat3 refl = Eigen::Vector3d(1, 1, -1).asDiagonal();
  const ProcrustesSolution s = solve_rotation(refl);
  CHECK(s.lambda_det == -1.0);
  CHECK(is_rotation(s.r_est.matrix()));
  Mat3 bad = Mat3::Identity();
  bad(0, 0) = INFINITY;
  CHECK_THROWS_AS(solve_rotation(bad), std::invalid_argument);
  CHECK(solve_rotation(Mat3::Zero()).degenerate);
  CHECK(solve_rotation(Mat3::Identity()).degenerate);
  CHECK_FALSE(solve_rotation(Eigen::Vector3d(3, 2, 1).asDiagonal()).degenerate);
}

TEST_CASE("noiseless recovery and det +1") {
  RandomStream rng(3);
  for (int t = 0; t < 1000; ++t) {
    const FeatureMatrix q = random_q(8, rng);
    const Rotation r = sample_rotation(kPi, rng);
    const ProcrustesSolution s = register_features(q, FeatureMatrix(q * r.matrix()));
    REQUIRE(s.r_est.matrix().determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(isotropic_rotation_error(r, s.r_est) < 1e-6);
  }
}

TEST_CASE("sampled optimality") {
  RandomStream rng(4);
  for (int t = 0; t < 100; ++t) {
    const FeatureMatrix q = random_q(10, rng);
    FeatureMatrix qp = q * sample_rotation(kPi, rng).matrix();
    for (Eigen::Index i = 0; i < qp.size(); ++i) qp.data()[i] += 0.2 * rng.normal();
    const Rotation best = register_features(q, qp).r_est;
    const double loss = (q * best.matrix() - qp).norm();
    for (int k = 0; k < 100; ++k) CHECK(loss <= (q * sample_rotation(kPi, rng).matrix() - qp).norm() + 1e-9);
  }
}

TEST_CASE("conjugation covariance") {
  RandomStream rng(5);
  for (int t = 0; t < 100; ++t) {
    const FeatureMatrix q = random_q(8, rng);
    FeatureMatrix qp = q * sample_rotation(kPi, rng).matrix();
    for (Eigen::Index i = 0; i < qp.size(); ++i) qp.data()[i] += 0.1 * rng.normal();
    const Mat3 s = sample_rotation(kPi, rng).matrix();
    const Mat3 r = register_features(q, qp).r_est.matrix();
    const Mat3 rs = register_features(FeatureMatrix(q * s), FeatureMatrix(qp * s)).r_est.matrix();
    CHECK((rs - s.transpose() * r * s).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("rank-2 features still align the observable subspace") {
  RandomStream rng(6);
  FeatureMatrix q = random_q(6, rng);
  q.col(2).setZero();  // every channel in the xy plane
  const Rotation r = sample_rotation(kPi, rng);
  const FeatureMatrix qp = q * r.matrix();
  const ProcrustesSolution s = register_features(q, qp);
  CHECK(s.degenerate);
  CHECK((q * s.r_est.matrix() - qp).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("registration_loss examples") {
  const Rotation r = rotation_from_axis_angle({Eigen::Vector3d(1, 2, 3).normalized(), 0.7});
  CHECK(registration_loss(r, solve_rotation(r.matrix())) < 1e-20);
  const Rotation half = rotation_from_axis_angle({Eigen::Vector3d(0, 1, 0), kPi});
  CHECK(registration_loss(Rotation(), solve_rotation(half.matrix() * 5.0)) == doctest::Approx(8.0).epsilon(1e-12));
  const Rotation sixty = rotation_from_axis_angle({Eigen::Vector3d(0, 0, 1), kPi / 3});
  CHECK(registration_loss(Rotation(), solve_rotation(sixty.matrix())) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("backward_through_svd examples") {
  const Mat3 d = Eigen::Vector3d(3, 2, 1).asDiagonal();
  const ProcrustesSolution s = solve_rotation(d);
  CHECK(backward_through_svd(s, Mat3::Zero()).norm() == 0.0);

  RandomStream rng(7);
  const Rotation r_gt = sample_rotation(kPi, rng);
  const Mat3 analytic = backward_through_svd(s, registration_loss_grad(r_gt, s.r_est.matrix()));
  const Mat3 numeric = numeric_grad(d, r_gt, 1e-6);
  CHECK((analytic - numeric).cwiseAbs().maxCoeff() / numeric.cwiseAbs().maxCoeff() < 1e-4);

  CHECK_THROWS_AS(backward_through_svd(solve_rotation(r_gt.matrix()), Mat3::Identity()), GradientUnavailable);
}

TEST_CASE("svd gradient battery") {
  RandomStream rng(8);
  int done = 0;
  while (done < 100) {
    Mat3 h;
    for (int i = 0; i < 9; ++i) h.data()[i] = rng.uniform(-1, 1);
    const Eigen::Vector3d s = svd3(h).s;
    if (s(0) - s(1) < 0.02 * s(0) || s(1) - s(2) < 0.02 * s(0) || s(2) < 0.02 * s(0)) continue;
    ++done;
    const Rotation r_gt = sample_rotation(kPi, rng);
    const ProcrustesSolution sol = solve_rotation(h);
    const Mat3 analytic = backward_through_svd(sol, registration_loss_grad(r_gt, sol.r_est.matrix()));
    const Mat3 numeric = numeric_grad(h, r_gt, 1e-6);
    CHECK((analytic - numeric).cwiseAbs().maxCoeff() / numeric.cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("registration_step fallback") {
  RandomStream rng(9);
  const Rotation r = sample_rotation(kPi, rng);
  // Orthogonal h: all singular values equal.
  const RegistrationStep step = registration_step(r.matrix(), r);
  CHECK(step.fallback);
  CHECK(step.loss < 1e-20);
  CHECK(step.grad_h.allFinite());

  const RegistrationStep zero = registration_step(Mat3::Zero(), r);
  CHECK(zero.gradient_dropped);
  CHECK(zero.grad_h.norm() == 0.0);

  const Mat3 h = Eigen::Vector3d(3, 2, 1).asDiagonal();
  const RegistrationStep ok = registration_step(h, r);
  CHECK_FALSE(ok.fallback);
  const ProcrustesSolution sol = solve_rotation(h);
  CHECK((ok.grad_h - backward_through_svd(sol, registration_loss_grad(r, sol.r_est.matrix()))).norm() < 1e-15);
}

}
