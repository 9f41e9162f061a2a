#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "equireg/shapes.hpp"

using namespace equireg;
constexpr double kPi = std::numbers::pi;

namespace {

std::vector<std::array<double, 3>> sorted_rows(const Points& p) {
  std::vector<std::array<double, 3>> rows(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) rows[static_cast<std::size_t>(i)] = {p(i, 0), p(i, 1), p(i, 2)};
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

TEST_SUITE("shapes") {

TEST_CASE("occupancy_oracle examples") {
  const ShapeModel s = ShapeModel::sphere(0.4);
  CHECK(occupancy_oracle(s, Vec3(0, 0, 0)) == 1);
  CHECK(occupancy_oracle(s, Vec3(0.49, 0.49, 0.49)) == 0);
  const ShapeModel b = ShapeModel::box(Eigen::Vector3d(0.3, 0.2, 0.1));
  CHECK(occupancy_oracle(b, Vec3(0.29, 0, 0)) == 1);
  CHECK(occupancy_oracle(b, Vec3(0.31, 0, 0)) == 0);
  CHECK(occupancy_oracle(b, Vec3(0, 0.15, 0.11)) == 0);
}

TEST_CASE("oracle is rotation-consistent") {
  RandomStream rng(2);
  const auto shapes = make_shape_set(5, rng.split(0));
  for (const auto& shape : shapes) {
    const Rotation r = sample_rotation(kPi, rng);
    const ShapeModel posed = shape.posed(r);
    for (int i = 0; i < 2000; ++i) {
      const Vec3 p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
      REQUIRE(occupancy_oracle(posed, p) == occupancy_oracle(shape, p * r.matrix().transpose()));
    }
  }
}

TEST_CASE("sphere surface samples") {
  RandomStream rng(3);
  const ShapeModel s = ShapeModel::sphere(0.4);
  const PointCloud pc = sample_surface(s, 1024, rng);
  REQUIRE(pc.size() == 1024);
  for (Eigen::Index i = 0; i < pc.points.rows(); ++i) CHECK(std::abs(pc.points.row(i).norm() - 0.4) < 1e-9);
  const PointCloud big = sample_surface(s, 100000, rng);
  CHECK(big.points.colwise().mean().norm() < 0.01);
}

TEST_CASE("box surface samples lie on a face") {
  RandomStream rng(4);
  const Eigen::Vector3d half(0.3, 0.2, 0.1);
  const PointCloud pc = sample_surface(ShapeModel::box(half), 5000, rng);
  for (Eigen::Index i = 0; i < pc.points.rows(); ++i) {
    int on_face = 0;
    for (int d = 0; d < 3; ++d) {
      REQUIRE(std::abs(pc.points(i, d)) <= half(d) + 1e-12);
      if (std::abs(std::abs(pc.points(i, d)) - half(d)) < 1e-9) ++on_face;
    }
    CHECK(on_face == 1);
  }
}

TEST_CASE("union surface samples are on the boundary") {
  RandomStream rng(5);
  const auto shapes = make_shape_set(6, rng.split(0));
  for (const auto& shape : shapes) {
    REQUIRE(shape.is_union());
    REQUIRE_FALSE(shape.is_rotationally_symmetric());
    const PointCloud pc = sample_surface(shape, 500, rng);
    for (Eigen::Index i = 0; i < pc.points.rows(); ++i) {
      const Vec3 p = pc.points.row(i);
      REQUIRE(p.cwiseAbs().maxCoeff() <= 0.5);
      // A boundary point has both occupied and free space within a small step.
      bool in = false, out = false;
      for (int d = 0; d < 3; ++d) {
        for (double sgn : {-1.0, 1.0}) {
          Vec3 q = p;
          q(d) += sgn * 1e-6;
          (occupancy_oracle(shape, q) ? in : out) = true;
        }
      }
      const Vec3 dir = p.norm() > 0 ? Vec3(p / p.norm()) : Vec3(1, 0, 0);
      (occupancy_oracle(shape, p - 1e-6 * dir) ? in : out) = true;
      (occupancy_oracle(shape, p + 1e-6 * dir) ? in : out) = true;
      CHECK((in && out));
    }
  }
}

TEST_CASE("sample_queries") {
  RandomStream rng(6);
  const QueryBatch b = sample_queries(ShapeModel::sphere(0.4), 100000, rng);
  CHECK(b.queries.cwiseAbs().maxCoeff() <= 0.5);
  CHECK(std::abs(b.labels.mean() - 4.0 / 3.0 * kPi * 0.064) < 0.01);
  const QueryBatch one = sample_queries(ShapeModel::box(Eigen::Vector3d(0.2, 0.2, 0.2)), 1, rng);
  CHECK((one.labels(0) == 0.0 || one.labels(0) == 1.0));
  RandomStream a(7), c(7);
  const auto shape = make_shape_set(1, RandomStream(1))[0];
  CHECK(sample_queries(shape, 64, a).queries == sample_queries(shape, 64, c).queries);
}

TEST_CASE("union construction requires overlap") {
  Primitive a;
  a.kind = PrimitiveKind::sphere;
  a.dims = Eigen::Vector3d(0.1, 0, 0);
  a.center = Vec3(-0.3, 0, 0);
  Primitive b = a;
  b.center = Vec3(0.3, 0, 0);
  CHECK_THROWS_AS(ShapeModel::make_union({a, b}), std::invalid_argument);
  b.center = Vec3(-0.25, 0, 0);
  CHECK_NOTHROW(ShapeModel::make_union({a, b}));
}

TEST_CASE("rotated copy is an exact permuted rotation") {
  RandomStream rng(8);
  const auto shape = make_shape_set(1, rng.split(0))[0];
  const PointPair pair = make_pair(shape, PerturbationConfig::rotated_copy(1024), kPi, rng);
  REQUIRE(pair.target.size() == 1024);
  const auto expect = sorted_rows(rotate_points(pair.source.points, pair.r_gt.matrix()));
  const auto got = sorted_rows(pair.target.points);
  CHECK(expect == got);
  CHECK(pair.source.points != pair.target.points);
}

TEST_CASE("make_pair determinism and counts") {
  const auto shape = make_shape_set(1, RandomStream(1))[0];
  RandomStream a(9), b(9);
  const PointPair p1 = make_pair(shape, PerturbationConfig::density(1024, 512), kPi, a);
  const PointPair p2 = make_pair(shape, PerturbationConfig::density(1024, 512), kPi, b);
  CHECK(p1.source.points == p2.source.points);
  CHECK(p1.target.points == p2.target.points);
  CHECK(p1.r_gt.matrix() == p2.r_gt.matrix());
  CHECK(p1.source.size() == 1024);
  CHECK(p1.target.size() == 512);

  RandomStream c(10);
  const PointPair crop = make_pair(shape, PerturbationConfig::partial(1000, 0.7), kPi, c);
  CHECK(crop.source.size() == 700);
  CHECK(crop.target.size() == 700);

  PerturbationConfig tiny = PerturbationConfig::rotated_copy(4);
  tiny.crop_fraction = 0.5;
  RandomStream d(11);
  CHECK_THROWS_AS(make_pair(shape, tiny, kPi, d), std::invalid_argument);
}

TEST_CASE("gaussian noise level") {
  RandomStream rng(12);
  PointCloud pc{Points::Zero(100000, 3), {}};
  const PointCloud noisy = add_gaussian_noise(pc, 0.01, rng);
  const double var = noisy.points.squaredNorm() / (3.0 * 100000);
  CHECK(std::abs(std::sqrt(var) - 0.01) < 0.05 * 0.01);
  CHECK(noisy.provenance.noise_sigma == 0.01);
}

TEST_CASE("crop_halfspace") {
  RandomStream rng(13);
  const PointCloud sphere = sample_surface(ShapeModel::sphere(0.4), 1000, rng);
  CHECK(crop_halfspace(sphere, 1.0, rng).points == sphere.points);
  CHECK(crop_halfspace(sphere, 0.7, rng).size() == 700);
  const PointCloud half = crop_halfspace(sphere, 0.5, Eigen::Vector3d(0, 0, 1));
  std::vector<double> zc(sphere.points.rows());
  for (Eigen::Index i = 0; i < sphere.points.rows(); ++i) zc[static_cast<std::size_t>(i)] = sphere.points(i, 2);
  std::nth_element(zc.begin(), zc.begin() + 499, zc.end());
  for (Eigen::Index i = 0; i < half.points.rows(); ++i) CHECK(half.points(i, 2) >= zc[499]);
  CHECK_THROWS_AS(crop_halfspace(sphere, 0.0, rng), std::invalid_argument);
  PointCloud small{sphere.points.topRows(4), {}};
  CHECK_THROWS_AS(crop_halfspace(small, 0.5, rng), std::invalid_argument);
}

TEST_CASE("random unions are origin-centred") {
  RandomStream rng(6);
  const auto shapes = make_shape_set(8, rng.split(0));
  for (const auto& shape : shapes) {
    // Independent stream from the one used during construction.
    RandomStream probe = rng.split(shape.id() + 100);
    const Vec3 c = sample_surface(shape, 40000, probe).points.colwise().mean();
    CHECK(c.norm() < 0.01);
    for (const auto& p : shape.parts()) CHECK(p.center.norm() + p.bounding_radius() <= 0.5);
  }
}

TEST_CASE("rotate_points maps equal rows identically") {
  Points p(3, 3);
  p << 0.1, 0.2, 0.3, 0.1, 0.2, 0.3, -0.4, 0.0, 0.25;
  RandomStream rng(14);
  const Points q = rotate_points(p, sample_rotation(kPi, rng).matrix());
  CHECK(q.row(0) == q.row(1));
}

}
