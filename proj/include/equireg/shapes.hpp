#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "equireg/geom3.hpp"
#include "equireg/random.hpp"

namespace equireg {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Applies p' = p * R row by row with a fixed scalar operation order, so equal
/// input rows always map to bit-identical output rows.
Points rotate_points(const Points& points, const Mat3& r);

enum class PrimitiveKind { sphere, box, ellipsoid, capsule };

const char* to_string(PrimitiveKind kind);
PrimitiveKind primitive_kind_from_string(const std::string& name);

/// Convex solid in its own frame. dims: sphere (r, -, -); box half-extents;
/// ellipsoid radii; capsule (radius, half-length along local z, -).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Eigen::Vector3d dims = Eigen::Vector3d::Constant(0.25);
  Vec3 center = Vec3::Zero();
  Rotation orientation;

  double bounding_radius() const;
  double surface_area() const;
};

/// Origin-centred procedural solid made of one primitive or a union of 2..4
/// overlapping primitives, with an optional global pose.
class ShapeModel {
 public:
  static ShapeModel single(const Primitive& p, std::uint64_t id = 0);
  static ShapeModel sphere(double radius, std::uint64_t id = 0);
  static ShapeModel box(const Eigen::Vector3d& half_extents, std::uint64_t id = 0);
  static ShapeModel ellipsoid(const Eigen::Vector3d& radii, std::uint64_t id = 0);
  static ShapeModel capsule(double radius, double half_length, std::uint64_t id = 0);
  /// Each primitive after the first must overlap an earlier one (its centre
  /// lies inside it, or the earlier centre lies inside it).
  static ShapeModel make_union(std::vector<Primitive> parts, std::uint64_t id = 0);

  /// Same solid under p' = p * r applied on top of the current pose.
  ShapeModel posed(const Rotation& r) const;

  bool is_union() const { return parts_.size() > 1; }
  /// Single spheres have an unobservable rotation.
  bool is_rotationally_symmetric() const;
  const std::vector<Primitive>& parts() const { return parts_; }
  const Rotation& pose() const { return pose_; }
  std::uint64_t id() const { return id_; }
  std::string kind_name() const;

  bool occupied(const Vec3& p) const;

 private:
  ShapeModel(std::vector<Primitive> parts, const Rotation& pose, std::uint64_t id);

  std::vector<Primitive> parts_;
  Rotation pose_;
  std::uint64_t id_ = 0;
};

/// Exact analytic inside test (closed solid).
int occupancy_oracle(const ShapeModel& shape, const Vec3& p);

struct Provenance {
  std::uint64_t shape_id = 0;
  double noise_sigma = 0.0;
  std::size_t sample_count = 0;
  double crop_fraction = 1.0;
  std::optional<std::uint64_t> permutation_seed;
};

struct PointCloud {
  Points points;
  Provenance provenance;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  /// Throws std::invalid_argument if fewer than 3 points or any non-finite coordinate.
  void validate() const;
};

struct QueryBatch {
  Points queries;
  Eigen::VectorXd labels;  ///< 0 or 1
};

struct QueryOptions {
  /// Fraction of queries drawn near the surface instead of uniformly in the cube.
  double near_surface_fraction = 0.0;
  double near_surface_sigma = 0.02;
};

struct PerturbationConfig {
  double noise_sigma = 0.0;
  std::size_t n_source = 1024;
  std::size_t n_target = 1024;
  double crop_fraction = 1.0;
  bool permute = true;
  /// Draw the target independently from the surface instead of copying the source.
  bool resample = false;

  void validate() const;

  static PerturbationConfig rotated_copy(std::size_t n = 1024);
  static PerturbationConfig noisy(std::size_t n = 1024, double sigma = 0.01);
  static PerturbationConfig density(std::size_t n_source = 1024, std::size_t n_target = 512);
  static PerturbationConfig partial(std::size_t n = 1024, double fraction = 0.7);
};

struct PointPair {
  PointCloud source;
  PointCloud target;
  Rotation r_gt;
};

PointCloud sample_surface(const ShapeModel& shape, std::size_t n, RandomStream& rng);
QueryBatch sample_queries(const ShapeModel& shape, std::size_t n, RandomStream& rng,
                          const QueryOptions& options = {});

PointCloud add_gaussian_noise(const PointCloud& pc, double sigma, RandomStream& rng);
PointCloud permute_rows(const PointCloud& pc, RandomStream& rng);

/// Keeps the ceil(fraction * N) points with the largest projection onto a
/// random unit direction (or the given one), in their original order.
PointCloud crop_halfspace(const PointCloud& pc, double fraction, RandomStream& rng);
PointCloud crop_halfspace(const PointCloud& pc, double fraction, const Eigen::Vector3d& direction);

PointPair make_pair(const ShapeModel& shape, const PerturbationConfig& cfg, double max_angle,
                    RandomStream& rng);

/// Random asymmetric union of 2..4 primitives fitting inside [-0.5, 0.5]^3.
ShapeModel random_union_shape(RandomStream& rng, std::uint64_t id);
/// Random single primitive (any kind, including spheres).
ShapeModel random_primitive_shape(RandomStream& rng, std::uint64_t id);
/// count random unions with ids 0..count-1; shape i uses rng.split(i).
std::vector<ShapeModel> make_shape_set(std::size_t count, const RandomStream& rng);

}  // namespace equireg
