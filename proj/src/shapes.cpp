#include "equireg/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace equireg {
namespace {

constexpr double kPi = std::numbers::pi;

Eigen::Vector3d unit_sphere(RandomStream& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * kPi);
  const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {rho * std::cos(phi), rho * std::sin(phi), z};
}

// Implicit "level" of a point in the primitive frame: <= 1 inside, 1 on the surface.
double level(const Primitive& p, const Eigen::Vector3d& l) {
  switch (p.kind) {
    case PrimitiveKind::sphere:
      return l.squaredNorm() / (p.dims.x() * p.dims.x());
    case PrimitiveKind::box:
      return l.cwiseAbs().cwiseQuotient(p.dims).maxCoeff();
    case PrimitiveKind::ellipsoid:
      return l.cwiseQuotient(p.dims).squaredNorm();
    case PrimitiveKind::capsule: {
      const double dz = std::clamp(l.z(), -p.dims.y(), p.dims.y());
      const Eigen::Vector3d d(l.x(), l.y(), l.z() - dz);
      return d.squaredNorm() / (p.dims.x() * p.dims.x());
    }
  }
  return 2.0;
}

// Shape-frame point -> primitive frame.
Eigen::Vector3d to_local(const Primitive& p, const Vec3& q) {
  return ((q - p.center) * p.orientation.matrix().transpose()).transpose();
}

Vec3 from_local(const Primitive& p, const Eigen::Vector3d& l) {
  return l.transpose() * p.orientation.matrix() + p.center;
}

Eigen::Vector3d sample_primitive_surface(const Primitive& p, RandomStream& rng) {
  switch (p.kind) {
    case PrimitiveKind::sphere:
      return p.dims.x() * unit_sphere(rng);
    case PrimitiveKind::box: {
      const Eigen::Vector3d& h = p.dims;
      const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
      const double total = areas[0] + areas[1] + areas[2];
      double pick = rng.uniform() * total;
      int axis = 0;
      while (axis < 2 && pick >= areas[axis]) {
        pick -= areas[axis];
        ++axis;
      }
      Eigen::Vector3d out;
      for (int i = 0; i < 3; ++i) out[i] = rng.uniform(-h[i], h[i]);
      out[axis] = rng.uniform() < 0.5 ? -h[axis] : h[axis];
      return out;
    }
    case PrimitiveKind::ellipsoid: {
      // Map the unit sphere and accept with probability proportional to the
      // local area stretch abc * |u / radii|.
      const Eigen::Vector3d& a = p.dims;
      const double bound = 1.0 / a.minCoeff();
      for (;;) {
        const Eigen::Vector3d u = unit_sphere(rng);
        const double stretch = u.cwiseQuotient(a).norm();
        if (rng.uniform() * bound <= stretch) {
          Eigen::Vector3d x = u.cwiseProduct(a);
          // Project back onto the level set to remove rounding drift.
          return x / std::sqrt(x.cwiseQuotient(a).squaredNorm());
        }
      }
    }
    case PrimitiveKind::capsule: {
      const double r = p.dims.x();
      const double half = p.dims.y();
      const double lateral = 4.0 * kPi * r * half;
      const double caps = 4.0 * kPi * r * r;
      if (rng.uniform() * (lateral + caps) < lateral) {
        const double phi = rng.uniform(0.0, 2.0 * kPi);
        return {r * std::cos(phi), r * std::sin(phi), rng.uniform(-half, half)};
      }
      Eigen::Vector3d d = unit_sphere(rng);
      Eigen::Vector3d out = r * d;
      out.z() += d.z() >= 0.0 ? half : -half;
      return out;
    }
  }
  return Eigen::Vector3d::Zero();
}

void validate_primitive(const Primitive& p) {
  const int used = p.kind == PrimitiveKind::sphere ? 1 : p.kind == PrimitiveKind::capsule ? 2 : 3;
  for (int i = 0; i < used; ++i) {
    if (!(p.dims[i] > 0.0) || !std::isfinite(p.dims[i])) {
      throw std::invalid_argument("shape: primitive dimensions must be positive and finite");
    }
  }
  if (!p.center.allFinite()) throw std::invalid_argument("shape: non-finite primitive centre");
  if (p.center.norm() + p.bounding_radius() > 0.5 + 1e-12) {
    throw std::invalid_argument("shape: primitive leaves the unit cube [-0.5, 0.5]^3");
  }
}

Primitive random_primitive(RandomStream& rng, double scale) {
  Primitive p;
  p.kind = static_cast<PrimitiveKind>(rng.index(4));
  switch (p.kind) {
    case PrimitiveKind::sphere:
      p.dims = Eigen::Vector3d(rng.uniform(0.12, 0.3) * scale, 0.0, 0.0);
      break;
    case PrimitiveKind::box:
      for (int i = 0; i < 3; ++i) p.dims[i] = rng.uniform(0.08, 0.28) * scale;
      break;
    case PrimitiveKind::ellipsoid:
      for (int i = 0; i < 3; ++i) p.dims[i] = rng.uniform(0.1, 0.3) * scale;
      break;
    case PrimitiveKind::capsule:
      p.dims = Eigen::Vector3d(rng.uniform(0.08, 0.18) * scale, rng.uniform(0.05, 0.2) * scale, 0.0);
      break;
  }
  p.orientation = sample_rotation(kPi, rng);
  return p;
}

}  // namespace

Points rotate_points(const Points& points, const Mat3& r) {
  Points out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double x = points(i, 0), y = points(i, 1), z = points(i, 2);
    for (int j = 0; j < 3; ++j) out(i, j) = x * r(0, j) + y * r(1, j) + z * r(2, j);
  }
  return out;
}

const char* to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::sphere: return "sphere";
    case PrimitiveKind::box: return "box";
    case PrimitiveKind::ellipsoid: return "ellipsoid";
    case PrimitiveKind::capsule: return "capsule";
  }
  return "unknown";
}

PrimitiveKind primitive_kind_from_string(const std::string& name) {
  if (name == "sphere") return PrimitiveKind::sphere;
  if (name == "box") return PrimitiveKind::box;
  if (name == "ellipsoid") return PrimitiveKind::ellipsoid;
  if (name == "capsule") return PrimitiveKind::capsule;
  throw std::invalid_argument("unknown primitive kind: " + name);
}

double Primitive::bounding_radius() const {
  switch (kind) {
    case PrimitiveKind::sphere: return dims.x();
    case PrimitiveKind::box: return dims.norm();
    case PrimitiveKind::ellipsoid: return dims.maxCoeff();
    case PrimitiveKind::capsule: return dims.x() + dims.y();
  }
  return 0.0;
}

double Primitive::surface_area() const {
  switch (kind) {
    case PrimitiveKind::sphere: return 4.0 * kPi * dims.x() * dims.x();
    case PrimitiveKind::box: return 8.0 * (dims.x() * dims.y() + dims.y() * dims.z() + dims.x() * dims.z());
    case PrimitiveKind::ellipsoid: {
      // Knud Thomsen's approximation, within ~1% of the exact area.
      constexpr double e = 1.6075;
      const double ab = std::pow(dims.x() * dims.y(), e);
      const double bc = std::pow(dims.y() * dims.z(), e);
      const double ac = std::pow(dims.x() * dims.z(), e);
      return 4.0 * kPi * std::pow((ab + bc + ac) / 3.0, 1.0 / e);
    }
    case PrimitiveKind::capsule: return 4.0 * kPi * dims.x() * (dims.x() + dims.y());
  }
  return 0.0;
}

ShapeModel::ShapeModel(std::vector<Primitive> parts, const Rotation& pose, std::uint64_t id)
    : parts_(std::move(parts)), pose_(pose), id_(id) {}

ShapeModel ShapeModel::single(const Primitive& p, std::uint64_t id) {
  validate_primitive(p);
  return ShapeModel({p}, Rotation::identity(), id);
}

ShapeModel ShapeModel::sphere(double radius, std::uint64_t id) {
  return single({PrimitiveKind::sphere, Eigen::Vector3d(radius, 0, 0), Vec3::Zero(), {}}, id);
}

ShapeModel ShapeModel::box(const Eigen::Vector3d& half_extents, std::uint64_t id) {
  return single({PrimitiveKind::box, half_extents, Vec3::Zero(), {}}, id);
}

ShapeModel ShapeModel::ellipsoid(const Eigen::Vector3d& radii, std::uint64_t id) {
  return single({PrimitiveKind::ellipsoid, radii, Vec3::Zero(), {}}, id);
}

ShapeModel ShapeModel::capsule(double radius, double half_length, std::uint64_t id) {
  return single({PrimitiveKind::capsule, Eigen::Vector3d(radius, half_length, 0), Vec3::Zero(), {}}, id);
}

ShapeModel ShapeModel::make_union(std::vector<Primitive> parts, std::uint64_t id) {
  if (parts.size() < 2 || parts.size() > 4) {
    throw std::invalid_argument("shape: a union needs 2 to 4 primitives");
  }
  for (const auto& p : parts) validate_primitive(p);
  for (std::size_t j = 1; j < parts.size(); ++j) {
    bool overlaps = false;
    for (std::size_t i = 0; i < j && !overlaps; ++i) {
      overlaps = level(parts[i], to_local(parts[i], parts[j].center)) <= 1.0 ||
                 level(parts[j], to_local(parts[j], parts[i].center)) <= 1.0;
    }
    if (!overlaps) throw std::invalid_argument("shape: union primitives do not overlap");
  }
  return ShapeModel(std::move(parts), Rotation::identity(), id);
}

ShapeModel ShapeModel::posed(const Rotation& r) const {
  return ShapeModel(parts_, pose_ * r, id_);
}

bool ShapeModel::is_rotationally_symmetric() const {
  return parts_.size() == 1 && parts_[0].kind == PrimitiveKind::sphere && parts_[0].center.isZero();
}

std::string ShapeModel::kind_name() const {
  return is_union() ? "union" : to_string(parts_[0].kind);
}

bool ShapeModel::occupied(const Vec3& p) const {
  const Vec3 q = p * pose_.matrix().transpose();
  for (const auto& part : parts_) {
    if (level(part, to_local(part, q)) <= 1.0) return true;
  }
  return false;
}

int occupancy_oracle(const ShapeModel& shape, const Vec3& p) { return shape.occupied(p) ? 1 : 0; }

void PointCloud::validate() const {
  if (points.rows() < 3) throw std::invalid_argument("point cloud needs at least 3 points");
  if (!points.allFinite()) throw std::invalid_argument("point cloud has non-finite coordinates");
}

void PerturbationConfig::validate() const {
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw std::invalid_argument("perturbation: noise_sigma must be finite and >= 0");
  }
  if (n_source < 3 || n_target < 3) throw std::invalid_argument("perturbation: point counts must be >= 3");
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) {
    throw std::invalid_argument("perturbation: crop_fraction must lie in (0, 1]");
  }
  if (!resample && n_target > n_source) {
    throw std::invalid_argument("perturbation: a copied target cannot have more points than the source");
  }
}

PerturbationConfig PerturbationConfig::rotated_copy(std::size_t n) {
  return {0.0, n, n, 1.0, true, false};
}

PerturbationConfig PerturbationConfig::noisy(std::size_t n, double sigma) {
  return {sigma, n, n, 1.0, true, false};
}

PerturbationConfig PerturbationConfig::density(std::size_t n_source, std::size_t n_target) {
  return {0.0, n_source, n_target, 1.0, true, true};
}

PerturbationConfig PerturbationConfig::partial(std::size_t n, double fraction) {
  return {0.0, n, n, fraction, true, true};
}

PointCloud sample_surface(const ShapeModel& shape, std::size_t n, RandomStream& rng) {
  if (n < 3) throw std::invalid_argument("sample_surface: n must be >= 3");
  const auto& parts = shape.parts();
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : parts) {
    validate_primitive(p);
    total += p.surface_area();
    cumulative.push_back(total);
  }

  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(n), 3);
  const Mat3& pose = shape.pose().matrix();
  constexpr std::size_t kMaxAttempts = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t attempts = 0;
    for (;;) {
      if (++attempts > kMaxAttempts) {
        throw std::invalid_argument("sample_surface: no exposed surface found (degenerate union)");
      }
      const double pick = rng.uniform() * total;
      const std::size_t k = static_cast<std::size_t>(
          std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
      const std::size_t which = std::min(k, parts.size() - 1);
      const Vec3 q = from_local(parts[which], sample_primitive_surface(parts[which], rng));
      // Keep only exposed surface: reject points strictly inside another part.
      bool hidden = false;
      for (std::size_t j = 0; j < parts.size() && !hidden; ++j) {
        if (j != which) hidden = level(parts[j], to_local(parts[j], q)) < 1.0;
      }
      if (hidden) continue;
      pc.points.row(static_cast<Eigen::Index>(i)) = q * pose;
      break;
    }
  }
  pc.provenance.shape_id = shape.id();
  pc.provenance.sample_count = n;
  return pc;
}

QueryBatch sample_queries(const ShapeModel& shape, std::size_t n, RandomStream& rng,
                          const QueryOptions& options) {
  if (n < 1) throw std::invalid_argument("sample_queries: n must be >= 1");
  if (!(options.near_surface_fraction >= 0.0 && options.near_surface_fraction <= 1.0)) {
    throw std::invalid_argument("sample_queries: near_surface_fraction must lie in [0, 1]");
  }
  const auto n_near = static_cast<std::size_t>(std::floor(options.near_surface_fraction * static_cast<double>(n)));
  QueryBatch batch;
  batch.queries.resize(static_cast<Eigen::Index>(n), 3);
  batch.labels.resize(static_cast<Eigen::Index>(n));
  const std::size_t n_uniform = n - n_near;
  for (std::size_t i = 0; i < n_uniform; ++i) {
    for (int d = 0; d < 3; ++d) batch.queries(static_cast<Eigen::Index>(i), d) = rng.uniform(-0.5, 0.5);
  }
  if (n_near > 0) {
    RandomStream surf = rng.split(0x5eed);
    const PointCloud near = sample_surface(shape, std::max<std::size_t>(n_near, 3), surf);
    for (std::size_t i = 0; i < n_near; ++i) {
      for (int d = 0; d < 3; ++d) {
        const double v = near.points(static_cast<Eigen::Index>(i), d) + options.near_surface_sigma * rng.normal();
        batch.queries(static_cast<Eigen::Index>(n_uniform + i), d) = std::clamp(v, -0.5, 0.5);
      }
    }
  }
  for (Eigen::Index i = 0; i < batch.queries.rows(); ++i) {
    batch.labels(i) = occupancy_oracle(shape, batch.queries.row(i));
  }
  return batch;
}

PointCloud add_gaussian_noise(const PointCloud& pc, double sigma, RandomStream& rng) {
  PointCloud out = pc;
  if (sigma == 0.0) return out;
  for (Eigen::Index i = 0; i < out.points.rows(); ++i) {
    for (int d = 0; d < 3; ++d) out.points(i, d) += sigma * rng.normal();
  }
  out.provenance.noise_sigma = sigma;
  return out;
}

PointCloud permute_rows(const PointCloud& pc, RandomStream& rng) {
  const auto n = static_cast<std::size_t>(pc.points.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  PointCloud out = pc;
  for (std::size_t i = 0; i < n; ++i) {
    out.points.row(static_cast<Eigen::Index>(i)) = pc.points.row(static_cast<Eigen::Index>(order[i]));
  }
  out.provenance.permutation_seed = rng.key();
  return out;
}

PointCloud crop_halfspace(const PointCloud& pc, double fraction, const Eigen::Vector3d& direction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("crop: fraction must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(pc.points.rows());
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (keep < 3) throw std::invalid_argument("crop: fewer than 3 points would remain");
  if (keep >= n) return pc;

  const Eigen::Vector3d dir = direction.normalized();
  std::vector<double> proj(n);
  for (std::size_t i = 0; i < n; ++i) proj[i] = pc.points.row(static_cast<Eigen::Index>(i)).dot(dir.transpose());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proj[a] > proj[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());

  PointCloud out;
  out.provenance = pc.provenance;
  out.provenance.crop_fraction = pc.provenance.crop_fraction * fraction;
  out.points.resize(static_cast<Eigen::Index>(keep), 3);
  for (std::size_t i = 0; i < keep; ++i) {
    out.points.row(static_cast<Eigen::Index>(i)) = pc.points.row(static_cast<Eigen::Index>(order[i]));
  }
  return out;
}

PointCloud crop_halfspace(const PointCloud& pc, double fraction, RandomStream& rng) {
  return crop_halfspace(pc, fraction, unit_sphere(rng));
}

PointPair make_pair(const ShapeModel& shape, const PerturbationConfig& cfg, double max_angle,
                    RandomStream& rng) {
  cfg.validate();
  RandomStream src_rng = rng.split(1);
  RandomStream tgt_rng = rng.split(2);
  RandomStream rot_rng = rng.split(3);
  RandomStream noise_src = rng.split(4);
  RandomStream noise_tgt = rng.split(5);
  RandomStream crop_src = rng.split(6);
  RandomStream crop_tgt = rng.split(7);
  RandomStream perm_rng = rng.split(8);

  PointCloud source = sample_surface(shape, cfg.n_source, src_rng);
  PointCloud target;
  if (cfg.resample) {
    target = sample_surface(shape, cfg.n_target, tgt_rng);
  } else if (cfg.n_target == cfg.n_source) {
    target = source;
  } else {
    // Random subset of the source rows.
    target = permute_rows(source, tgt_rng);
    target.points.conservativeResize(static_cast<Eigen::Index>(cfg.n_target), 3);
    target.provenance.sample_count = cfg.n_target;
  }

  if (cfg.crop_fraction < 1.0) {
    source = crop_halfspace(source, cfg.crop_fraction, crop_src);
    target = crop_halfspace(target, cfg.crop_fraction, crop_tgt);
  }
  source = add_gaussian_noise(source, cfg.noise_sigma, noise_src);
  target = add_gaussian_noise(target, cfg.noise_sigma, noise_tgt);
  if (cfg.permute) target = permute_rows(target, perm_rng);

  const Rotation r_gt = sample_rotation(max_angle, rot_rng);
  target.points = rotate_points(target.points, r_gt.matrix());
  return {std::move(source), std::move(target), r_gt};
}

ShapeModel random_primitive_shape(RandomStream& rng, std::uint64_t id) {
  for (double scale = 1.0;; scale *= 0.9) {
    Primitive p = random_primitive(rng, scale);
    if (p.bounding_radius() <= 0.5) return ShapeModel::single(p, id);
  }
}

ShapeModel random_union_shape(RandomStream& rng, std::uint64_t id) {
  const std::size_t count = 2 + rng.index(3);
  for (;;) {
    std::vector<Primitive> parts;
    for (std::size_t k = 0; k < count; ++k) {
      bool placed = false;
      double scale = 1.0;
      for (int attempt = 0; attempt < 64 && !placed; ++attempt, scale *= 0.95) {
        Primitive p = random_primitive(rng, scale);
        if (k == 0) {
          p.center = 0.1 * unit_sphere(rng).transpose() * rng.uniform();
        } else {
          // Centre strictly inside an earlier (convex) part.
          const Primitive& host = parts[rng.index(parts.size())];
          const Vec3 s = from_local(host, sample_primitive_surface(host, rng));
          p.center = host.center + 0.7 * (s - host.center);
        }
        if (p.center.norm() + p.bounding_radius() <= 0.5) {
          parts.push_back(p);
          placed = true;
        }
      }
      if (!placed) break;
    }
    if (parts.size() != count) continue;
    // Move the surface centroid to the origin, then re-check the unit-cube fit.
    RandomStream centroid_rng = rng.split(0x63656e74);
    const PointCloud probe = sample_surface(ShapeModel::make_union(parts, id), 16384, centroid_rng);
    const Vec3 centroid = probe.points.colwise().mean();
    bool fits = true;
    for (auto& p : parts) {
      p.center -= centroid;
      fits = fits && p.center.norm() + p.bounding_radius() <= 0.5;
    }
    if (fits) return ShapeModel::make_union(std::move(parts), id);
  }
}

std::vector<ShapeModel> make_shape_set(std::size_t count, const RandomStream& rng) {
  std::vector<ShapeModel> shapes;
  shapes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    RandomStream child = rng.split(i);
    shapes.push_back(random_union_shape(child, i));
  }
  return shapes;
}

}  // namespace equireg
