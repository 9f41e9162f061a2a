#include "equireg/vn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace equireg {
namespace {

std::atomic<bool> g_relu_fault{false};

constexpr double kDegenerateDirectionSq = 1e-24;  // |k| < 1e-12

Eigen::Index rows_of(std::size_t n) { return static_cast<Eigen::Index>(n); }

void check_direction_shape(const VNFeature& v, const Eigen::MatrixXd& u) {
  if (u.cols() != rows_of(v.channels()) || (u.rows() != 1 && u.rows() != rows_of(v.channels()))) {
    throw std::invalid_argument("vn_relu: direction weights must be 1 x C or C x C");
  }
}

}  // namespace

namespace testing {
void set_relu_gradient_fault(bool enabled) { g_relu_fault = enabled; }
bool relu_gradient_fault() { return g_relu_fault; }
}  // namespace testing

VNFeature::VNFeature(std::size_t points, std::size_t channels)
    : points_(points), channels_(channels), data_(points * channels * 3, 0.0) {}

VNFeature VNFeature::from_points(const Points& points) {
  VNFeature v(static_cast<std::size_t>(points.rows()), 1);
  for (Eigen::Index i = 0; i < points.rows(); ++i) v.row(static_cast<std::size_t>(i), 0) = points.row(i);
  return v;
}

VNFeature VNFeature::from_global(const FeatureMatrix& q) {
  VNFeature v(1, static_cast<std::size_t>(q.rows()));
  for (Eigen::Index c = 0; c < q.rows(); ++c) v.row(0, static_cast<std::size_t>(c)) = q.row(c);
  return v;
}

FeatureMatrix VNFeature::global() const {
  if (points_ != 1) throw std::invalid_argument("VNFeature::global: expected a single-point feature");
  FeatureMatrix q(rows_of(channels_), 3);
  for (std::size_t c = 0; c < channels_; ++c) q.row(rows_of(c)) = row(0, c);
  return q;
}

VNFeature VNFeature::rotated(const Mat3& r) const {
  VNFeature out(points_, channels_);
  const std::size_t rows = points_ * channels_;
  for (std::size_t i = 0; i < rows; ++i) {
    const double* src = data_.data() + 3 * i;
    double* dst = out.data_.data() + 3 * i;
    for (int j = 0; j < 3; ++j) dst[j] = src[0] * r(0, j) + src[1] * r(1, j) + src[2] * r(2, j);
  }
  return out;
}

double VNFeature::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

bool VNFeature::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

VNFeature& VNFeature::operator+=(const VNFeature& other) {
  if (other.points_ != points_ || other.channels_ != channels_) {
    throw std::invalid_argument("VNFeature: shape mismatch in +=");
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

VNFeature vn_linear(const VNFeature& v, const Eigen::MatrixXd& w) {
  if (w.cols() != rows_of(v.channels())) throw std::invalid_argument("vn_linear: weight/input channel mismatch");
  VNFeature out(v.points(), static_cast<std::size_t>(w.rows()));
  out.matrix().noalias() = w * v.matrix();
  return out;
}

void vn_linear_backward(const VNFeature& v, const Eigen::MatrixXd& w, const VNFeature& grad_out,
                        VNFeature* grad_in, Eigen::MatrixXd* grad_w) {
  if (grad_w) grad_w->noalias() += grad_out.matrix() * v.matrix().transpose();
  if (grad_in) grad_in->matrix().noalias() += w.transpose() * grad_out.matrix();
}

VNFeature vn_relu(const VNFeature& v, const Eigen::MatrixXd& u) {
  check_direction_shape(v, u);
  const RowMatrix k = u * v.matrix();
  const bool shared = u.rows() == 1;
  VNFeature out = v;
  for (std::size_t c = 0; c < v.channels(); ++c) {
    const Eigen::Index kr = shared ? 0 : rows_of(c);
    for (std::size_t n = 0; n < v.points(); ++n) {
      const Vec3 dir = k.block<1, 3>(kr, rows_of(3 * n));
      const double norm_sq = dir.squaredNorm();
      if (norm_sq < kDegenerateDirectionSq) continue;
      const auto x = v.row(n, c);
      const double dot = x.dot(dir);
      if (dot >= 0.0) continue;
      out.row(n, c) = x - (dot / norm_sq) * dir;
    }
  }
  return out;
}

void vn_relu_backward(const VNFeature& v, const Eigen::MatrixXd& u, const VNFeature& grad_out,
                      VNFeature* grad_in, Eigen::MatrixXd* grad_u) {
  check_direction_shape(v, u);
  const RowMatrix k = u * v.matrix();
  const bool shared = u.rows() == 1;
  RowMatrix grad_k = RowMatrix::Zero(k.rows(), k.cols());
  const double fault = testing::relu_gradient_fault() ? 1.5 : 1.0;

  for (std::size_t c = 0; c < v.channels(); ++c) {
    const Eigen::Index kr = shared ? 0 : rows_of(c);
    for (std::size_t n = 0; n < v.points(); ++n) {
      const Vec3 g = grad_out.row(n, c);
      const Vec3 dir = k.block<1, 3>(kr, rows_of(3 * n));
      const double norm_sq = dir.squaredNorm();
      const Vec3 x = v.row(n, c);
      const double dot = x.dot(dir);
      if (norm_sq < kDegenerateDirectionSq || dot >= 0.0) {
        if (grad_in) grad_in->row(n, c) += g;
        continue;
      }
      // out = x - (x.k / k.k) k
      const double gk = g.dot(dir);
      if (grad_in) grad_in->row(n, c) += g - (gk / norm_sq) * dir;
      grad_k.block<1, 3>(kr, rows_of(3 * n)) +=
          fault * (-(gk * x + dot * g) / norm_sq + (2.0 * dot * gk / (norm_sq * norm_sq)) * dir);
    }
  }
  // k = u * V
  if (grad_u) grad_u->noalias() += grad_k * v.matrix().transpose();
  if (grad_in) grad_in->matrix().noalias() += u.transpose() * grad_k;
}

VNFeature vn_mean_pool(const VNFeature& v, std::span<const std::size_t> order) {
  if (v.points() == 0) throw std::invalid_argument("vn_mean_pool: empty feature");
  if (!order.empty() && order.size() != v.points()) throw std::invalid_argument("vn_mean_pool: order size mismatch");
  VNFeature out(1, v.channels());
  const double inv = 1.0 / static_cast<double>(v.points());
  for (std::size_t c = 0; c < v.channels(); ++c) {
    Vec3 sum = Vec3::Zero();
    for (std::size_t i = 0; i < v.points(); ++i) sum += v.row(order.empty() ? i : order[i], c);
    out.row(0, c) = sum * inv;
  }
  return out;
}

void vn_mean_pool_backward(const VNFeature& v, const VNFeature& grad_out, VNFeature* grad_in) {
  if (!grad_in) return;
  const double inv = 1.0 / static_cast<double>(v.points());
  for (std::size_t c = 0; c < v.channels(); ++c) {
    const Vec3 g = grad_out.row(0, c) * inv;
    for (std::size_t n = 0; n < v.points(); ++n) grad_in->row(n, c) += g;
  }
}

VNFeature vn_group_mean(const VNFeature& v, std::size_t group) {
  if (group == 0 || v.points() % group != 0) throw std::invalid_argument("vn_group_mean: bad group size");
  const std::size_t n_out = v.points() / group;
  VNFeature out(n_out, v.channels());
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t c = 0; c < v.channels(); ++c) {
    for (std::size_t i = 0; i < n_out; ++i) {
      Vec3 sum = Vec3::Zero();
      for (std::size_t m = 0; m < group; ++m) sum += v.row(i * group + m, c);
      out.row(i, c) = sum * inv;
    }
  }
  return out;
}

void vn_group_mean_backward(const VNFeature& v, std::size_t group, const VNFeature& grad_out, VNFeature* grad_in) {
  if (!grad_in) return;
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t c = 0; c < v.channels(); ++c) {
    for (std::size_t i = 0; i < grad_out.points(); ++i) {
      const Vec3 g = grad_out.row(i, c) * inv;
      for (std::size_t m = 0; m < group; ++m) grad_in->row(i * group + m, c) += g;
    }
  }
}

std::vector<std::size_t> canonical_order(const Points& points) {
  std::vector<std::size_t> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (int d = 0; d < 3; ++d) {
      const double pa = points(rows_of(a), d), pb = points(rows_of(b), d);
      if (pa != pb) return pa < pb;
    }
    return a < b;
  });
  return order;
}

void GraphConfig::validate() const {
  if (k < 1) throw std::invalid_argument("graph: k must be >= 1");
  if (!(radius > 0.0)) throw std::invalid_argument("graph: radius must be > 0");
}

NeighborGraph build_graph(const Points& points, const GraphConfig& cfg, RandomStream& rng) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(points.rows());
  if (n <= 1) throw std::invalid_argument("build_graph: need at least 2 points");
  if (cfg.mode == GraphMode::knn && n <= cfg.k) {
    throw std::invalid_argument("build_graph: knn mode needs more points than k");
  }

  NeighborGraph graph{n, cfg.k, std::vector<std::uint32_t>(n * cfg.k)};
  std::vector<std::pair<double, std::uint32_t>> cand;
  cand.reserve(n);
  const double r2 = cfg.radius * cfg.radius;

  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    const double xi = points(rows_of(i), 0), yi = points(rows_of(i), 1), zi = points(rows_of(i), 2);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = points(rows_of(j), 0) - xi;
      const double dy = points(rows_of(j), 1) - yi;
      const double dz = points(rows_of(j), 2) - zi;
      cand.emplace_back(dx * dx + dy * dy + dz * dz, static_cast<std::uint32_t>(j));
    }
    std::uint32_t* out = graph.index.data() + i * cfg.k;

    if (cfg.mode == GraphMode::ball) {
      auto in_ball_end = std::partition(cand.begin(), cand.end(), [&](const auto& c) { return c.first <= r2; });
      const auto count = static_cast<std::size_t>(in_ball_end - cand.begin());
      if (count > 0) {
        std::sort(cand.begin(), in_ball_end);
        RandomStream draw = rng.split(i);
        for (std::size_t m = 0; m < cfg.k; ++m) out[m] = cand[draw.index(count)].second;
        continue;
      }
    }
    const std::size_t take = std::min(cfg.k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
    // Cycling only happens for ball-mode fallbacks on tiny clouds.
    for (std::size_t m = 0; m < cfg.k; ++m) out[m] = cand[m % take].second;
  }
  return graph;
}

VNFeature edge_features(const Points& points, const NeighborGraph& graph) {
  if (graph.points != static_cast<std::size_t>(points.rows())) {
    throw std::invalid_argument("edge_features: graph does not match the point cloud");
  }
  VNFeature e(graph.points * graph.k, 2);
  for (std::size_t i = 0; i < graph.points; ++i) {
    const Vec3 xi = points.row(rows_of(i));
    for (std::size_t m = 0; m < graph.k; ++m) {
      const std::size_t edge = i * graph.k + m;
      e.row(edge, 0) = points.row(rows_of(graph.index[edge])) - xi;
      e.row(edge, 1) = xi;
    }
  }
  return e;
}

VNFeature edge_conv_init(const Points& points, const NeighborGraph& graph, const EdgeConvParams& p) {
  if (p.linear.cols() != 2) throw std::invalid_argument("edge_conv_init: linear weights must be C0 x 2");
  const VNFeature e = edge_features(points, graph);
  return vn_group_mean(vn_relu(vn_linear(e, p.linear), p.direction), graph.k);
}

}  // namespace equireg
