#pragma once

// Vector Neuron tensors and the equivariant layer set.
//
// A VNFeature holds N points x C channels of 3-vectors. Rotations act on the
// right of every 3-vector row: (V R)[n][c] = V[n][c] * R. Storage is
// channel-major, so the whole tensor is a C x 3N row-major matrix and a
// linear layer over all points is a single matrix product.

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <vector>

#include "equireg/geom3.hpp"
#include "equireg/random.hpp"
#include "equireg/shapes.hpp"

namespace equireg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;  ///< C x 3 global feature

class VNFeature {
 public:
  VNFeature() = default;
  VNFeature(std::size_t points, std::size_t channels);

  /// One channel per point holding its coordinates (N x 1 x 3).
  static VNFeature from_points(const Points& points);
  /// 1 x C x 3 tensor from a C x 3 matrix.
  static VNFeature from_global(const FeatureMatrix& q);

  std::size_t points() const { return points_; }
  std::size_t channels() const { return channels_; }
  bool empty() const { return data_.empty(); }

  Eigen::Map<Vec3> row(std::size_t point, std::size_t channel) {
    return Eigen::Map<Vec3>(data_.data() + offset(point, channel));
  }
  Eigen::Map<const Vec3> row(std::size_t point, std::size_t channel) const {
    return Eigen::Map<const Vec3>(data_.data() + offset(point, channel));
  }

  /// C x 3N view.
  Eigen::Map<RowMatrix> matrix() {
    return {data_.data(), static_cast<Eigen::Index>(channels_), static_cast<Eigen::Index>(3 * points_)};
  }
  Eigen::Map<const RowMatrix> matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(channels_), static_cast<Eigen::Index>(3 * points_)};
  }

  /// The C x 3 matrix of a single-point (global) feature.
  FeatureMatrix global() const;

  VNFeature rotated(const Mat3& r) const;
  double max_abs() const;
  bool all_finite() const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  VNFeature& operator+=(const VNFeature& other);

 private:
  std::size_t offset(std::size_t point, std::size_t channel) const { return (channel * points_ + point) * 3; }

  std::size_t points_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

/// out[n] = w * v[n]; w is C_out x C_in.
VNFeature vn_linear(const VNFeature& v, const Eigen::MatrixXd& w);
/// Accumulates into grad_in (if non-null) and grad_w (if non-null).
void vn_linear_backward(const VNFeature& v, const Eigen::MatrixXd& w, const VNFeature& grad_out,
                        VNFeature* grad_in, Eigen::MatrixXd* grad_w);

/// Vectorised ReLU. u has one row (direction shared by all channels of a
/// point) or C rows (one direction per channel). Directions with norm below
/// 1e-12 pass the input through unchanged.
VNFeature vn_relu(const VNFeature& v, const Eigen::MatrixXd& u);
void vn_relu_backward(const VNFeature& v, const Eigen::MatrixXd& u, const VNFeature& grad_out,
                      VNFeature* grad_in, Eigen::MatrixXd* grad_u);

/// Channelwise mean over points, summed in the given order (index order if empty).
VNFeature vn_mean_pool(const VNFeature& v, std::span<const std::size_t> order = {});
void vn_mean_pool_backward(const VNFeature& v, const VNFeature& grad_out, VNFeature* grad_in);

/// Mean over consecutive groups of `group` points: (N*group) -> N.
VNFeature vn_group_mean(const VNFeature& v, std::size_t group);
void vn_group_mean_backward(const VNFeature& v, std::size_t group, const VNFeature& grad_out, VNFeature* grad_in);

/// Lexicographic (x, y, z, index) order of the points; the fixed summation
/// order of the global pool.
std::vector<std::size_t> canonical_order(const Points& points);

enum class GraphMode { knn, ball };

struct GraphConfig {
  GraphMode mode = GraphMode::knn;
  std::size_t k = 20;
  double radius = 0.2;

  void validate() const;
};

struct NeighborGraph {
  std::size_t points = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> index;  ///< points x k, row-major

  std::span<const std::uint32_t> neighbors(std::size_t i) const { return {index.data() + i * k, k}; }
};

/// knn: k nearest (squared Euclidean distance, ties to the lower index, self
/// excluded). ball: k draws with replacement from the points within radius,
/// point i drawing from rng.split(i); points with an empty ball fall back to knn.
NeighborGraph build_graph(const Points& points, const GraphConfig& cfg, RandomStream& rng);

/// Per-edge 2-channel input (x_j - x_i, x_i), laid out edge = i * k + m.
VNFeature edge_features(const Points& points, const NeighborGraph& graph);

struct EdgeConvParams {
  Eigen::MatrixXd linear;     ///< C0 x 2
  Eigen::MatrixXd direction;  ///< 1 x C0 (or C0 x C0)
};

/// linear -> ReLU on every edge, then the mean over each point's neighbours.
VNFeature edge_conv_init(const Points& points, const NeighborGraph& graph, const EdgeConvParams& p);

namespace testing {
/// Corrupts the ReLU direction gradient; lets the self-check prove it can fail.
void set_relu_gradient_fault(bool enabled);
bool relu_gradient_fault();
}  // namespace testing

}  // namespace equireg
