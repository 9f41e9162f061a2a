#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "equireg/decoder.hpp"
#include "equireg/random.hpp"
#include "equireg/shapes.hpp"
#include "equireg/tape.hpp"
#include "equireg/vn.hpp"

namespace equireg {

struct EncoderConfig {
  std::size_t c0 = 32;
  std::vector<std::size_t> hidden{64, 128};
  std::size_t c_out = 342;
  GraphConfig graph;

  void validate() const;
  /// Minimum cloud size accepted by encode().
  std::size_t min_points() const;

  static EncoderConfig full();  ///< c_out = 342
  static EncoderConfig fast();   ///< c_out = 64
};

struct VNLayerParams {
  Eigen::MatrixXd linear;     ///< C_out x C_in
  Eigen::MatrixXd direction;  ///< 1 x C_out
};

struct EncoderParams {
  EdgeConvParams edge;
  std::vector<VNLayerParams> hidden;
  Eigen::MatrixXd out;  ///< c_out x last hidden width
};

struct Topology {
  EncoderConfig encoder;
  std::vector<std::size_t> decoder_hidden{128, 128};
};

/// Every weight of the model plus the topology it was built for.
struct ModelParams {
  static constexpr std::uint32_t kFormatVersion = 1;

  Topology topology;
  EncoderParams encoder;
  DecoderParams decoder;

  static ModelParams init(const Topology& topology, RandomStream& rng);
  ModelParams zeros_like() const;

  /// Visits every weight tensor in declaration order: edge (linear, direction),
  /// hidden layers (linear, direction), out, then decoder (weight, bias) per layer.
  template <class F>
  void for_each_tensor(F&& f) {
    f(encoder.edge.linear);
    f(encoder.edge.direction);
    for (auto& layer : encoder.hidden) {
      f(layer.linear);
      f(layer.direction);
    }
    f(encoder.out);
    for (std::size_t l = 0; l < decoder.weights.size(); ++l) {
      f(decoder.weights[l]);
      f(decoder.biases[l]);
    }
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor([&](Eigen::MatrixXd& m) { f(static_cast<const Eigen::MatrixXd&>(m)); });
  }

  std::size_t parameter_count() const;
  /// Throws std::invalid_argument if shapes disagree with the topology or a weight is non-finite.
  void validate() const;
};

/// Records the encoder on a tape and returns the 1 x c_out x 3 output node.
/// Pipeline: edge conv -> (linear, ReLU) per hidden width -> mean pool in
/// canonical point order -> linear to c_out. grad may be null.
Tape::Node record_encode(Tape& tape, const Points& points, const EncoderConfig& cfg, const EncoderParams& params,
                         EncoderParams* grad, RandomStream& rng);

/// Global equivariant feature Q = f(P), c_out x 3. The stream only matters in
/// ball mode; the overload without one uses a fixed stream.
FeatureMatrix encode(const PointCloud& pc, const ModelParams& params, RandomStream& rng);
FeatureMatrix encode(const PointCloud& pc, const ModelParams& params);

}  // namespace equireg
