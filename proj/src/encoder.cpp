#include "equireg/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace equireg {
namespace {

Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, RandomStream& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

Eigen::MatrixXd init_weights(std::size_t out, std::size_t in, RandomStream& rng) {
  return uniform_matrix(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in),
                        1.0 / std::sqrt(static_cast<double>(in)), rng);
}

void expect_shape(const Eigen::MatrixXd& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != static_cast<Eigen::Index>(rows) || m.cols() != static_cast<Eigen::Index>(cols)) {
    throw std::invalid_argument(std::string("model: wrong shape for ") + what);
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (c0 < 1 || c_out < 3) throw std::invalid_argument("encoder: need c0 >= 1 and c_out >= 3");
  for (std::size_t w : hidden)
    if (w < 1) throw std::invalid_argument("encoder: hidden widths must be >= 1");
  graph.validate();
}

std::size_t EncoderConfig::min_points() const { return graph.mode == GraphMode::knn ? graph.k + 1 : 3; }

EncoderConfig EncoderConfig::full() { return {}; }

EncoderConfig EncoderConfig::fast() {
  EncoderConfig cfg;
  cfg.c_out = 64;
  return cfg;
}

ModelParams ModelParams::init(const Topology& topology, RandomStream& rng) {
  const EncoderConfig& cfg = topology.encoder;
  cfg.validate();
  ModelParams p;
  p.topology = topology;
  p.encoder.edge.linear = init_weights(cfg.c0, 2, rng);
  p.encoder.edge.direction = init_weights(1, cfg.c0, rng);
  std::size_t width = cfg.c0;
  for (std::size_t h : cfg.hidden) {
    p.encoder.hidden.push_back({init_weights(h, width, rng), init_weights(1, h, rng)});
    width = h;
  }
  p.encoder.out = init_weights(cfg.c_out, width, rng);
  p.decoder = DecoderParams::init(cfg.c_out, topology.decoder_hidden, rng);
  return p;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  z.for_each_tensor([](Eigen::MatrixXd& m) { m.setZero(); });
  return z;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const Eigen::MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

void ModelParams::validate() const {
  const EncoderConfig& cfg = topology.encoder;
  cfg.validate();
  expect_shape(encoder.edge.linear, cfg.c0, 2, "edge linear");
  expect_shape(encoder.edge.direction, 1, cfg.c0, "edge direction");
  if (encoder.hidden.size() != cfg.hidden.size()) throw std::invalid_argument("model: hidden layer count mismatch");
  std::size_t width = cfg.c0;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    expect_shape(encoder.hidden[i].linear, cfg.hidden[i], width, "hidden linear");
    expect_shape(encoder.hidden[i].direction, 1, cfg.hidden[i], "hidden direction");
    width = cfg.hidden[i];
  }
  expect_shape(encoder.out, cfg.c_out, width, "output linear");
  if (decoder.weights.size() != topology.decoder_hidden.size() + 1) {
    throw std::invalid_argument("model: decoder layer count mismatch");
  }
  for (std::size_t l = 0; l < topology.decoder_hidden.size(); ++l) {
    if (decoder.weights[l].rows() != static_cast<Eigen::Index>(topology.decoder_hidden[l])) {
      throw std::invalid_argument("model: decoder width mismatch");
    }
  }
  decoder.validate(cfg.c_out);
  for_each_tensor([](const Eigen::MatrixXd& m) {
    if (!m.allFinite()) throw std::invalid_argument("model: non-finite weight");
  });
}

Tape::Node record_encode(Tape& tape, const Points& points, const EncoderConfig& cfg, const EncoderParams& params,
                         EncoderParams* grad, RandomStream& rng) {
  if (static_cast<std::size_t>(points.rows()) < cfg.min_points()) {
    throw std::invalid_argument("encode: too few points for the neighbourhood size");
  }
  if (!points.allFinite()) throw std::invalid_argument("encode: non-finite coordinates");
  const NeighborGraph graph = build_graph(points, cfg.graph, rng);

  Tape::Node x = tape.constant(edge_features(points, graph));
  x = record_linear(tape, x, params.edge.linear, grad ? &grad->edge.linear : nullptr);
  x = record_relu(tape, x, params.edge.direction, grad ? &grad->edge.direction : nullptr);
  x = record_group_mean(tape, x, graph.k);
  for (std::size_t i = 0; i < params.hidden.size(); ++i) {
    x = record_linear(tape, x, params.hidden[i].linear, grad ? &grad->hidden[i].linear : nullptr);
    x = record_relu(tape, x, params.hidden[i].direction, grad ? &grad->hidden[i].direction : nullptr);
  }
  x = record_mean_pool(tape, x, canonical_order(points));
  return record_linear(tape, x, params.out, grad ? &grad->out : nullptr);
}

FeatureMatrix encode(const PointCloud& pc, const ModelParams& params, RandomStream& rng) {
  Tape tape;
  const Tape::Node q = record_encode(tape, pc.points, params.topology.encoder, params.encoder, nullptr, rng);
  return tape.value(q).global();
}

FeatureMatrix encode(const PointCloud& pc, const ModelParams& params) {
  RandomStream rng(0);
  return encode(pc, params, rng);
}

}  // namespace equireg
