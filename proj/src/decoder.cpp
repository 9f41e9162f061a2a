#include "equireg/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace equireg {
namespace {

constexpr double kSlope = DecoderParams::kLeakySlope;
constexpr double kClamp = DecoderParams::kLogitClamp;

double leaky(double x) { return x >= 0.0 ? x : kSlope * x; }

struct Forward {
  Eigen::MatrixXd input;                     // n x (C + 1)
  std::vector<Eigen::MatrixXd> pre;          // per layer, n x out
  std::vector<Eigen::MatrixXd> act;          // per hidden layer, n x out
  Eigen::VectorXd logits;                    // clamped
  Eigen::VectorXd raw;                       // before clamping
};

Forward run(const FeatureMatrix& q, const Points& queries, const DecoderParams& params) {
  if (params.weights.empty()) throw std::invalid_argument("decoder: no layers");
  if (static_cast<std::size_t>(q.rows()) != params.channels()) {
    throw std::invalid_argument("decoder: feature channels do not match decoder input");
  }
  Forward f;
  f.input = invariant_inputs(q, queries);
  const Eigen::MatrixXd* x = &f.input;
  const std::size_t layers = params.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = (*x) * params.weights[l].transpose();
    z.rowwise() += params.biases[l].col(0).transpose();
    f.pre.push_back(std::move(z));
    if (l + 1 < layers) {
      f.act.push_back(f.pre.back().unaryExpr(&leaky));
      x = &f.act.back();
    }
  }
  f.raw = f.pre.back().col(0);
  f.logits = f.raw.unaryExpr([](double z) { return std::clamp(z, -kClamp, kClamp); });
  return f;
}

// -[y log s(z) + (1 - y) log(1 - s(z))] = softplus(z) - y z
double bce_with_logit(double z, double y) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

DecoderParams DecoderParams::init(std::size_t channels, const std::vector<std::size_t>& hidden, RandomStream& rng) {
  DecoderParams p;
  std::size_t in = channels + 1;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(1);
  for (std::size_t out : widths) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd w(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    Eigen::MatrixXd b(static_cast<Eigen::Index>(out), 1);
    for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, 0) = rng.uniform(-bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
    in = out;
  }
  return p;
}

DecoderParams DecoderParams::zeros_like() const {
  DecoderParams z;
  for (const auto& w : weights) z.weights.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& b : biases) z.biases.push_back(Eigen::MatrixXd::Zero(b.rows(), b.cols()));
  return z;
}

void DecoderParams::validate(std::size_t expected_channels) const {
  if (weights.empty() || weights.size() != biases.size()) throw std::invalid_argument("decoder: malformed layers");
  if (this->channels() != expected_channels) throw std::invalid_argument("decoder: input width mismatch");
  Eigen::Index in = weights.front().cols();
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].cols() != in || biases[l].rows() != weights[l].rows() || biases[l].cols() != 1) {
      throw std::invalid_argument("decoder: inconsistent layer shapes");
    }
    if (!weights[l].allFinite() || !biases[l].allFinite()) throw std::invalid_argument("decoder: non-finite weights");
    in = weights[l].rows();
  }
  if (in != 1) throw std::invalid_argument("decoder: output head must be a single logit");
}

Eigen::MatrixXd invariant_inputs(const FeatureMatrix& q, const Points& queries) {
  const Eigen::Index c = q.rows();
  Eigen::MatrixXd s(queries.rows(), c + 1);
  s.leftCols(c).noalias() = queries * q.transpose();
  s.col(c) = queries.rowwise().squaredNorm();
  return s;
}

Eigen::VectorXd decode_logits(const FeatureMatrix& q, const Points& queries, const DecoderParams& params) {
  return run(q, queries, params).logits;
}

double decode_occupancy(const FeatureMatrix& q, const Vec3& p, const DecoderParams& params) {
  Points one(1, 3);
  one.row(0) = p;
  return sigmoid(decode_logits(q, one, params)(0));
}

double occupancy_loss(const FeatureMatrix& q, const QueryBatch& batch, const DecoderParams& params) {
  if (batch.queries.rows() == 0) throw std::invalid_argument("occupancy_loss: empty batch");
  const Eigen::VectorXd z = decode_logits(q, batch.queries, params);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) sum += bce_with_logit(z(i), batch.labels(i));
  return sum / static_cast<double>(z.size());
}

OccupancyGradient occupancy_loss_and_grad(const FeatureMatrix& q, const QueryBatch& batch,
                                          const DecoderParams& params, DecoderParams* grad_params, double scale) {
  const Eigen::Index n = batch.queries.rows();
  if (n == 0) throw std::invalid_argument("occupancy_loss: empty batch");
  const Forward f = run(q, batch.queries, params);

  OccupancyGradient out;
  Eigen::MatrixXd grad(n, 1);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = f.logits(i);
    sum += bce_with_logit(z, batch.labels(i));
    // Clamping is flat outside [-30, 30].
    const bool clamped = f.raw(i) > kClamp || f.raw(i) < -kClamp;
    grad(i, 0) = clamped ? 0.0 : scale * (sigmoid(z) - batch.labels(i)) / static_cast<double>(n);
  }
  out.loss = sum / static_cast<double>(n);

  const std::size_t layers = params.weights.size();
  for (std::size_t l = layers; l-- > 0;) {
    const Eigen::MatrixXd& x = l == 0 ? f.input : f.act[l - 1];
    if (grad_params) {
      grad_params->weights[l].noalias() += grad.transpose() * x;
      grad_params->biases[l].col(0) += grad.colwise().sum().transpose();
    }
    Eigen::MatrixXd gx = grad * params.weights[l];
    if (l > 0) {
      const Eigen::MatrixXd& pre = f.pre[l - 1];
      gx = gx.cwiseProduct(pre.unaryExpr([](double z) { return z >= 0.0 ? 1.0 : kSlope; }));
    }
    grad = std::move(gx);
  }
  // grad is now d/d(input), n x (C + 1); only the <q_c, p> columns depend on q.
  const Eigen::Index c = q.rows();
  out.grad_q = grad.leftCols(c).transpose() * batch.queries;
  return out;
}

double occupancy_accuracy(const FeatureMatrix& q, const QueryBatch& batch, const DecoderParams& params) {
  const Eigen::VectorXd z = decode_logits(q, batch.queries, params);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) correct += ((z(i) >= 0.0 ? 1.0 : 0.0) == batch.labels(i)) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(z.size());
}

void record_occupancy_loss(Tape& tape, Tape::Node q, const QueryBatch& batch, const DecoderParams& params,
                           DecoderParams* grad_params, double weight) {
  // The forward pass already yields every gradient; keep them for the sweep.
  auto local = std::make_shared<DecoderParams>(params.zeros_like());
  const OccupancyGradient g =
      occupancy_loss_and_grad(tape.value(q).global(), batch, params, grad_params ? local.get() : nullptr, weight);
  tape.add_loss(weight * g.loss, [q, grad_q = g.grad_q, local, grad_params](Tape& t, double seed) {
    if (grad_params) {
      for (std::size_t l = 0; l < local->weights.size(); ++l) {
        grad_params->weights[l] += seed * local->weights[l];
        grad_params->biases[l] += seed * local->biases[l];
      }
    }
    if (VNFeature* gq = t.grad_if_needed(q)) *gq += VNFeature::from_global(seed * grad_q);
  });
}

}  // namespace equireg
