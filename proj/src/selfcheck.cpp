#include "equireg/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>

#include "equireg/decoder.hpp"
#include "equireg/encoder.hpp"
#include "equireg/parallel.hpp"
#include "equireg/registration.hpp"
#include "equireg/shapes.hpp"
#include "equireg/tape.hpp"
#include "equireg/vn.hpp"

namespace equireg {
namespace {

constexpr double kStep = 1e-6;
constexpr double kReluMargin = 1e-4;

template <class Derived>
double inf_norm(const Eigen::DenseBase<Derived>& m) {
  return m.size() == 0 ? 0.0 : m.derived().cwiseAbs().maxCoeff();
}

double rel_defect(const VNFeature& a, const VNFeature& b) {
  return inf_norm(a.matrix() - b.matrix()) / (inf_norm(b.matrix()) + 1e-30);
}

double rel_defect(const FeatureMatrix& a, const FeatureMatrix& b) {
  return inf_norm(a - b) / (inf_norm(b) + 1e-30);
}

/// Tensor-level relative error ||a - n||_inf / ||n||_inf.
double grad_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  return inf_norm(analytic - numeric) / std::max(inf_norm(numeric), 1e-10);
}

Eigen::VectorXd flat(const double* data, std::size_t n) { return Eigen::Map<const Eigen::VectorXd>(data, n); }

/// Central differences of f over n doubles stored at x.
Eigen::VectorXd numeric_grad(const std::function<double()>& f, double* x, std::size_t n) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const double saved = x[i];
    x[i] = saved + kStep;
    const double fp = f();
    x[i] = saved - kStep;
    const double fm = f();
    x[i] = saved;
    g(static_cast<Eigen::Index>(i)) = (fp - fm) / (2.0 * kStep);
  }
  return g;
}

VNFeature random_feature(std::size_t n, std::size_t c, RandomStream& rng) {
  VNFeature v(n, c);
  for (double& x : v.data()) x = rng.normal();
  return v;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, RandomStream& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

double inner(const VNFeature& a, const VNFeature& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Smallest |cos(v, k)| over all (point, channel) of a ReLU input.
double relu_margin(const VNFeature& v, const Eigen::MatrixXd& u) {
  double margin = 1.0;
  for (std::size_t n = 0; n < v.points(); ++n) {
    for (std::size_t c = 0; c < v.channels(); ++c) {
      const Eigen::Index row = u.rows() == 1 ? 0 : static_cast<Eigen::Index>(c);
      Vec3 k = Vec3::Zero();
      for (std::size_t j = 0; j < v.channels(); ++j) k += u(row, static_cast<Eigen::Index>(j)) * v.row(n, j);
      const double denom = k.norm() * v.row(n, c).norm();
      margin = std::min(margin, denom > 0.0 ? std::abs(v.row(n, c).dot(k)) / denom : 0.0);
    }
  }
  return margin;
}

Points surface_cloud(const ShapeModel& shape, std::size_t n, RandomStream rng) {
  return sample_surface(shape, n, rng).points;
}

template <class Fn>
BatteryResult timed(const std::string& name, double tol, Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  BatteryResult r{name};
  r.tolerance = tol;
  std::tie(r.max_error, r.cases) = fn();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.passed = std::isfinite(r.max_error) && r.max_error < tol;
  return r;
}

// Per-case error slots filled in parallel and reduced in index order.
template <class CaseFn>
std::pair<double, std::size_t> max_over(std::size_t cases, CaseFn&& fn) {
  std::vector<double> err(cases, 0.0);
  parallel_for(cases, [&](std::size_t i) { err[i] = fn(i); });
  double m = 0.0;
  for (double e : err) m = std::isnan(e) ? e : (std::isnan(m) ? m : std::max(m, e));
  return {m, cases};
}

Topology small_topology() {
  Topology t;
  t.encoder.c0 = 4;
  t.encoder.hidden = {6};
  t.encoder.c_out = 6;
  t.encoder.graph.k = 6;
  t.decoder_hidden = {8};
  return t;
}

}  // namespace

SelfCheckOptions SelfCheckOptions::acceptance() {
  SelfCheckOptions o;
  o.weight_seeds = 5;
  o.clouds = 100;
  o.rotations = 10;
  o.points = 256;
  o.procrustes_trials = 1000;
  o.procrustes_rotations = 1000;
  return o;
}

BatteryResult check_equivariance(const SelfCheckOptions& opt) {
  return timed("equivariance", 1e-10, [&] {
    const RandomStream base = RandomStream(opt.seed).split(11);
    // Layer level.
    auto layers = max_over(opt.layer_trials, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      const Mat3 r = sample_rotation(std::numbers::pi, rng).matrix();
      const VNFeature v = random_feature(8, 5, rng);
      const Eigen::MatrixXd w = random_matrix(6, 5, rng);
      const Eigen::MatrixXd u1 = random_matrix(1, 5, rng);
      const Eigen::MatrixXd uc = random_matrix(5, 5, rng);
      const VNFeature vr = v.rotated(r);
      double e = rel_defect(vn_linear(vr, w), vn_linear(v, w).rotated(r));
      e = std::max(e, rel_defect(vn_relu(vr, u1), vn_relu(v, u1).rotated(r)));
      e = std::max(e, rel_defect(vn_relu(vr, uc), vn_relu(v, uc).rotated(r)));
      e = std::max(e, rel_defect(vn_mean_pool(vr), vn_mean_pool(v).rotated(r)));

      Points p(32, 3);
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.uniform(-0.5, 0.5);
      const Points pr = rotate_points(p, r);
      GraphConfig g;
      g.k = 8;
      RandomStream graph_rng(0);
      const NeighborGraph gp = build_graph(p, g, graph_rng);
      const NeighborGraph gr = build_graph(pr, g, graph_rng);
      const EdgeConvParams ep{random_matrix(4, 2, rng), random_matrix(1, 4, rng)};
      e = std::max(e, rel_defect(edge_conv_init(pr, gr, ep), edge_conv_init(p, gp, ep).rotated(r)));
      return e;
    });
    // Whole encoder on rotated, permuted copies of procedural clouds.
    const std::vector<ShapeModel> shapes = make_shape_set(opt.clouds, base.split(1000));
    double worst = layers.first;
    std::size_t cases = layers.second;
    for (std::size_t s = 0; s < opt.weight_seeds; ++s) {
      RandomStream init_rng = base.split(2000 + s);
      const ModelParams params = ModelParams::init(Topology{}, init_rng);
      auto enc = max_over(opt.clouds, [&](std::size_t c) {
        RandomStream rng = base.split(3000 + s).split(c);
        PointCloud pc{surface_cloud(shapes[c], opt.points, rng.split(0)), {}};
        const FeatureMatrix q = encode(pc, params);
        double e = 0.0;
        for (std::size_t k = 0; k < opt.rotations; ++k) {
          RandomStream rr = rng.split(1 + k);
          const Rotation r = sample_rotation(std::numbers::pi, rr);
          PointCloud moved = permute_rows(pc, rr);
          moved.points = rotate_points(moved.points, r.matrix());
          e = std::max(e, rel_defect(encode(moved, params), FeatureMatrix(q * r.matrix())));
        }
        return e;
      });
      worst = std::max(worst, enc.first);
      cases += enc.second * opt.rotations;
    }
    return std::pair{worst, cases};
  });
}

BatteryResult check_permutation(const SelfCheckOptions& opt) {
  return timed("permutation", 1e-12, [&] {
    const RandomStream base = RandomStream(opt.seed).split(12);
    RandomStream init_rng = base.split(0);
    const ModelParams params = ModelParams::init(Topology{}, init_rng);
    const std::vector<ShapeModel> shapes = make_shape_set(opt.clouds, base.split(1));
    return max_over(opt.clouds, [&](std::size_t c) {
      RandomStream rng = base.split(2).split(c);
      PointCloud pc{surface_cloud(shapes[c], opt.points, rng.split(0)), {}};
      const FeatureMatrix q = encode(pc, params);
      double e = 0.0;
      for (std::size_t k = 0; k < opt.rotations; ++k) {
        RandomStream pr = rng.split(1 + k);
        e = std::max(e, rel_defect(encode(permute_rows(pc, pr), params), q));
      }
      return e;
    });
  });
}

BatteryResult check_decoder_invariance(const SelfCheckOptions& opt) {
  return timed("decoder_invariance", 1e-12, [&] {
    const RandomStream base = RandomStream(opt.seed).split(13);
    return max_over(opt.decoder_triples, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      const std::size_t channels = 16;
      const DecoderParams dec = DecoderParams::init(channels, {32, 32}, rng);
      FeatureMatrix q(channels, 3);
      for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
      Points p(8, 3);
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.uniform(-0.5, 0.5);
      const Mat3 r = sample_rotation(std::numbers::pi, rng).matrix();
      const Eigen::VectorXd z = decode_logits(q, p, dec);
      const Eigen::VectorXd zr = decode_logits(FeatureMatrix(q * r), rotate_points(p, r), dec);
      return inf_norm(zr - z) / std::max(1.0, inf_norm(z));
    });
  });
}

BatteryResult check_layer_gradients(const SelfCheckOptions& opt) {
  return timed("gradient_layers", 1e-5, [&] {
    const RandomStream base = RandomStream(opt.seed).split(14);
    return max_over(opt.gradient_configs, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      double e = 0.0;

      {  // vn_linear
        VNFeature v = random_feature(4, 3, rng);
        Eigen::MatrixXd w = random_matrix(5, 3, rng);
        const VNFeature g = random_feature(4, 5, rng);
        VNFeature gv(4, 3);
        Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(5, 3);
        vn_linear_backward(v, w, g, &gv, &gw);
        const auto f = [&] { return inner(vn_linear(v, w), g); };
        e = std::max(e, grad_error(flat(gv.data().data(), gv.data().size()), numeric_grad(f, v.data().data(), v.data().size())));
        e = std::max(e, grad_error(flat(gw.data(), gw.size()), numeric_grad(f, w.data(), w.size())));
      }
      for (const Eigen::Index urows : {Eigen::Index{1}, Eigen::Index{4}}) {  // vn_relu, shared and per-channel
        VNFeature v;
        Eigen::MatrixXd u;
        for (int attempt = 0; attempt < 1000; ++attempt) {
          v = random_feature(3, 4, rng);
          u = random_matrix(urows, 4, rng);
          if (relu_margin(v, u) > kReluMargin) break;
        }
        const VNFeature g = random_feature(3, 4, rng);
        VNFeature gv(3, 4);
        Eigen::MatrixXd gu = Eigen::MatrixXd::Zero(u.rows(), u.cols());
        vn_relu_backward(v, u, g, &gv, &gu);
        const auto f = [&] { return inner(vn_relu(v, u), g); };
        e = std::max(e, grad_error(flat(gv.data().data(), gv.data().size()), numeric_grad(f, v.data().data(), v.data().size())));
        e = std::max(e, grad_error(flat(gu.data(), gu.size()), numeric_grad(f, u.data(), u.size())));
      }
      {  // mean pool and group mean
        VNFeature v = random_feature(6, 3, rng);
        const VNFeature gp = random_feature(1, 3, rng);
        const VNFeature gg = random_feature(2, 3, rng);
        VNFeature dv(6, 3);
        vn_mean_pool_backward(v, gp, &dv);
        e = std::max(e, grad_error(flat(dv.data().data(), dv.data().size()),
                                   numeric_grad([&] { return inner(vn_mean_pool(v), gp); }, v.data().data(), v.data().size())));
        VNFeature dg(6, 3);
        vn_group_mean_backward(v, 3, gg, &dg);
        e = std::max(e, grad_error(flat(dg.data().data(), dg.data().size()),
                                   numeric_grad([&] { return inner(vn_group_mean(v, 3), gg); }, v.data().data(), v.data().size())));
      }
      {  // decoder loss wrt q and every parameter
        const std::size_t channels = 4;
        DecoderParams dec = DecoderParams::init(channels, {6, 5}, rng);
        FeatureMatrix q(channels, 3);
        for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
        QueryBatch batch{Points(16, 3), Eigen::VectorXd(16)};
        for (Eigen::Index i = 0; i < batch.queries.size(); ++i) batch.queries.data()[i] = rng.uniform(-0.5, 0.5);
        for (Eigen::Index i = 0; i < 16; ++i) batch.labels(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
        DecoderParams grad = dec.zeros_like();
        const OccupancyGradient og = occupancy_loss_and_grad(q, batch, dec, &grad);
        const auto f = [&] { return occupancy_loss(q, batch, dec); };
        e = std::max(e, grad_error(flat(og.grad_q.data(), og.grad_q.size()), numeric_grad(f, q.data(), q.size())));
        for (std::size_t l = 0; l < dec.weights.size(); ++l) {
          e = std::max(e, grad_error(flat(grad.weights[l].data(), grad.weights[l].size()),
                                     numeric_grad(f, dec.weights[l].data(), dec.weights[l].size())));
          e = std::max(e, grad_error(flat(grad.biases[l].data(), grad.biases[l].size()),
                                     numeric_grad(f, dec.biases[l].data(), dec.biases[l].size())));
        }
      }
      return e;
    });
  });
}

BatteryResult check_svd_gradients(const SelfCheckOptions& opt) {
  return timed("gradient_svd", 1e-4, [&] {
    const RandomStream base = RandomStream(opt.seed).split(15);
    auto svd = max_over(opt.svd_cases, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      Mat3 h;
      for (;;) {
        for (int i = 0; i < 9; ++i) h.data()[i] = rng.uniform(-1.0, 1.0);
        const Eigen::Vector3d s = svd3(h).s;
        if (s(0) - s(1) > 0.02 * s(0) && s(1) - s(2) > 0.02 * s(0) && s(2) > 0.02 * s(0)) break;
      }
      const Rotation r_gt = sample_rotation(std::numbers::pi, rng);
      const ProcrustesSolution sol = solve_rotation(h);
      const Mat3 analytic = backward_through_svd(sol, registration_loss_grad(r_gt, sol.r_est.matrix()));
      Mat3 hh = h;
      const Eigen::VectorXd numeric =
          numeric_grad([&] { return registration_loss(r_gt, solve_rotation(hh)); }, hh.data(), 9);
      return grad_error(flat(analytic.data(), 9), numeric);
    });

    // End to end: stage-2 total loss of a tiny model against central differences.
    RandomStream rng = base.split(100000);
    const Topology topo = small_topology();
    ModelParams params = ModelParams::init(topo, rng);
    const std::vector<ShapeModel> shapes = make_shape_set(1, rng.split(1));
    PointPair pair;
    QueryBatch bs, bt;
    for (std::uint64_t attempt = 0;; ++attempt) {
      RandomStream pr = rng.split(10 + attempt);
      pair = make_pair(shapes[0], PerturbationConfig::noisy(24, 0.01), std::numbers::pi, pr);
      bs = sample_queries(shapes[0], 16, pr);
      bt = sample_queries(shapes[0].posed(pair.r_gt), 16, pr);
      RandomStream g(0);
      const FeatureMatrix qs = encode(pair.source, params, g);
      const FeatureMatrix qt = encode(pair.target, params, g);
      const Eigen::Vector3d s = svd3(cross_covariance(qs, qt)).s;
      if (s(1) - s(2) > 0.02 * s(0) && s(0) - s(1) > 0.02 * s(0) && s(2) > 0.02 * s(0)) break;
    }
    const auto total = [&](ModelParams* grad) {
      Tape tape;
      RandomStream g(0);
      const Tape::Node qs = record_encode(tape, pair.source.points, topo.encoder, params.encoder,
                                          grad ? &grad->encoder : nullptr, g);
      const Tape::Node qt = record_encode(tape, pair.target.points, topo.encoder, params.encoder,
                                          grad ? &grad->encoder : nullptr, g);
      record_occupancy_loss(tape, qs, bs, params.decoder, grad ? &grad->decoder : nullptr, 1.0);
      record_occupancy_loss(tape, qt, bt, params.decoder, grad ? &grad->decoder : nullptr, 1.0);
      record_registration_loss(tape, qs, qt, pair.r_gt, 1.0);
      if (grad) tape.backward();
      return tape.loss();
    };
    ModelParams grad = params.zeros_like();
    total(&grad);
    std::vector<double*> slots;
    std::vector<double> analytic_all;
    params.for_each_tensor([&](Eigen::MatrixXd& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) slots.push_back(m.data() + i);
    });
    grad.for_each_tensor([&](const Eigen::MatrixXd& m) { analytic_all.insert(analytic_all.end(), m.data(), m.data() + m.size()); });
    Eigen::VectorXd analytic(static_cast<Eigen::Index>(opt.end_to_end_params));
    Eigen::VectorXd numeric(analytic.size());
    RandomStream pick = rng.split(2);
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      const std::size_t idx = pick.index(slots.size());
      analytic(i) = analytic_all[idx];
      numeric(i) = numeric_grad([&] { return total(nullptr); }, slots[idx], 1)(0);
    }
    const double e2e = analytic.size() ? grad_error(analytic, numeric) : 0.0;
    return std::pair{std::max(svd.first, e2e), svd.second + 1};
  });
}

BatteryResult check_procrustes_recovery(const SelfCheckOptions& opt) {
  return timed("procrustes_recovery", 1e-6, [&] {
    const RandomStream base = RandomStream(opt.seed).split(16);
    return max_over(opt.procrustes_trials, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      FeatureMatrix q(16, 3);
      for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
      const Rotation r_gt = sample_rotation(std::numbers::pi, rng);
      const ProcrustesSolution sol = register_features(q, FeatureMatrix(q * r_gt.matrix()));
      if (!is_rotation(sol.r_est.matrix())) return 180.0;
      return isotropic_rotation_error(r_gt, sol.r_est);
    });
  });
}

BatteryResult check_procrustes_optimality(const SelfCheckOptions& opt) {
  return timed("procrustes_optimality", 1e-9, [&] {
    const RandomStream base = RandomStream(opt.seed).split(17);
    auto r = max_over(opt.procrustes_trials, [&](std::size_t t) {
      RandomStream rng = base.split(t);
      FeatureMatrix q(16, 3);
      for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
      const Rotation r_gt = sample_rotation(std::numbers::pi, rng);
      FeatureMatrix qp = q * r_gt.matrix();
      for (Eigen::Index i = 0; i < qp.size(); ++i) qp.data()[i] += 0.1 * rng.normal();
      const ProcrustesSolution sol = register_features(q, qp);
      const double best = (q * sol.r_est.matrix() - qp).norm();
      // Positive when a sampled rotation beats the closed form.
      double worst = 0.0;
      for (std::size_t k = 0; k < opt.procrustes_rotations; ++k) {
        const Rotation r = sample_rotation(std::numbers::pi, rng);
        worst = std::max(worst, best - (q * r.matrix() - qp).norm());
      }
      return worst;
    });
    r.second *= opt.procrustes_rotations;
    return r;
  });
}

std::vector<BatteryResult> run_selfcheck(const SelfCheckOptions& opt) {
  return {check_equivariance(opt),         check_permutation(opt),          check_decoder_invariance(opt),
          check_layer_gradients(opt),      check_svd_gradients(opt),        check_procrustes_recovery(opt),
          check_procrustes_optimality(opt)};
}

nlohmann::json to_json(const BatteryResult& r) {
  return {{"name", r.name},   {"max_error", r.max_error}, {"tolerance", r.tolerance},
          {"cases", r.cases}, {"seconds", r.seconds},     {"passed", r.passed}};
}

}  // namespace equireg
