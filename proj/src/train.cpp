#include "equireg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "equireg/checkpoint.hpp"
#include "equireg/decoder.hpp"
#include "equireg/errors.hpp"
#include "equireg/parallel.hpp"
#include "equireg/registration.hpp"

namespace equireg {
namespace {

// Stream ids under the master seed.
constexpr std::uint64_t kTrainShapeStream = 0x7261696e;
constexpr std::uint64_t kEvalShapeStream = 0x6576616c;
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kStage1Stream = 1;
constexpr std::uint64_t kStage2Stream = 2;
constexpr std::uint64_t kHeldOutStream = 0x686f6c64;

double deg_to_rad(double deg) { return std::min(std::numbers::pi, deg * std::numbers::pi / 180.0); }

struct ItemResult {
  ModelParams grad;
  double occ = 0.0;
  double reg = 0.0;
  bool fallback = false;
  bool dropped = false;
};

void add_into(ModelParams& acc, const ModelParams& g) {
  std::vector<const Eigen::MatrixXd*> src;
  g.for_each_tensor([&](const Eigen::MatrixXd& m) { src.push_back(&m); });
  std::size_t i = 0;
  acc.for_each_tensor([&](Eigen::MatrixXd& m) { m += *src[i++]; });
}

void scale(ModelParams& p, double s) {
  p.for_each_tensor([&](Eigen::MatrixXd& m) { m *= s; });
}

bool all_finite(const ModelParams& p) {
  bool ok = true;
  p.for_each_tensor([&](const Eigen::MatrixXd& m) { ok = ok && m.allFinite(); });
  return ok;
}

ItemResult stage1_item(const TrainConfig& cfg, const ModelParams& params, const std::vector<ShapeModel>& shapes,
                       RandomStream rng) {
  ItemResult r{params.zeros_like()};
  const ShapeModel& shape = shapes[rng.index(shapes.size())];
  RandomStream cloud_rng = rng.split(1);
  RandomStream query_rng = rng.split(2);
  RandomStream graph_rng = rng.split(3);
  const PointCloud cloud = sample_surface(shape, cfg.stage1.points_per_cloud, cloud_rng);
  const QueryBatch batch = sample_queries(shape, cfg.stage1.queries_per_cloud, query_rng, cfg.queries);

  Tape tape;
  const Tape::Node q =
      record_encode(tape, cloud.points, params.topology.encoder, params.encoder, &r.grad.encoder, graph_rng);
  record_occupancy_loss(tape, q, batch, params.decoder, &r.grad.decoder, 1.0);
  r.occ = tape.loss();
  tape.backward();
  return r;
}

ItemResult stage2_item(const TrainConfig& cfg, const ModelParams& params, const std::vector<ShapeModel>& shapes,
                       RandomStream rng) {
  const Stage2Config& s2 = cfg.stage2;
  ItemResult r{params.zeros_like()};
  const ShapeModel& shape = shapes[rng.index(shapes.size())];
  RandomStream pair_rng = rng.split(1);
  RandomStream query_src = rng.split(2);
  RandomStream query_tgt = rng.split(3);
  RandomStream graph_src = rng.split(4);
  RandomStream graph_tgt = rng.split(5);
  const PointPair pair = make_pair(shape, s2.perturbation, s2.max_angle, pair_rng);

  Tape tape;
  const auto& enc_cfg = params.topology.encoder;
  const Tape::Node qs = record_encode(tape, pair.source.points, enc_cfg, params.encoder, &r.grad.encoder, graph_src);
  const Tape::Node qt = record_encode(tape, pair.target.points, enc_cfg, params.encoder, &r.grad.encoder, graph_tgt);
  if (s2.w_occ > 0.0) {
    const QueryBatch bs = sample_queries(shape, s2.queries_per_cloud, query_src, cfg.queries);
    // Target queries live in the rotated frame.
    const QueryBatch bt = sample_queries(shape.posed(pair.r_gt), s2.queries_per_cloud, query_tgt, cfg.queries);
    record_occupancy_loss(tape, qs, bs, params.decoder, &r.grad.decoder, s2.w_occ);
    record_occupancy_loss(tape, qt, bt, params.decoder, &r.grad.decoder, s2.w_occ);
    r.occ = tape.loss() / (2.0 * s2.w_occ);  // per-cloud mean
  }
  const RegistrationStep step = record_registration_loss(tape, qs, qt, pair.r_gt, s2.w_reg);
  r.reg = step.loss;
  r.fallback = step.fallback;
  r.dropped = step.gradient_dropped;
  tape.backward();
  return r;
}

template <class ItemFn>
TrainResult run_stage(const TrainConfig& cfg, ModelParams params, const std::vector<ShapeModel>& shapes,
                      const RandomStream& rng, const std::string& stage, std::size_t epochs,
                      std::size_t steps_per_epoch, std::size_t batch, double lr, double w_occ, double w_reg,
                      ItemFn&& item) {
  if (shapes.empty()) throw std::invalid_argument("train: empty shape set");
  params.validate();
  const auto start = std::chrono::steady_clock::now();
  Adam adam(params);
  TrainReport report;
  report.stage = stage;
  report.seed = cfg.seed;
  report.config = to_json(cfg);

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    EpochLoss el{epoch + 1};
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
      const RandomStream step_rng = rng.split(global_step);
      std::vector<ItemResult> items(batch);
      parallel_for(batch, [&](std::size_t b) { items[b] = item(cfg, params, shapes, step_rng.split(b)); });

      ModelParams grad = params.zeros_like();
      double occ = 0.0, reg = 0.0;
      for (const auto& it : items) {
        add_into(grad, it.grad);
        occ += it.occ;
        reg += it.reg;
        report.svd_fallbacks += it.fallback ? 1 : 0;
        report.svd_gradients_dropped += it.dropped ? 1 : 0;
      }
      const double inv = 1.0 / static_cast<double>(batch);
      occ *= inv;
      reg *= inv;
      const double total = w_occ * occ + w_reg * reg;
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "non-finite loss in " << stage << " at step " << global_step << " (occ=" << occ << ", reg=" << reg
            << ")";
        throw NumericError(msg.str());
      }
      scale(grad, inv);
      adam.step(params, grad, lr);
      if (!all_finite(params)) {
        throw NumericError("non-finite loss: parameters diverged in " + stage + " at step " +
                           std::to_string(global_step));
      }
      el.occ += occ;
      el.reg += reg;
      el.total += total;
    }
    const double inv_steps = 1.0 / static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1));
    el.occ *= inv_steps;
    el.reg *= inv_steps;
    el.total *= inv_steps;
    report.epochs.push_back(el);
    if (cfg.on_epoch) cfg.on_epoch(stage, el);

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (epoch + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      write_checkpoint(cfg.checkpoint_dir / (stage + "_epoch" + std::to_string(epoch + 1) + ".eqrg"), params);
    }
  }
  report.steps = global_step;
  report.final_loss = report.epochs.empty() ? 0.0 : report.epochs.back().total;
  report.final_occupancy_accuracy = mean_occupancy_accuracy(
      params, shapes, cfg.stage1.points_per_cloud, cfg.stage1.queries_per_cloud, cfg.seed ^ kHeldOutStream);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(params), std::move(report)};
}

nlohmann::json perturbation_json(const PerturbationConfig& p) {
  return {{"noise_sigma", p.noise_sigma}, {"n_source", p.n_source}, {"n_target", p.n_target},
          {"crop_fraction", p.crop_fraction}, {"permute", p.permute}, {"resample", p.resample}};
}

PerturbationConfig perturbation_from_json(const nlohmann::json& j, PerturbationConfig p) {
  p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
  p.n_source = j.value("n_source", p.n_source);
  p.n_target = j.value("n_target", p.n_target);
  p.crop_fraction = j.value("crop_fraction", p.crop_fraction);
  p.permute = j.value("permute", p.permute);
  p.resample = j.value("resample", p.resample);
  return p;
}

}  // namespace

Adam::Adam(const ModelParams& shape, double beta1, double beta2, double eps)
    : m_(shape.zeros_like()), v_(shape.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ModelParams& params, const ModelParams& grad, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::vector<const Eigen::MatrixXd*> g;
  grad.for_each_tensor([&](const Eigen::MatrixXd& m) { g.push_back(&m); });
  std::vector<Eigen::MatrixXd*> m, v;
  m_.for_each_tensor([&](Eigen::MatrixXd& x) { m.push_back(&x); });
  v_.for_each_tensor([&](Eigen::MatrixXd& x) { v.push_back(&x); });
  std::size_t i = 0;
  params.for_each_tensor([&](Eigen::MatrixXd& p) {
    Eigen::MatrixXd& mi = *m[i];
    Eigen::MatrixXd& vi = *v[i];
    const Eigen::MatrixXd& gi = *g[i];
    mi = beta1_ * mi + (1.0 - beta1_) * gi;
    vi = beta2_ * vi + (1.0 - beta2_) * gi.cwiseProduct(gi);
    p.array() -= lr * (mi.array() / c1) / ((vi.array() / c2).sqrt() + eps_);
    ++i;
  });
}

void TrainConfig::validate() const {
  topology.encoder.validate();
  if (shapes == 0) throw std::invalid_argument("train: need at least one shape");
  const auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(std::string("train: ") + what + " must be positive");
  };
  positive(stage1.batch_size, "stage1.batch_size");
  positive(stage1.points_per_cloud, "stage1.points_per_cloud");
  positive(stage1.queries_per_cloud, "stage1.queries_per_cloud");
  positive(stage2.pair_batch_size, "stage2.pair_batch_size");
  positive(stage2.queries_per_cloud, "stage2.queries_per_cloud");
  if (!(stage1.lr >= 0.0) || !(stage2.lr >= 0.0)) throw std::invalid_argument("train: learning rates must be >= 0");
  if (!(stage2.w_occ >= 0.0 && stage2.w_reg >= 0.0) || (stage2.w_occ == 0.0 && stage2.w_reg == 0.0)) {
    throw std::invalid_argument("train: stage-2 loss weights must be >= 0 and not both zero");
  }
  if (!(stage2.max_angle >= 0.0 && stage2.max_angle <= std::numbers::pi)) {
    throw std::invalid_argument("train: max_angle must lie in [0, pi]");
  }
  stage2.perturbation.validate();
  if (stage1.points_per_cloud < topology.encoder.min_points()) {
    throw std::invalid_argument("train: stage1.points_per_cloud below the encoder minimum");
  }
}

TrainConfig TrainConfig::desk() { return {}; }

TrainConfig TrainConfig::smoke() {
  TrainConfig cfg;
  cfg.topology.encoder.c0 = 8;
  cfg.topology.encoder.hidden = {16, 32};
  cfg.topology.encoder.c_out = 16;
  cfg.topology.encoder.graph.k = 8;
  cfg.topology.decoder_hidden = {32, 32};
  cfg.shapes = 3;
  cfg.stage1 = {2, 5, 2, 128, 128, 1e-3};
  cfg.stage2.epochs = 2;
  cfg.stage2.steps_per_epoch = 5;
  cfg.stage2.pair_batch_size = 2;
  cfg.stage2.queries_per_cloud = 128;
  cfg.stage2.perturbation = PerturbationConfig::noisy(128, 0.01);
  return cfg;
}

TrainResult train_stage1(const TrainConfig& cfg, ModelParams params, const std::vector<ShapeModel>& shapes,
                         const RandomStream& rng) {
  cfg.validate();
  return run_stage(cfg, std::move(params), shapes, rng, "stage1", cfg.stage1.epochs, cfg.stage1.steps_per_epoch,
                   cfg.stage1.batch_size, cfg.stage1.lr, 1.0, 0.0, stage1_item);
}

TrainResult train_stage2(const TrainConfig& cfg, ModelParams params, const std::vector<ShapeModel>& shapes,
                         const RandomStream& rng) {
  cfg.validate();
  return run_stage(cfg, std::move(params), shapes, rng, "stage2", cfg.stage2.epochs, cfg.stage2.steps_per_epoch,
                   cfg.stage2.pair_batch_size, cfg.stage2.lr, 2.0 * cfg.stage2.w_occ, cfg.stage2.w_reg,
                   stage2_item);
}

TwoStageResult train_two_stage(const TrainConfig& cfg) {
  cfg.validate();
  const RandomStream master(cfg.seed);
  const std::vector<ShapeModel> shapes = training_shapes(cfg.seed, cfg.shapes);
  RandomStream init_rng = master.split(kInitStream);
  ModelParams params = ModelParams::init(cfg.topology, init_rng);
  TrainResult s1 = train_stage1(cfg, std::move(params), shapes, master.split(kStage1Stream));
  TrainResult s2 = train_stage2(cfg, std::move(s1.params), shapes, master.split(kStage2Stream));
  return {std::move(s2.params), std::move(s1.report), std::move(s2.report)};
}

std::vector<ShapeModel> training_shapes(std::uint64_t seed, std::size_t count) {
  return make_shape_set(count, RandomStream(seed).split(kTrainShapeStream));
}

std::vector<ShapeModel> evaluation_shapes(std::uint64_t seed, std::size_t count) {
  return make_shape_set(count, RandomStream(seed).split(kEvalShapeStream));
}

double mean_occupancy_accuracy(const ModelParams& params, const std::vector<ShapeModel>& shapes, std::size_t points,
                               std::size_t queries, std::uint64_t seed) {
  if (shapes.empty()) return 0.0;
  const RandomStream base(seed);
  std::vector<double> acc(shapes.size());
  parallel_for(shapes.size(), [&](std::size_t i) {
    RandomStream rng = base.split(i);
    RandomStream cloud_rng = rng.split(1);
    RandomStream query_rng = rng.split(2);
    RandomStream graph_rng = rng.split(3);
    const PointCloud cloud = sample_surface(shapes[i], points, cloud_rng);
    const QueryBatch batch = sample_queries(shapes[i], queries, query_rng);
    acc[i] = occupancy_accuracy(encode(cloud, params, graph_rng), batch, params.decoder);
  });
  double sum = 0.0;
  for (double a : acc) sum += a;
  return sum / static_cast<double>(acc.size());
}

double EvalTable::mean() const {
  if (cells.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : cells) s += c.mean_error_deg;
  return s / static_cast<double>(cells.size());
}

double EvalTable::spread() const {
  if (cells.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(cells.begin(), cells.end(), [](const EvalCell& a, const EvalCell& b) {
    return a.mean_error_deg < b.mean_error_deg;
  });
  return hi->mean_error_deg - lo->mean_error_deg;
}

EvalTable evaluate(const ModelParams& params, const std::vector<ShapeModel>& shapes, const PerturbationConfig& cfg,
                   const std::vector<double>& angle_grid_deg, std::size_t pairs_per_cell, std::uint64_t seed,
                   const std::string& condition) {
  if (shapes.empty()) throw std::invalid_argument("evaluate: empty shape set");
  if (pairs_per_cell == 0) throw std::invalid_argument("evaluate: pairs_per_cell must be positive");
  cfg.validate();
  for (double a : angle_grid_deg) {
    if (!(a >= 0.0 && a <= 180.0)) throw std::invalid_argument("evaluate: grid angles must lie in [0, 180]");
  }
  const RandomStream base(seed);
  const std::size_t cells = angle_grid_deg.size();
  std::vector<double> errors(cells * pairs_per_cell);
  parallel_for(errors.size(), [&](std::size_t idx) {
    const std::size_t cell = idx / pairs_per_cell;
    const std::size_t k = idx % pairs_per_cell;
    RandomStream rng = base.split(cell).split(k);
    RandomStream pair_rng = rng.split(1);
    RandomStream graph_src = rng.split(2);
    RandomStream graph_tgt = rng.split(3);
    const ShapeModel& shape = shapes[k % shapes.size()];
    const PointPair pair = make_pair(shape, cfg, deg_to_rad(angle_grid_deg[cell]), pair_rng);
    const FeatureMatrix qs = encode(pair.source, params, graph_src);
    const FeatureMatrix qt = encode(pair.target, params, graph_tgt);
    errors[idx] = isotropic_rotation_error(pair.r_gt, register_features(qs, qt).r_est);
  });
  EvalTable table{condition, seed, {}};
  for (std::size_t c = 0; c < cells; ++c) {
    double sum = 0.0;
    for (std::size_t k = 0; k < pairs_per_cell; ++k) sum += errors[c * pairs_per_cell + k];
    table.cells.push_back({angle_grid_deg[c], sum / static_cast<double>(pairs_per_cell), pairs_per_cell});
  }
  return table;
}

PerturbationConfig condition_config(const std::string& condition) {
  if (condition == "copy") return PerturbationConfig::rotated_copy(1024);
  if (condition == "noise") return PerturbationConfig::noisy(1024, 0.01);
  if (condition == "density") return PerturbationConfig::density(1024, 512);
  if (condition == "crop") return PerturbationConfig::partial(1024, 0.7);
  throw std::invalid_argument("unknown condition '" + condition + "' (expected copy, noise, density or crop)");
}

std::vector<double> standard_angle_grid() { return {0, 30, 60, 90, 120, 150, 180}; }

nlohmann::json to_json(const TrainReport& report) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"occ", e.occ}, {"reg", e.reg}, {"total", e.total}});
  }
  return {{"stage", report.stage},
          {"seed", report.seed},
          {"epochs", epochs},
          {"steps", report.steps},
          {"svd_fallbacks", report.svd_fallbacks},
          {"svd_gradients_dropped", report.svd_gradients_dropped},
          {"wall_seconds", report.wall_seconds},
          {"final_loss", report.final_loss},
          {"final_occupancy_accuracy", report.final_occupancy_accuracy},
          {"config", report.config}};
}

nlohmann::json to_json(const TrainConfig& cfg) {
  const auto& e = cfg.topology.encoder;
  return {
      {"seed", cfg.seed},
      {"shapes", cfg.shapes},
      {"checkpoint_every", cfg.checkpoint_every},
      {"checkpoint_dir", cfg.checkpoint_dir.string()},
      {"encoder",
       {{"c0", e.c0},
        {"hidden", e.hidden},
        {"c_out", e.c_out},
        {"graph", {{"mode", e.graph.mode == GraphMode::knn ? "knn" : "ball"}, {"k", e.graph.k}, {"radius", e.graph.radius}}}}},
      {"decoder_hidden", cfg.topology.decoder_hidden},
      {"queries",
       {{"near_surface_fraction", cfg.queries.near_surface_fraction},
        {"near_surface_sigma", cfg.queries.near_surface_sigma}}},
      {"stage1",
       {{"epochs", cfg.stage1.epochs},
        {"steps_per_epoch", cfg.stage1.steps_per_epoch},
        {"batch_size", cfg.stage1.batch_size},
        {"points_per_cloud", cfg.stage1.points_per_cloud},
        {"queries_per_cloud", cfg.stage1.queries_per_cloud},
        {"lr", cfg.stage1.lr}}},
      {"stage2",
       {{"epochs", cfg.stage2.epochs},
        {"steps_per_epoch", cfg.stage2.steps_per_epoch},
        {"pair_batch_size", cfg.stage2.pair_batch_size},
        {"queries_per_cloud", cfg.stage2.queries_per_cloud},
        {"perturbation", perturbation_json(cfg.stage2.perturbation)},
        {"max_angle_deg", cfg.stage2.max_angle * 180.0 / std::numbers::pi},
        {"lr", cfg.stage2.lr},
        {"w_occ", cfg.stage2.w_occ},
        {"w_reg", cfg.stage2.w_reg}}},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg = TrainConfig::desk();
  cfg.seed = j.value("seed", cfg.seed);
  cfg.shapes = j.value("shapes", cfg.shapes);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.checkpoint_dir = j.value("checkpoint_dir", cfg.checkpoint_dir.string());
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    auto& ec = cfg.topology.encoder;
    ec.c0 = e.value("c0", ec.c0);
    ec.hidden = e.value("hidden", ec.hidden);
    ec.c_out = e.value("c_out", ec.c_out);
    if (e.contains("graph")) {
      const auto& g = e.at("graph");
      const std::string mode = g.value("mode", std::string("knn"));
      if (mode != "knn" && mode != "ball") throw std::invalid_argument("config: graph.mode must be knn or ball");
      ec.graph.mode = mode == "knn" ? GraphMode::knn : GraphMode::ball;
      ec.graph.k = g.value("k", ec.graph.k);
      ec.graph.radius = g.value("radius", ec.graph.radius);
    }
  }
  cfg.topology.decoder_hidden = j.value("decoder_hidden", cfg.topology.decoder_hidden);
  if (j.contains("queries")) {
    cfg.queries.near_surface_fraction = j.at("queries").value("near_surface_fraction", cfg.queries.near_surface_fraction);
    cfg.queries.near_surface_sigma = j.at("queries").value("near_surface_sigma", cfg.queries.near_surface_sigma);
  }
  if (j.contains("stage1")) {
    const auto& s = j.at("stage1");
    auto& c = cfg.stage1;
    c.epochs = s.value("epochs", c.epochs);
    c.steps_per_epoch = s.value("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = s.value("batch_size", c.batch_size);
    c.points_per_cloud = s.value("points_per_cloud", c.points_per_cloud);
    c.queries_per_cloud = s.value("queries_per_cloud", c.queries_per_cloud);
    c.lr = s.value("lr", c.lr);
  }
  if (j.contains("stage2")) {
    const auto& s = j.at("stage2");
    auto& c = cfg.stage2;
    c.epochs = s.value("epochs", c.epochs);
    c.steps_per_epoch = s.value("steps_per_epoch", c.steps_per_epoch);
    c.pair_batch_size = s.value("pair_batch_size", c.pair_batch_size);
    c.queries_per_cloud = s.value("queries_per_cloud", c.queries_per_cloud);
    if (s.contains("perturbation")) c.perturbation = perturbation_from_json(s.at("perturbation"), c.perturbation);
    if (s.contains("max_angle_deg")) c.max_angle = deg_to_rad(s.at("max_angle_deg").get<double>());
    c.lr = s.value("lr", c.lr);
    c.w_occ = s.value("w_occ", c.w_occ);
    c.w_reg = s.value("w_reg", c.w_reg);
  }
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const EvalTable& table) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : table.cells) {
    cells.push_back({{"max_angle_deg", c.max_angle_deg}, {"mean_error_deg", c.mean_error_deg}, {"n_pairs", c.n_pairs}});
  }
  return {{"condition", table.condition}, {"seed", table.seed}, {"cells", cells}};
}

std::string to_csv(const EvalTable& table) {
  std::ostringstream out;
  out << "condition,max_angle_deg,mean_error_deg,n_pairs,seed\n";
  out << std::setprecision(17);
  for (const auto& c : table.cells) {
    out << table.condition << ',' << c.max_angle_deg << ',' << c.mean_error_deg << ',' << c.n_pairs << ','
        << table.seed << '\n';
  }
  return out.str();
}

}  // namespace equireg
