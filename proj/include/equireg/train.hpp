#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "equireg/encoder.hpp"
#include "equireg/random.hpp"
#include "equireg/shapes.hpp"

namespace equireg {

struct Stage1Config {
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 10;
  std::size_t batch_size = 8;
  std::size_t points_per_cloud = 512;
  std::size_t queries_per_cloud = 512;
  double lr = 1e-3;
};

struct Stage2Config {
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 10;
  std::size_t pair_batch_size = 4;
  std::size_t queries_per_cloud = 512;
  /// Rotated copy with independent noise on each side.
  PerturbationConfig perturbation = PerturbationConfig::noisy(512, 0.01);
  double max_angle = 3.141592653589793;
  double lr = 1e-3;
  double w_occ = 1.0;
  double w_reg = 1.0;
};

struct EpochLoss;

struct TrainConfig {
  Topology topology;
  Stage1Config stage1;
  Stage2Config stage2;
  QueryOptions queries;
  std::size_t shapes = 30;
  std::uint64_t seed = 0;
  /// Write a checkpoint every this many epochs (0 disables).
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  /// Called after every epoch; not serialised.
  std::function<void(const std::string& stage, const EpochLoss&)> on_epoch;

  void validate() const;

  /// Desk-scale defaults: 30 shapes, 300 steps per stage.
  static TrainConfig desk();
  /// Tiny run for tests and CLI smoke checks.
  static TrainConfig smoke();
};

struct EpochLoss {
  std::size_t epoch = 0;
  double occ = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct TrainReport {
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<EpochLoss> epochs;
  std::size_t steps = 0;
  std::size_t svd_fallbacks = 0;
  std::size_t svd_gradients_dropped = 0;
  double wall_seconds = 0.0;
  double final_occupancy_accuracy = 0.0;
  double final_loss = 0.0;
  nlohmann::json config;
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over every tensor of ModelParams.
class Adam {
 public:
  explicit Adam(const ModelParams& shape, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ModelParams& params, const ModelParams& grad, double lr);
  std::size_t steps() const { return t_; }

 private:
  ModelParams m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Occupancy-only training. Throws NumericError on a non-finite loss.
TrainResult train_stage1(const TrainConfig& cfg, ModelParams params, const std::vector<ShapeModel>& shapes,
                         const RandomStream& rng);

/// Joint occupancy + registration training on perturbed pairs.
TrainResult train_stage2(const TrainConfig& cfg, ModelParams params, const std::vector<ShapeModel>& shapes,
                         const RandomStream& rng);

struct TwoStageResult {
  ModelParams params;
  TrainReport stage1;
  TrainReport stage2;
};

/// Generates the training shapes from cfg.seed, initialises the model and runs both stages.
TwoStageResult train_two_stage(const TrainConfig& cfg);

/// Shape sets derived from a seed; train and eval sets never share a stream.
std::vector<ShapeModel> training_shapes(std::uint64_t seed, std::size_t count);
std::vector<ShapeModel> evaluation_shapes(std::uint64_t seed, std::size_t count);

/// Mean held-out query accuracy over the shapes (one cloud + query batch each).
double mean_occupancy_accuracy(const ModelParams& params, const std::vector<ShapeModel>& shapes,
                               std::size_t points, std::size_t queries, std::uint64_t seed);

struct EvalCell {
  double max_angle_deg = 0.0;
  double mean_error_deg = 0.0;
  std::size_t n_pairs = 0;
};

struct EvalTable {
  std::string condition;
  std::uint64_t seed = 0;
  std::vector<EvalCell> cells;

  double mean() const;
  double spread() const;  ///< max cell - min cell
};

/// Mean isotropic error per max-angle cell over independently sampled pairs.
EvalTable evaluate(const ModelParams& params, const std::vector<ShapeModel>& shapes, const PerturbationConfig& cfg,
                   const std::vector<double>& angle_grid_deg, std::size_t pairs_per_cell, std::uint64_t seed,
                   const std::string& condition = "custom");

/// copy | noise | density | crop. Throws std::invalid_argument otherwise.
PerturbationConfig condition_config(const std::string& condition);

std::vector<double> standard_angle_grid();

nlohmann::json to_json(const TrainReport& report);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EvalTable& table);
/// CSV with header condition,max_angle_deg,mean_error_deg,n_pairs,seed.
std::string to_csv(const EvalTable& table);

}  // namespace equireg
