#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace equireg {

struct BatteryResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  double seconds = 0.0;
  bool passed = false;
};

struct SelfCheckOptions {
  std::uint64_t seed = 0;
  // equivariance / permutation
  std::size_t weight_seeds = 2;
  std::size_t clouds = 6;
  std::size_t rotations = 4;
  std::size_t points = 256;
  std::size_t layer_trials = 100;
  // gradients
  std::size_t gradient_configs = 50;
  std::size_t svd_cases = 100;
  std::size_t end_to_end_params = 20;
  // procrustes
  std::size_t procrustes_trials = 200;
  std::size_t procrustes_rotations = 200;
  std::size_t decoder_triples = 100;

  /// Sizes named by the acceptance criteria.
  static SelfCheckOptions acceptance();
};

/// Relative defect ||f(P') - f(P) R||_inf / ||f(P)||_inf over layers and the
/// full encoder (untrained weights, knn mode, P' a rotated permuted copy).
BatteryResult check_equivariance(const SelfCheckOptions& opt);
/// Encoder output for row-permuted inputs.
BatteryResult check_permutation(const SelfCheckOptions& opt);
/// decode(q R, p R) against decode(q, p).
BatteryResult check_decoder_invariance(const SelfCheckOptions& opt);
/// Every layer and the decoder against central differences.
BatteryResult check_layer_gradients(const SelfCheckOptions& opt);
/// SVD backward and the end-to-end stage-2 loss against central differences.
BatteryResult check_svd_gradients(const SelfCheckOptions& opt);
/// Noiseless recovery error in degrees.
BatteryResult check_procrustes_recovery(const SelfCheckOptions& opt);
/// Largest residual improvement any sampled rotation achieves over r_est.
BatteryResult check_procrustes_optimality(const SelfCheckOptions& opt);

std::vector<BatteryResult> run_selfcheck(const SelfCheckOptions& opt = {});

nlohmann::json to_json(const BatteryResult& r);

}  // namespace equireg
