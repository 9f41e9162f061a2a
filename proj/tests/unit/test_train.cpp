#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <numbers>

#include "equireg/checkpoint.hpp"
#include "equireg/errors.hpp"
#include "equireg/registration.hpp"
#include "equireg/train.hpp"

using namespace equireg;
constexpr double kPi = std::numbers::pi;

namespace {

std::vector<double> loss_series(const TrainReport& r) {
  std::vector<double> out;
  for (const auto& e : r.epochs) out.insert(out.end(), {e.occ, e.reg, e.total});
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("adam step by hand") {
  ModelParams p;
  p.encoder.out = Eigen::MatrixXd::Constant(1, 1, 1.0);
  ModelParams g = p;
  g.encoder.out(0, 0) = 0.5;
  Adam adam(p);
  adam.step(p, g, 0.1);
  // m_hat = 0.5, v_hat = 0.25
  CHECK(p.encoder.out(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
  CHECK(adam.steps() == 1);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.stage1.lr = 0.0;
  cfg.stage2.lr = 0.0;
  RandomStream rng(1);
  const ModelParams init = ModelParams::init(cfg.topology, rng);
  const auto shapes = training_shapes(0, cfg.shapes);
  const TrainResult s1 = train_stage1(cfg, init, shapes, RandomStream(2));
  CHECK(serialize_checkpoint(s1.params) == serialize_checkpoint(init));
  const TrainResult s2 = train_stage2(cfg, init, shapes, RandomStream(3));
  CHECK(serialize_checkpoint(s2.params) == serialize_checkpoint(init));
}

TEST_CASE("two-stage run is deterministic and thread-count independent") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.seed = 17;
  const TwoStageResult a = train_two_stage(cfg);
  const TwoStageResult b = train_two_stage(cfg);
  CHECK(serialize_checkpoint(a.params) == serialize_checkpoint(b.params));
  CHECK(loss_series(a.stage1) == loss_series(b.stage1));
  CHECK(loss_series(a.stage2) == loss_series(b.stage2));

  const char* old = std::getenv("EQUIREG_THREADS");
  const std::string saved = old ? old : "";
  setenv("EQUIREG_THREADS", "3", 1);
  const TwoStageResult c = train_two_stage(cfg);
  if (old) setenv("EQUIREG_THREADS", saved.c_str(), 1); else unsetenv("EQUIREG_THREADS");
  CHECK(serialize_checkpoint(a.params) == serialize_checkpoint(c.params));

  cfg.seed = 18;
  CHECK(serialize_checkpoint(train_two_stage(cfg).params) != serialize_checkpoint(a.params));

  for (const auto* r : {&a.stage1, &a.stage2}) {
    CHECK(r->epochs.size() == 2);
    CHECK(r->steps == 10);
    for (double v : loss_series(*r)) CHECK(std::isfinite(v));
    CHECK(r->config.at("seed") == 17);
  }
}

TEST_CASE("registration weight zero gives the occupancy objective") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.stage2.w_reg = 0.0;
  RandomStream rng(4);
  const auto shapes = training_shapes(0, cfg.shapes);
  const TrainResult r = train_stage2(cfg, ModelParams::init(cfg.topology, rng), shapes, RandomStream(5));
  for (const auto& e : r.report.epochs) CHECK(e.total == doctest::Approx(2.0 * e.occ).epsilon(1e-14));
}

TEST_CASE("untrained encoder registers rotated copies exactly") {
  RandomStream rng(6);
  const ModelParams params = ModelParams::init(Topology{EncoderConfig::fast(), {32}}, rng);
  const auto shapes = training_shapes(1, 5);
  for (const auto& s : shapes) {
    const PointPair pair = make_pair(s, PerturbationConfig::rotated_copy(512), kPi, rng);
    const Mat3 h = cross_covariance(encode(pair.source, params), encode(pair.target, params));
    CHECK(registration_step(h, pair.r_gt).loss < 1e-8);
  }
}

TEST_CASE("exploding learning rate aborts with a numeric error") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.stage1.lr = 1e300;
  CHECK_THROWS_AS(train_two_stage(cfg), NumericError);
  try {
    train_two_stage(cfg);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
  }
}

TEST_CASE("config validation and JSON round trip") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.shapes = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig::smoke();
  cfg.stage2.w_occ = 0.0;
  cfg.stage2.w_reg = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig::smoke();
  cfg.stage1.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  cfg = TrainConfig::smoke();
  cfg.seed = 99;
  cfg.stage2.max_angle = kPi / 2;
  cfg.topology.encoder.graph.mode = GraphMode::ball;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(back.stage2.max_angle == doctest::Approx(kPi / 2).epsilon(1e-15));

  const TrainConfig desk = train_config_from_json(nlohmann::json::object());
  CHECK(desk.shapes == 30);
  CHECK(desk.stage1.epochs * desk.stage1.steps_per_epoch == 300);
  CHECK(desk.stage1.batch_size == 8);
  CHECK(desk.stage2.pair_batch_size == 4);
  CHECK(desk.topology.encoder.c_out == 342);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"encoder", {{"graph", {{"mode", "grid"}}}}}}),
                  std::invalid_argument);
}

TEST_CASE("checkpoint cadence") {
  TrainConfig cfg = TrainConfig::smoke();
  cfg.checkpoint_every = 1;
  cfg.checkpoint_dir = std::filesystem::temp_directory_path() / "equireg_cadence";
  std::filesystem::remove_all(cfg.checkpoint_dir);
  const TwoStageResult r = train_two_stage(cfg);
  for (const char* name : {"stage1_epoch1.eqrg", "stage1_epoch2.eqrg", "stage2_epoch1.eqrg", "stage2_epoch2.eqrg"}) {
    CHECK(std::filesystem::exists(cfg.checkpoint_dir / name));
  }
  CHECK(serialize_checkpoint(read_checkpoint(cfg.checkpoint_dir / "stage2_epoch2.eqrg")) ==
        serialize_checkpoint(r.params));
  std::filesystem::remove_all(cfg.checkpoint_dir);
}

TEST_CASE("evaluate") {
  RandomStream rng(7);
  const ModelParams params = ModelParams::init(Topology{EncoderConfig::fast(), {32}}, rng);
  const auto shapes = evaluation_shapes(0, 4);
  const auto grid = standard_angle_grid();
  CHECK(grid == std::vector<double>{0, 30, 60, 90, 120, 150, 180});
  const EvalTable t = evaluate(params, shapes, condition_config("copy"), grid, 4, 3, "copy");
  REQUIRE(t.cells.size() == 7);
  for (const auto& c : t.cells) {
    CHECK(c.mean_error_deg < 0.1);
    CHECK(c.n_pairs == 4);
  }
  const EvalTable again = evaluate(params, shapes, condition_config("copy"), grid, 4, 3, "copy");
  CHECK(to_csv(again) == to_csv(t));
  CHECK(to_csv(t).rfind("condition,max_angle_deg,mean_error_deg,n_pairs,seed\ncopy,0,", 0) == 0);
  CHECK(to_json(t).at("cells").size() == 7);
  CHECK_THROWS_AS(condition_config("rain"), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(params, shapes, condition_config("copy"), {200}, 1, 0), std::invalid_argument);

  const PerturbationConfig noise = condition_config("noise");
  CHECK(noise.noise_sigma == 0.01);
  const PerturbationConfig dens = condition_config("density");
  CHECK(dens.n_source == 1024);
  CHECK(dens.n_target == 512);
  CHECK(condition_config("crop").crop_fraction == 0.7);
}

TEST_CASE("shape sets") {
  const auto a = training_shapes(0, 3);
  const auto b = evaluation_shapes(0, 3);
  CHECK(a.size() == 3);
  CHECK(a[0].parts()[0].center != b[0].parts()[0].center);
  CHECK(training_shapes(0, 3)[2].parts()[0].dims == a[2].parts()[0].dims);
}

}
