// equireg: command-line front end.
//
// Exit codes: 0 ok, 1 check failure or IO error, 2 usage, 3 numeric failure,
// 4 data integrity.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "equireg/checkpoint.hpp"
#include "equireg/cloud_io.hpp"
#include "equireg/errors.hpp"
#include "equireg/registration.hpp"
#include "equireg/selfcheck.hpp"
#include "equireg/train.hpp"
#include "equireg/vn.hpp"

namespace fs = std::filesystem;
using namespace equireg;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3, kIntegrity = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config not found: " + path.string());
  const auto bytes = read_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("cannot parse " + path.string() + ": " + e.what());
  }
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      grid.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad grid entry '" + item + "'");
    }
  }
  if (grid.empty()) throw UsageError("empty angle grid");
  return grid;
}

// --- gen -------------------------------------------------------------------

struct GenArgs {
  std::size_t shapes = 0;
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t points = 1024;
  std::string condition;
  double max_angle_deg = 180.0;
};

int cmd_gen(const GenArgs& a) {
  if (a.shapes == 0) throw UsageError("--shapes must be at least 1");
  if (a.points < 3) throw UsageError("--points must be at least 3");
  if (!(a.max_angle_deg >= 0.0 && a.max_angle_deg <= 180.0)) throw UsageError("--max-angle must lie in [0, 180]");
  PerturbationConfig pair_cfg;
  if (!a.condition.empty()) {
    try {
      pair_cfg = condition_config(a.condition);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  fs::create_directories(a.out);
  const auto shapes = training_shapes(a.seed, a.shapes);
  const RandomStream base = RandomStream(a.seed).split(0x67656e);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::ostringstream stem;
    stem << "shape_" << std::setw(4) << std::setfill('0') << i;
    RandomStream rng = base.split(i);
    const PointCloud pc = sample_surface(shapes[i], a.points, rng);
    write_text(a.out / (stem.str() + ".json"), shape_to_json(shapes[i]).dump(2) + "\n");
    write_cloud(a.out / (stem.str() + ".pcb"), pc.points);
    if (!a.condition.empty()) {
      RandomStream pair_rng = rng.split(1);
      const double angle = std::min(std::numbers::pi, a.max_angle_deg * std::numbers::pi / 180.0);
      const PointPair pair = make_pair(shapes[i], pair_cfg, angle, pair_rng);
      write_cloud(a.out / (stem.str() + "_source.pcb"), pair.source.points);
      write_cloud(a.out / (stem.str() + "_target.pcb"), pair.target.points);
      const Mat3& r = pair.r_gt.matrix();
      nlohmann::json rows = nlohmann::json::array();
      for (int k = 0; k < 3; ++k) rows.push_back({r(k, 0), r(k, 1), r(k, 2)});
      write_text(a.out / (stem.str() + "_pair.json"),
                 nlohmann::json{{"condition", a.condition}, {"r_gt", rows}}.dump(2) + "\n");
    }
  }
  std::cout << "wrote " << shapes.size() << " shapes to " << a.out.string() << "\n";
  return kOk;
}

// --- init / train ------------------------------------------------------------

struct InitArgs {
  fs::path out;
  std::uint64_t seed = 0;
  std::string topology = "fast";
};

int cmd_init(const InitArgs& a) {
  Topology topo;
  if (a.topology == "fast") {
    topo.encoder = EncoderConfig::fast();
  } else if (a.topology == "full") {
    topo.encoder = EncoderConfig::full();
  } else {
    throw UsageError("--topology must be fast or full");
  }
  RandomStream rng(a.seed);
  write_checkpoint(a.out, ModelParams::init(topo, rng));
  std::cout << "wrote untrained checkpoint " << a.out.string() << "\n";
  return kOk;
}

struct TrainArgs {
  fs::path config;
  std::string preset;
  fs::path out;
  fs::path report;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    cfg = train_config_from_json(read_json(a.config));
  } else if (a.preset == "desk") {
    cfg = TrainConfig::desk();
  } else if (a.preset == "smoke") {
    cfg = TrainConfig::smoke();
  } else {
    throw UsageError("train needs --config FILE or --preset desk|smoke");
  }
  if (a.seed) cfg.seed = *a.seed;
  cfg.on_epoch = [](const std::string& stage, const EpochLoss& e) {
    std::fprintf(stderr, "%s epoch %zu  occ %.5f  reg %.5f  total %.5f\n", stage.c_str(), e.epoch, e.occ, e.reg,
                 e.total);
  };
  const TwoStageResult result = train_two_stage(cfg);
  write_checkpoint(a.out, result.params);
  const fs::path report_path = a.report.empty() ? fs::path(a.out.string() + ".report.json") : a.report;
  const nlohmann::json report = {{"stage1", to_json(result.stage1)}, {"stage2", to_json(result.stage2)}};
  write_text(report_path, report.dump(2) + "\n");
  std::cout << "stage1 loss " << result.stage1.final_loss << " occupancy accuracy "
            << result.stage1.final_occupancy_accuracy << "\n"
            << "stage2 loss " << result.stage2.final_loss << " (svd fallbacks " << result.stage2.svd_fallbacks
            << ")\n"
            << "wrote " << a.out.string() << " and " << report_path.string() << "\n";
  return kOk;
}

// --- register ----------------------------------------------------------------

struct RegisterArgs {
  fs::path ckpt, source, target;
  bool json = false;
};

int cmd_register(const RegisterArgs& a) {
  const ModelParams params = read_checkpoint(a.ckpt);
  const PointCloud src{read_cloud(a.source), {}};
  const PointCloud tgt{read_cloud(a.target), {}};
  for (const auto* pc : {&src, &tgt}) {
    pc->validate();
    if (pc->size() < params.topology.encoder.min_points()) {
      throw UsageError("cloud has " + std::to_string(pc->size()) + " points; the checkpoint needs at least " +
                       std::to_string(params.topology.encoder.min_points()));
    }
  }
  const ProcrustesSolution sol = register_features(encode(src, params), encode(tgt, params));
  const AxisAngle aa = rotation_to_axis_angle(sol.r_est);
  const Mat3& r = sol.r_est.matrix();
  if (a.json) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) rows.push_back({r(i, 0), r(i, 1), r(i, 2)});
    const nlohmann::json out = {{"r_est", rows},
                                {"axis", {aa.axis.x(), aa.axis.y(), aa.axis.z()}},
                                {"angle_deg", aa.angle * 180.0 / std::numbers::pi},
                                {"degenerate", sol.degenerate},
                                {"singular_values", {sol.svd.s(0), sol.svd.s(1), sol.svd.s(2)}}};
    std::cout << out.dump() << "\n";
  } else {
    std::cout << std::setprecision(17) << "r_est\n";
    for (int i = 0; i < 3; ++i) std::cout << r(i, 0) << ' ' << r(i, 1) << ' ' << r(i, 2) << '\n';
    std::cout << "axis " << aa.axis.x() << ' ' << aa.axis.y() << ' ' << aa.axis.z() << '\n'
              << "angle_deg " << aa.angle * 180.0 / std::numbers::pi << '\n'
              << "degenerate " << (sol.degenerate ? "true" : "false") << '\n';
  }
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  fs::path ckpt;
  std::string condition = "copy";
  std::string grid = "0,30,60,90,120,150,180";
  std::size_t pairs = 50;
  std::uint64_t seed = 0;
  std::size_t shapes = 20;
  fs::path out;
  fs::path json;
};

int cmd_eval(const EvalArgs& a) {
  PerturbationConfig cfg;
  try {
    cfg = condition_config(a.condition);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto grid = parse_grid(a.grid);
  if (a.pairs == 0) throw UsageError("--pairs-per-cell must be at least 1");
  if (a.shapes == 0) throw UsageError("--shapes must be at least 1");
  const ModelParams params = read_checkpoint(a.ckpt);
  const EvalTable table = evaluate(params, evaluation_shapes(a.seed, a.shapes), cfg, grid, a.pairs, a.seed, a.condition);
  const std::string csv = to_csv(table);
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out, csv);
  }
  if (!a.json.empty()) write_text(a.json, to_json(table).dump(2) + "\n");
  return kOk;
}

// --- selfcheck ---------------------------------------------------------------

struct SelfCheckArgs {
  bool json = false;
  bool relu_fault = false;
  std::uint64_t seed = 0;
};

int cmd_selfcheck(const SelfCheckArgs& a) {
  testing::set_relu_gradient_fault(a.relu_fault);
  SelfCheckOptions opt;
  opt.seed = a.seed;
  const auto results = run_selfcheck(opt);
  bool ok = true;
  nlohmann::json all = nlohmann::json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    all.push_back(to_json(r));
    if (!a.json) {
      std::printf("%-22s %s  max_error %.3e  tol %.0e  cases %zu  %.2fs\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.max_error, r.tolerance, r.cases, r.seconds);
    }
  }
  if (a.json) std::cout << nlohmann::json{{"batteries", all}, {"passed", ok}}.dump(2) << "\n";
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SO(3)-equivariant correspondence-free rotational registration"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate procedural shapes and sampled clouds");
  g->add_option("--shapes", gen.shapes, "Number of shapes")->required();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Seed");
  g->add_option("--points", gen.points, "Points per cloud");
  g->add_option("--condition", gen.condition, "Also write a source/target pair per shape (copy|noise|density|crop)");
  g->add_option("--max-angle", gen.max_angle_deg, "Max pair rotation in degrees");

  InitArgs init;
  auto* in = app.add_subcommand("init", "Write an untrained checkpoint");
  in->add_option("--out", init.out, "Checkpoint path")->required();
  in->add_option("--seed", init.seed, "Seed");
  in->add_option("--topology", init.topology, "fast or full");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Two-stage training");
  t->add_option("--config", train.config, "JSON training config");
  t->add_option("--preset", train.preset, "desk or smoke (when no --config)");
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--report", train.report, "Report path (default <out>.report.json)");
  t->add_option("--seed", train.seed, "Override the config seed");

  RegisterArgs reg;
  auto* r = app.add_subcommand("register", "Estimate the rotation between two clouds");
  r->add_option("--ckpt", reg.ckpt, "Checkpoint")->required();
  r->add_option("--source", reg.source, "Source cloud (.pcb or .xyz)")->required();
  r->add_option("--target", reg.target, "Target cloud (.pcb or .xyz)")->required();
  r->add_flag("--json", reg.json, "Machine-readable output");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Mean isotropic error per max-angle cell");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--condition", ev.condition, "copy | noise | density | crop");
  e->add_option("--grid", ev.grid, "Comma-separated max angles in degrees");
  e->add_option("--pairs-per-cell", ev.pairs, "Pairs per cell");
  e->add_option("--seed", ev.seed, "Seed");
  e->add_option("--shapes", ev.shapes, "Evaluation shapes");
  e->add_option("--out", ev.out, "CSV path (stdout if omitted)");
  e->add_option("--json", ev.json, "Also write the table as JSON");

  SelfCheckArgs sc;
  auto* s = app.add_subcommand("selfcheck", "Run the invariant batteries");
  s->add_flag("--json", sc.json, "Machine-readable output");
  s->add_option("--seed", sc.seed, "Seed");
  s->add_flag("--inject-relu-grad-fault", sc.relu_fault, "Corrupt the ReLU gradient (tests the gate)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*in) return cmd_init(init);
    if (*t) return cmd_train(train);
    if (*r) return cmd_register(reg);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_selfcheck(sc);
  } catch (const UsageError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const IntegrityError& ex) {
    std::cerr << "integrity error: " << ex.what() << "\n";
    return kIntegrity;
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
