#include "se2gnn/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>

#include "se2gnn/data.hpp"
#include "se2gnn/errors.hpp"
#include "se2gnn/layers.hpp"
#include "se2gnn/model.hpp"
#include "se2gnn/train.hpp"

namespace se2gnn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised for bad flag combinations detected after parsing.
struct UsageError : Error {
  using Error::Error;
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidConfig(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

// Flag > SE2_PRECISION (empty counts as unset) > config file > default.
int resolve_precision(const std::optional<int>& flag, int from_config) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SE2_PRECISION"); env && *env) {
    const std::string v = env;
    if (v == "32") return 32;
    if (v == "64") return 64;
    throw InvalidConfig("SE2_PRECISION must be 32 or 64, got '" + v + "'");
  }
  return from_config;
}

// ---------------------------------------------------------------------------
// gen-tetris
// ---------------------------------------------------------------------------

struct GenTetrisArgs {
  std::string row;
  std::uint64_t seed = 0;
  std::string out;
};

json cmd_gen_tetris(const GenTetrisArgs& a) {
  data::TetrisSpec spec;
  try {
    spec = data::TetrisSpec::from_row(a.row);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const auto samples = data::gen_tetris(spec, a.seed);
  const auto m = data::write_tetris_dataset(samples, a.row, a.seed, a.out);
  return {{"command", "gen-tetris"},
          {"row", a.row},
          {"count", samples.size()},
          {"manifest", (m.dir / "manifest.json").string()}};
}

// ---------------------------------------------------------------------------
// gen-ns
// ---------------------------------------------------------------------------

struct GenNsArgs {
  std::string scenario = "open";
  int n_traj = 8;
  std::optional<int> grid;
  int nodes = 256;
  std::optional<int> frames;
  std::string force = "fixed";
  double force_range = 0.7;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
};

json cmd_gen_ns(const GenNsArgs& a) {
  data::NsDatasetSpec spec;
  spec.scenario = data::scenario_from_string(a.scenario);
  const bool open = spec.scenario == data::Scenario::kOpen;
  spec.n_traj = a.n_traj;
  spec.grid = a.grid.value_or(open ? 64 : 100);
  spec.n_nodes = a.nodes;
  spec.n_frames = a.frames.value_or(open ? 30 : 75);
  spec.force_mode = data::force_mode_from_string(a.force);
  spec.force_range = a.force_range;
  spec.seed = a.seed;
  spec.jobs = a.jobs;
  const auto m = data::build_ns_dataset(spec, a.out);
  json forces = json::array();
  for (const auto& t : m.doc.at("trajectories")) forces.push_back(t.at("sim").at("force"));
  return {{"command", "gen-ns"},
          {"kind", m.kind()},
          {"count", spec.n_traj},
          {"forces", forces},
          {"manifest", (m.dir / "manifest.json").string()}};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string task;
  std::string data;
  std::string model_config;
  std::string train_config;
  std::string test_data;
  std::string out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::optional<int> jobs;
};

train::TrainConfig train_config_for(const TrainArgs& a, bool tetris) {
  json j = json::object();
  if (tetris) j = {{"epochs", 100}, {"batch_size", 1}};
  if (!a.train_config.empty()) j.update(read_json(a.train_config));
  auto tc = train::TrainConfig::from_json(j);
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.seed) tc.seed = *a.seed;
  if (a.jobs) tc.jobs = *a.jobs;
  tc.precision = resolve_precision(a.precision, tc.precision);
  tc.validate();
  return tc;
}

json cmd_train(const TrainArgs& a) {
  const bool tetris = a.task == "tetris";
  const auto manifest = data::load_manifest(a.data);
  const json file_cfg = a.model_config.empty() ? json::object() : read_json(a.model_config);
  const train::TrainConfig tc = train_config_for(a, tetris);
  fs::create_directories(a.out);
  const std::uint64_t before = layers::rotation_count();

  train::TrainResult res;
  json summary{{"command", "train"}, {"task", a.task}};
  if (tetris) {
    if (manifest.kind() != "tetris") throw ArtifactMismatch("train --task tetris needs a tetris dataset");
    json base = train::tetris_model_config(model::ConvKind::kSe2Mlp, 16, 8, tc.seed).to_json();
    base.update(file_cfg);
    const auto cfg = model::ModelConfig::from_json(base);
    const auto samples = data::load_tetris_dataset(manifest);
    const auto test = a.test_data.empty() ? data::gen_tetris(data::TetrisSpec::from_row("test"), 1)
                                          : data::load_tetris_dataset(data::load_manifest(a.test_data));
    res = train::train_tetris(cfg, samples, test, tc);
    summary["test_accuracy"] = *res.report.accuracy;
    summary["test_nll"] = *res.report.nll;
  } else {
    if (manifest.kind().rfind("ns-", 0) != 0) throw ArtifactMismatch("train --task ns needs a Navier-Stokes dataset");
    const auto d = train::surrogate_data(manifest);
    json base = model::ModelConfig{}.to_json();
    base["in_scalar"] = train::kHistory + (d.inlet_masks.empty() ? 0 : 1);
    base["seed"] = tc.seed;
    if (!file_cfg.contains("cutoff")) {
      std::vector<geom::Graph2D> graphs;
      for (const auto& t : d.trajectories) graphs.push_back(t.graph());
      base["cutoff"] = train::suggest_cutoff(graphs);
    }
    base.update(file_cfg);
    const auto cfg = model::ModelConfig::from_json(base);
    res = train::train_surrogate(cfg, d, tc);
    summary["val_one_step_smse"] = res.report.one_step_smse;
    summary["val_rollout_smse"] = res.report.rollout_smse;
    summary["val_trajectories"] = res.val_indices;
  }
  const fs::path ckpt = fs::path(a.out) / "checkpoint.ckpt";
  const json header{{"kind", "model"},
                    {"config", res.config.to_json()},
                    {"task", a.task},
                    {"data_kind", manifest.kind()},
                    {"train_config", tc.to_json()},
                    {"best_epoch", res.best_epoch}};
  model::save_checkpoint(ckpt, header, res.params);
  write_text(fs::path(a.out) / "metrics.csv", res.csv);
  summary["best_epoch"] = res.best_epoch;
  summary["parameters"] = model::parameter_count(res.config);
  summary["conv_kind"] = model::to_string(res.config.conv_kind);
  summary["rotation_calls"] = layers::rotation_count() - before;
  summary["skipped_steps"] = res.skipped_steps;
  summary["checkpoint"] = ckpt.string();
  summary["metrics"] = (fs::path(a.out) / "metrics.csv").string();
  return summary;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  int horizon = 10;
  std::string out;
};

json cmd_eval(const EvalArgs& a) {
  const auto ckpt = model::load_checkpoint(a.checkpoint);
  const auto manifest = data::load_manifest(a.data);
  json report{{"command", "eval"}, {"checkpoint", a.checkpoint}, {"data_kind", manifest.kind()}};

  if (manifest.kind() == "tetris") {
    if (ckpt.kind() != "model") throw ArtifactMismatch("tetris evaluation needs a model checkpoint");
    const auto m = model::model_from_checkpoint<double>(ckpt);
    if (m.config().out_scalar_dim != data::kTetrisClasses || m.config().embedding != model::EmbeddingKind::kRelative) {
      throw ArtifactMismatch("checkpoint is not a tetris classifier");
    }
    const auto samples = data::load_tetris_dataset(manifest);
    const auto e = train::evaluate_tetris(m, samples);
    report["accuracy"] = e.accuracy;
    report["nll"] = e.nll;
    report["count"] = samples.size();
    return report;
  }

  const auto d = train::surrogate_data(manifest);
  std::optional<model::Model<double>> m;
  train::Predictor p;
  if (ckpt.kind() == "oracle") {
    p = train::oracle_predictor();
  } else if (ckpt.kind() == "model") {
    m.emplace(model::model_from_checkpoint<double>(ckpt));
    const auto& c = m->config();
    const int want = train::kHistory + (d.inlet_masks.empty() ? 0 : 1);
    if (c.embedding != model::EmbeddingKind::kNode || c.in_scalar != want || c.in_rot != train::kHistory + 2 ||
        c.out_scalar_dim != 1 || c.out_rot_dim != 1) {
      throw ArtifactMismatch("checkpoint model (in_scalar " + std::to_string(c.in_scalar) + ", in_rot " +
                             std::to_string(c.in_rot) + ") does not fit " + manifest.kind() + " data (in_scalar " +
                             std::to_string(want) + ", in_rot 5)");
    }
    p = train::model_predictor(*m);
  } else {
    throw ArtifactMismatch("unknown checkpoint kind '" + ckpt.kind() + "'");
  }
  for (const auto& t : d.trajectories) {
    if (a.horizon < 1 || static_cast<std::size_t>(a.horizon) + train::kHistory > t.n_frames()) {
      throw UsageError("--rollout-horizon " + std::to_string(a.horizon) + " exceeds T-3 = " +
                       std::to_string(static_cast<long>(t.n_frames()) - train::kHistory));
    }
  }
  const auto base = train::identity_predictor();
  const std::size_t h = static_cast<std::size_t>(a.horizon);
  double one = 0.0, one_base = 0.0;
  std::vector<double> ro(h, 0.0), ro_base(h, 0.0);
  const double n = static_cast<double>(d.trajectories.size());
  for (std::size_t k = 0; k < d.trajectories.size(); ++k) {
    const auto& t = d.trajectories[k];
    const auto* mask = d.inlet_masks.empty() ? nullptr : &d.inlet_masks[k];
    one += train::one_step_error(p, t, mask) / n;
    one_base += train::one_step_error(base, t, mask) / n;
    const auto r = train::rollout(p, t, a.horizon, mask);
    const auto rb = train::rollout(base, t, a.horizon, mask);
    double run = 0.0, run_b = 0.0;
    for (std::size_t s = 0; s < h; ++s) {
      run += r.step_errors[s];
      run_b += rb.step_errors[s];
      ro[s] += run / static_cast<double>(s + 1) / n;
      ro_base[s] += run_b / static_cast<double>(s + 1) / n;
    }
  }
  report["trajectories"] = d.trajectories.size();
  report["rollout_horizon"] = a.horizon;
  report["one_step_smse"] = one;
  report["rollout_smse"] = ro;
  report["identity_one_step_smse"] = one_base;
  report["identity_rollout_smse"] = ro_base;
  return report;
}

// ---------------------------------------------------------------------------
// equiv-check
// ---------------------------------------------------------------------------

struct EquivArgs {
  std::string checkpoint;
  bool random_model = false;
  std::string model_config;
  int trials = 50;
  std::optional<int> precision;
  int nodes = 64;
  std::uint64_t seed = 0;
  std::vector<int> compare_fourier;
};

model::ModelConfig random_model_config() {
  model::ModelConfig c;
  c.hidden_scalar = 32;
  c.hidden_rot = 16;
  c.cutoff = 3.0;
  return c;
}

template <class T>
json equiv_stats(const model::Model<T>& m, const geom::Graph2D& g, const model::NodeInputs& in, int trials,
                 std::uint64_t seed) {
  const auto st = model::equivariance_error(m, g, in, trials, seed);
  return {{"mean", st.mean}, {"max", st.max}};
}

template <class T>
json activation_table(const std::vector<int>& ns, int trials, std::uint64_t seed) {
  json rows = json::array();
  for (int n : ns) {
    model::ActivationProbe p;
    p.kind = model::ActivationKind::kFourier;
    p.n_samples = n;
    p.scalar_offset = true;
    const auto st = model::activation_equivariance_error<T>(p, trials, seed);
    rows.push_back({{"n_samples", n}, {"mean", st.mean}, {"max", st.max}});
  }
  const auto se2 = model::activation_equivariance_error<T>(model::ActivationProbe{}, trials, seed);
  return {{"fourier_variant", "scalar-offset"},
          {"fourier", rows},
          {"se2_activation", {{"mean", se2.mean}, {"max", se2.max}}}};
}

json cmd_equiv_check(const EquivArgs& a) {
  if (a.checkpoint.empty() == !a.random_model) throw UsageError("give exactly one of --checkpoint and --random-model");
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  if (a.nodes < 3) throw UsageError("--nodes must be >= 3");
  const int precision = resolve_precision(a.precision, 64);
  model::ModelConfig cfg;
  engine::ParamSet<double> values;
  if (a.random_model) {
    json j = random_model_config().to_json();
    j["seed"] = a.seed;
    if (!a.model_config.empty()) j.update(read_json(a.model_config));
    cfg = model::ModelConfig::from_json(j);
  } else {
    const auto ckpt = model::load_checkpoint(a.checkpoint);
    if (ckpt.kind() != "model") throw ArtifactMismatch("equiv-check needs a model checkpoint");
    cfg = ckpt.config();
    values = ckpt.params;
  }
  std::mt19937_64 rng(a.seed);
  std::uniform_real_distribution<double> pos(-5.0, 5.0);
  std::normal_distribution<double> feat(0.0, 1.0);
  std::vector<geom::Vec2> pts(static_cast<std::size_t>(a.nodes));
  for (auto& p : pts) p = {pos(rng), pos(rng)};
  const auto graph = geom::Graph2D::build(pts, geom::delaunay(pts));
  const std::size_t n = graph.num_nodes();
  model::NodeInputs in{engine::Array<double>::zeros({n, static_cast<std::size_t>(cfg.in_scalar)}),
                       engine::Array<double>::zeros({n, 2 * static_cast<std::size_t>(cfg.in_rot)})};
  for (auto& x : in.scalar.data) x = feat(rng);
  for (auto& x : in.rot.data) x = feat(rng);

  json out{{"command", "equiv-check"},
           {"conv_kind", model::to_string(cfg.conv_kind)},
           {"precision", precision},
           {"trials", a.trials},
           {"nodes", n}};
  json stats;
  if (precision == 32) {
    auto m = model::Model<float>::build(cfg);
    if (!a.random_model) m.load_values(values);
    stats = equiv_stats(m, graph, in, a.trials, a.seed + 1);
  } else {
    auto m = model::Model<double>::build(cfg);
    if (!a.random_model) m.load_values(values);
    stats = equiv_stats(m, graph, in, a.trials, a.seed + 1);
  }
  out["mean"] = stats["mean"];
  out["max"] = stats["max"];
  if (!a.compare_fourier.empty()) {
    for (int k : a.compare_fourier) {
      if (k < 3) throw UsageError("--compare-fourier sample counts must be >= 3");
    }
    out["compare_fourier"] = precision == 32 ? activation_table<float>(a.compare_fourier, a.trials, a.seed + 2)
                                             : activation_table<double>(a.compare_fourier, a.trials, a.seed + 2);
  }
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SE(2)-equivariant graph networks for 2D smoke surrogates", "se2gnn"};
  app.require_subcommand(1);

  GenTetrisArgs gt;
  auto* c_gt = app.add_subcommand("gen-tetris", "Generate a Tetris classification dataset");
  c_gt->add_option("--row", gt.row, "1x2pi, 2xpi, 4xpi2, 8xpi4 or test")->required();
  c_gt->add_option("--seed", gt.seed, "Seed for test-mode rotations");
  c_gt->add_option("--out", gt.out, "Output directory")->required();

  GenNsArgs gn;
  auto* c_gn = app.add_subcommand("gen-ns", "Simulate smoke trajectories and sample them onto graphs");
  c_gn->add_option("--scenario", gn.scenario, "open or obstacle")->check(CLI::IsMember({"open", "obstacle"}));
  c_gn->add_option("--n-traj", gn.n_traj, "Number of trajectories")->check(CLI::PositiveNumber);
  c_gn->add_option("--grid", gn.grid, "Grid cells per side (default 64 open, 100 obstacle)");
  c_gn->add_option("--nodes", gn.nodes, "Sampled graph nodes per trajectory");
  c_gn->add_option("--frames", gn.frames, "Frames per trajectory (default 30 open, 75 obstacle)");
  c_gn->add_option("--force", gn.force, "fixed or varying")->check(CLI::IsMember({"fixed", "varying"}));
  c_gn->add_option("--force-range", gn.force_range, "Varying force components ~ U(-r, r)");
  c_gn->add_option("--seed", gn.seed, "Dataset seed");
  c_gn->add_option("--jobs", gn.jobs, "Parallel trajectories")->check(CLI::PositiveNumber);
  c_gn->add_option("--out", gn.out, "Output directory")->required();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a classifier or surrogate");
  c_tr->add_option("--task", tr.task, "tetris or ns")->required()->check(CLI::IsMember({"tetris", "ns"}));
  c_tr->add_option("--data", tr.data, "Dataset directory or manifest")->required();
  c_tr->add_option("--model-config", tr.model_config, "Model config JSON");
  c_tr->add_option("--train-config", tr.train_config, "Training config JSON");
  c_tr->add_option("--test-data", tr.test_data, "Tetris test dataset (default: 700 random rotations, seed 1)");
  c_tr->add_option("--out", tr.out, "Output directory")->required();
  c_tr->add_option("--epochs", tr.epochs, "Override epochs");
  c_tr->add_option("--seed", tr.seed, "Override training seed");
  c_tr->add_option("--precision", tr.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  c_tr->add_option("--jobs", tr.jobs, "Threads for gradient accumulation")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  c_ev->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  c_ev->add_option("--data", ev.data, "Dataset directory or manifest")->required();
  c_ev->add_option("--rollout-horizon", ev.horizon, "Rollout steps");
  c_ev->add_option("--out", ev.out, "Also write the report to this file");

  EquivArgs eq;
  auto* c_eq = app.add_subcommand("equiv-check", "Measure SE(2) equivariance error");
  c_eq->add_option("--checkpoint", eq.checkpoint, "Checkpoint file");
  c_eq->add_flag("--random-model", eq.random_model, "Use a randomly initialized model");
  c_eq->add_option("--model-config", eq.model_config, "Config for --random-model");
  c_eq->add_option("--trials", eq.trials, "Random rotations and translations");
  c_eq->add_option("--precision", eq.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  c_eq->add_option("--nodes", eq.nodes, "Nodes of the random test graph");
  c_eq->add_option("--seed", eq.seed, "Seed");
  c_eq->add_option("--compare-fourier", eq.compare_fourier, "Fourier sample counts, e.g. 4,8,16,32")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    json result;
    if (c_gt->parsed()) result = cmd_gen_tetris(gt);
    else if (c_gn->parsed()) result = cmd_gen_ns(gn);
    else if (c_tr->parsed()) result = cmd_train(tr);
    else if (c_ev->parsed()) {
      result = cmd_eval(ev);
      if (!ev.out.empty()) write_text(ev.out, result.dump(2) + "\n");
    } else if (c_eq->parsed()) {
      result = cmd_equiv_check(eq);
    }
    out << result.dump() << std::endl;
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidConfig& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SolverFailure& e) {
    err << "simulation failed: " << e.what() << "\n";
    return kExitSimulation;
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ArtifactMismatch& e) {
    err << "artifact mismatch: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const CorruptFile& e) {
    err << "corrupt file: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace se2gnn::cli
