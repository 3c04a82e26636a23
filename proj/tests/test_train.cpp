#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "se2gnn/errors.hpp"
#include "se2gnn/train.hpp"

using namespace se2gnn;
using namespace se2gnn::train;

namespace {

// Random smooth-ish trajectory on a Delaunay graph; no simulator involved.
data::Trajectory synthetic(std::size_t n, std::size_t frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 10);
  std::normal_distribution<double> g(0, 1);
  data::Trajectory t;
  for (std::size_t i = 0; i < n; ++i) t.positions.push_back({u(rng), u(rng)});
  t.edges = geom::delaunay(t.positions);
  t.normals.assign(n, geom::Vec2{});
  t.normals[0] = {1, 0};
  t.force = {0.0, 0.5};
  const double a = g(rng), b = g(rng);
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<double> uu(n), vv(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = t.positions[i];
      uu[i] = std::sin(0.3 * p.x + 0.2 * f + a) * std::cos(0.25 * p.y);
      vv[2 * i] = 0.5 * std::cos(0.2 * p.y + 0.15 * f + b);
      vv[2 * i + 1] = 0.5 * std::sin(0.2 * p.x - 0.1 * f);
    }
    t.u.push_back(uu);
    t.v.push_back(vv);
  }
  t.check();
  return t;
}

double frame_gap(const data::Trajectory& t, std::size_t a, std::size_t b) {
  double s = 0;
  for (std::size_t i = 0; i < t.n_nodes(); ++i) {
    s += std::pow(t.u[a][i] - t.u[b][i], 2) + std::pow(t.v[a][2 * i] - t.v[b][2 * i], 2) +
         std::pow(t.v[a][2 * i + 1] - t.v[b][2 * i + 1], 2);
  }
  return s / static_cast<double>(t.n_nodes());
}

model::ModelConfig surrogate_config(const data::Trajectory& t) {
  model::ModelConfig c;
  c.conv_kind = model::ConvKind::kSe2Mlp;
  c.n_layers = 2;
  c.hidden_scalar = 16;
  c.hidden_rot = 8;
  const geom::Graph2D g = t.graph();
  c.cutoff = suggest_cutoff(std::span<const geom::Graph2D>(&g, 1));
  c.seed = 3;
  return c;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

double cell(const std::string& line, int col) {
  std::istringstream in(line);
  std::string c;
  for (int k = 0; k <= col; ++k) std::getline(in, c, ',');
  return std::stod(c);
}

}  // namespace

TEST_CASE("smse by hand") {
  const Frame target{{0, 0}, {0, 0, 0, 0}};
  const Frame pred{{1, 0}, {0, 1, 1, 1}};
  // node 0: 1 + 0 + 1, node 1: 0 + 1 + 1 -> 4 / 2
  CHECK(smse_loss(pred, target) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(smse_loss(pred, pred) == 0.0);
  Frame scaled = pred;
  for (double& x : scaled.u) x *= 3;
  for (double& x : scaled.v) x *= 3;
  CHECK(smse_loss(scaled, target) == doctest::Approx(18.0).epsilon(1e-15));
  CHECK_THROWS_AS(smse_loss(Frame{{1}, {0, 0}}, target), ShapeMismatch);
}

TEST_CASE("window inputs layout") {
  const auto t = synthetic(12, 5, 1);
  const std::vector<Frame> hist{frame_of(t, 0), frame_of(t, 1), frame_of(t, 2)};
  const std::vector<double> mask(12, 1.0);
  const auto in = window_inputs(t, hist, &mask);
  CHECK(in.scalar.shape == engine::Shape{12, 4});
  CHECK(in.rot.shape == engine::Shape{12, 10});
  CHECK(in.scalar.at(5, 1) == t.u[1][5]);
  CHECK(in.scalar.at(5, 3) == 1.0);
  CHECK(in.rot.at(5, 4) == t.v[2][10]);
  CHECK(in.rot.at(5, 5) == t.v[2][11]);
  CHECK(in.rot.at(0, 6) == 1.0);
  CHECK(in.rot.at(3, 9) == 0.5);
  CHECK_THROWS_AS(window_inputs(t, std::span<const Frame>(hist.data(), 2)), InvalidArgument);
}

TEST_CASE("one-step error against a loop oracle") {
  const auto t = synthetic(20, 7, 2);
  CHECK(one_step_error(oracle_predictor(), t) == 0.0);
  double want = 0;
  for (std::size_t k = 3; k < 7; ++k) want += frame_gap(t, k, k - 1);
  CHECK(one_step_error(identity_predictor(), t) == doctest::Approx(want / 4).epsilon(1e-13));

  const auto four = synthetic(20, 4, 2);
  CHECK(one_step_error(identity_predictor(), four) == doctest::Approx(frame_gap(four, 3, 2)).epsilon(1e-13));
  CHECK_THROWS_AS(one_step_error(identity_predictor(), synthetic(20, 3, 2)), InvalidArgument);
}

TEST_CASE("rollout against a loop oracle") {
  const auto t = synthetic(20, 8, 3);
  const auto r = rollout(identity_predictor(), t, 5);
  REQUIRE(r.step_errors.size() == 5);
  double mean = 0;
  for (int h = 0; h < 5; ++h) {
    // the identity model keeps repeating frame 2
    CHECK(r.step_errors[h] == doctest::Approx(frame_gap(t, 2, 3 + h)).epsilon(1e-13));
    CHECK(r.frames[h].u == t.u[2]);
    mean += r.step_errors[h];
  }
  CHECK(r.mean_error == doctest::Approx(mean / 5).epsilon(1e-13));
  CHECK(rollout(identity_predictor(), t, 1).mean_error == doctest::Approx(frame_gap(t, 2, 3)).epsilon(1e-13));
  CHECK(rollout(oracle_predictor(), t, 5).mean_error == 0.0);
  CHECK_THROWS_AS(rollout(oracle_predictor(), t, 0), InvalidArgument);
  CHECK_THROWS_AS(rollout(oracle_predictor(), t, 6), InvalidArgument);
}

TEST_CASE("adam") {
  engine::ParamSet<double> p;
  p.add("w", {2}, {1.0, -2.0});
  AdamState st;

  SUBCASE("zero gradients leave parameters alone") {
    for (int k = 0; k < 3; ++k) adam_step(p, {{0.0, 0.0}}, st, 0.1);
    CHECK(p[0].value == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("constant unit gradient, two steps") {
    // Bias correction makes both m-hat and v-hat exactly 1 on every step.
    adam_step(p, {{1.0, 1.0}}, st, 0.1);
    adam_step(p, {{1.0, 1.0}}, st, 0.1);
    CHECK(p[0].value[0] == doctest::Approx(1.0 - 0.2 / (1 + 1e-8)).epsilon(1e-15));
    CHECK(p[0].value[1] == doctest::Approx(-2.0 - 0.2 / (1 + 1e-8)).epsilon(1e-15));
    CHECK(st.step == 2);
  }
  SUBCASE("non-finite gradients are skipped") {
    CHECK_FALSE(adam_step(p, {{NAN, 0.0}}, st, 0.1));
    CHECK(st.skipped == 1);
    CHECK(st.step == 0);
    CHECK(p[0].value == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(adam_step(p, {{1.0}}, st, 0.1), ShapeMismatch);
    CHECK_THROWS_AS(adam_step(p, {}, st, 0.1), ShapeMismatch);
  }
  SUBCASE("matches a reference over random steps") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0, 1);
    double x[2] = {1.0, -2.0}, m[2] = {}, v[2] = {};
    for (int t = 1; t <= 100; ++t) {
      const double gr[2] = {g(rng), g(rng)};
      const double lr = 0.01 * (1 + 0.5 * std::sin(t));
      for (int i = 0; i < 2; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * gr[i];
        v[i] = 0.999 * v[i] + 0.001 * gr[i] * gr[i];
        x[i] -= lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
      }
      adam_step(p, {{gr[0], gr[1]}}, st, lr);
    }
    CHECK(std::abs(p[0].value[0] - x[0]) < 1e-12);
    CHECK(std::abs(p[0].value[1] - x[1]) < 1e-12);
  }
}

TEST_CASE("cosine schedule and clipping") {
  CHECK(cosine_lr(0, 100, 0.3) == 0.3);
  CHECK(std::abs(cosine_lr(100, 100, 0.3)) < 1e-15);
  CHECK(cosine_lr(50, 100, 0.3) == doctest::Approx(0.15).epsilon(1e-14));
  CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx(0.5 + 0.5 * std::sqrt(0.5)).epsilon(1e-14));
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.3), InvalidArgument);
  CHECK_THROWS_AS(cosine_lr(-1, 100, 0.3), InvalidArgument);

  std::vector<std::vector<double>> g{{3.0}, {4.0, 0.0}};
  CHECK(clip_grad_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0);
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
  std::vector<std::vector<double>> h{{30.0}};
  clip_grad_norm(h, 0.0);
  CHECK(h[0][0] == 30.0);
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.epochs = 7;
  c.lr0 = 2e-3;
  c.jobs = 2;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(TrainConfig::from_json({{"schema_version", 1}}).epochs == 500);
  CHECK_THROWS_AS(TrainConfig::from_json({{"momentum", 0.9}}), InvalidConfig);
  CHECK_THROWS_AS(TrainConfig::from_json({{"schedule", "step"}}), InvalidConfig);
  CHECK_THROWS_AS(TrainConfig::from_json({{"precision", 16}}), InvalidConfig);
  CHECK_THROWS_AS(TrainConfig::from_json({{"val_fraction", 1.0}}), InvalidConfig);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "ten"}}), InvalidConfig);
}

TEST_CASE("suggest_cutoff is the 99th percentile") {
  const std::vector<geom::Vec2> p{{0, 0}, {1, 0}, {3, 0}};
  const std::vector<std::pair<std::uint32_t, std::uint32_t>> e{{0, 1}, {1, 2}};
  const auto g = geom::Graph2D::build(p, e);
  // directed lengths 1,1,2,2
  CHECK(suggest_cutoff(std::span<const geom::Graph2D>(&g, 1)) == 2.0);
}

TEST_CASE("surrogate overfits one trajectory") {
  SurrogateData d;
  d.trajectories.push_back(synthetic(24, 8, 5));
  TrainConfig tc;
  tc.epochs = 50;
  tc.batch_size = 1;
  tc.windows_per_trajectory = 3;
  tc.lr0 = 3e-3;
  tc.seed = 1;
  const auto res = train_surrogate(surrogate_config(d.trajectories[0]), d, tc);
  const auto rows = lines(res.csv);
  CHECK(rows[0] == kCsvHeader);
  REQUIRE(rows.size() == 1 + 2 * 50);
  const double first = cell(rows[1], 2), last = cell(rows[rows.size() - 2], 2);
  MESSAGE("train loss " << first << " -> " << last);
  CHECK(last * 10 <= first);
  CHECK(res.val_indices.empty());
  CHECK(rows.back().find("train-eval") != std::string::npos);
  CHECK(res.report.rollout_smse.size() == 5);
  CHECK(res.report.one_step_smse == doctest::Approx(cell(rows[2 * res.best_epoch], 3)).epsilon(1e-6));
}

TEST_CASE("surrogate training is deterministic and validates inputs") {
  SurrogateData d;
  for (std::uint64_t k = 0; k < 4; ++k) d.trajectories.push_back(synthetic(16, 6, 20 + k));
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.val_fraction = 0.25;
  tc.seed = 4;
  const auto cfg = surrogate_config(d.trajectories[0]);
  const auto a = train_surrogate(cfg, d, tc);
  const auto b = train_surrogate(cfg, d, tc);
  CHECK(a.csv == b.csv);
  CHECK(a.val_indices.size() == 1);
  CHECK(lines(a.csv)[2].find(",val,") != std::string::npos);
  tc.precision = 32;
  CHECK(train_surrogate(cfg, d, tc).csv == train_surrogate(cfg, d, tc).csv);

  auto bad = cfg;
  bad.in_scalar = 4;
  CHECK_THROWS_AS(train_surrogate(bad, d, tc), InvalidConfig);
  tc.lr0 = 1e300;
  CHECK_THROWS_AS(train_surrogate(cfg, d, tc), TrainingDiverged);
}

TEST_CASE("tetris logits and evaluation") {
  const auto cfg = tetris_model_config(model::ConvKind::kSe2Mlp, 8, 4, 2);
  const auto m = model::Model<double>::build(cfg);
  const auto samples = data::gen_tetris(data::TetrisSpec::from_row("1x2pi"), 0);
  double nll = 0;
  for (const auto& s : samples) {
    const auto l = tetris_logits(m, s);
    REQUIRE(l.size() == 7);
    double z = 0;
    for (double x : l) z += std::exp(x);
    nll -= std::log(std::exp(l[s.label]) / z);

    // Rotating and shifting the piece leaves invariant logits unchanged.
    auto moved = s;
    const geom::Rot2 r = geom::rotation_matrix(0.7);
    for (auto& p : moved.positions) p = r.apply(p) + geom::Vec2{2.0, -1.0};
    const auto lm = tetris_logits(m, moved);
    for (int c = 0; c < 7; ++c) CHECK(std::abs(lm[c] - l[c]) < 1e-10);
  }
  CHECK(evaluate_tetris(m, std::span<const data::TetrisSample>(samples)).nll ==
        doctest::Approx(nll / 7).epsilon(1e-12));
}

TEST_CASE("tetris training separates the seven pieces") {
  const auto train = data::gen_tetris(data::TetrisSpec::from_row("1x2pi"), 0);
  TrainConfig tc;
  tc.epochs = 100;
  tc.batch_size = 1;
  tc.lr0 = 1e-2;
  const auto res = train_tetris(tetris_model_config(model::ConvKind::kSe2Mlp, 16, 8, 0), train, train, tc);
  REQUIRE(res.report.accuracy);
  CHECK(*res.report.accuracy == 1.0);
  CHECK(lines(res.csv).back().rfind("100,test,", 0) == 0);
}
