#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>

#include "se2gnn/data.hpp"
#include "se2gnn/errors.hpp"

using namespace se2gnn;
using namespace se2gnn::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("se2gnn_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

NsDatasetSpec small_spec() {
  NsDatasetSpec s;
  s.n_traj = 3;
  s.grid = 24;
  s.n_nodes = 64;
  s.n_frames = 6;
  s.seed = 11;
  return s;
}

bool same_shape(const TetrisSample& a, const TetrisSample& b) {
  if (a.label != b.label) return false;
  for (int p = 0; p < 4; ++p) {
    if (std::abs(a.positions[p].x - b.positions[p].x) > 1e-12 || std::abs(a.positions[p].y - b.positions[p].y) > 1e-12)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("tetris rows") {
  CHECK(gen_tetris(TetrisSpec::from_row("1x2pi"), 0).size() == 7);
  CHECK(gen_tetris(TetrisSpec::from_row("2xpi"), 0).size() == 14);
  CHECK(gen_tetris(TetrisSpec::from_row("4xpi2"), 0).size() == 28);
  CHECK(gen_tetris(TetrisSpec::from_row("8xpi4"), 0).size() == 56);
  const auto test = gen_tetris(TetrisSpec::from_row("test"), 3);
  REQUIRE(test.size() == 700);
  int counts[kTetrisClasses] = {};
  for (const auto& s : test) ++counts[s.label];
  for (int c : counts) CHECK(c == 100);
  CHECK_THROWS_AS(TetrisSpec::from_row("3xpi"), InvalidArgument);

  // Every sample of a coarser row appears in the finer rows.
  const auto fine = gen_tetris(TetrisSpec::from_row("8xpi4"), 0);
  for (const char* row : {"1x2pi", "2xpi", "4xpi2"}) {
    for (const auto& s : gen_tetris(TetrisSpec::from_row(row), 0)) {
      bool found = false;
      for (const auto& f : fine) found = found || same_shape(s, f);
      CHECK(found);
    }
  }
  // Centered, rigid copies of the lattice shapes.
  for (const auto& s : fine) {
    double cx = 0, cy = 0;
    for (const auto& p : s.positions) cx += p.x, cy += p.y;
    CHECK(std::abs(cx) < 1e-12);
    CHECK(std::abs(cy) < 1e-12);
    const auto& ref = tetris_shapes()[s.label];
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        CHECK(std::abs(geom::norm(s.positions[a] - s.positions[b]) - geom::norm(ref[a] - ref[b])) < 1e-12);
  }
  std::set<std::string> names;
  for (int k = 0; k < kTetrisClasses; ++k) names.insert(tetris_label_name(k));
  CHECK(names.size() == 7);
}

TEST_CASE("tetris files") {
  const fs::path dir = temp_dir("tetris");
  const auto samples = gen_tetris(TetrisSpec::from_row("test"), 5);
  const auto m = write_tetris_dataset(samples, "test", 5, dir / "ds");
  CHECK(m.kind() == "tetris");
  CHECK(m.doc.at("counts").at("samples") == 700);
  const auto back = load_tetris_dataset(load_manifest(dir / "ds"));
  REQUIRE(back.size() == samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    CHECK(back[k].label == samples[k].label);
    for (int p = 0; p < 4; ++p) CHECK(back[k].positions[p] == samples[k].positions[p]);
  }
  std::ofstream(dir / "bad.json") << "{\"samples\": [ {\"label\": 9";
  CHECK_THROWS_AS(load_tetris(dir / "bad.json"), CorruptFile);
}

TEST_CASE("interpolation is exact on linear fields") {
  const sim::SimConfig cfg = sim::open_scenario(20);
  std::vector<double> field(static_cast<std::size_t>(cfg.nx * cfg.ny));
  const double a = 0.37, b = -1.25, c0 = 2.0;
  for (int j = 0; j < cfg.ny; ++j) {
    for (int i = 0; i < cfg.nx; ++i) {
      const auto p = sim::cell_center(cfg, i, j);
      field[static_cast<std::size_t>(j * cfg.nx + i)] = a * p.x + b * p.y + c0;
    }
  }
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.5 * cfg.dx, cfg.width() - 0.5 * cfg.dx);
  std::vector<geom::Vec2> pts(300);
  for (auto& p : pts) p = {u(rng), u(rng)};
  const auto vals = interpolate(field, cfg, pts);
  for (std::size_t k = 0; k < pts.size(); ++k) CHECK(std::abs(vals[k] - (a * pts[k].x + b * pts[k].y + c0)) < 1e-12);
}

TEST_CASE("boundary normals") {
  sim::SimConfig cfg = sim::obstacle_scenario(50, 50, 50);
  const std::vector<geom::Vec2> pts{{0.5, 40}, {99.5, 40}, {40, 0.5}, {50, 50 - 15 - 0.5}, {30, 80}, {0.5, 0.5}};
  const auto n = boundary_normals(pts, cfg);
  CHECK(n[0].x == doctest::Approx(-1.0));
  CHECK(n[1].x == doctest::Approx(1.0));
  CHECK(n[2].y == doctest::Approx(-1.0));
  CHECK(n[3].y == doctest::Approx(1.0));  // toward the obstacle center
  CHECK(n[4] == geom::Vec2{0, 0});
  CHECK(geom::norm(n[5]) == doctest::Approx(1.0));
}

TEST_CASE("trajectory plans") {
  NsDatasetSpec s = small_spec();
  for (int k = 0; k < 3; ++k) CHECK(plan_trajectory(s, k).sim.force == geom::Vec2{0, 0.5});
  s.force_mode = ForceMode::kVarying;
  bool any_negative = false;
  for (int k = 0; k < 40; ++k) {
    const auto f = plan_trajectory(s, k).sim.force;
    CHECK(std::abs(f.x) <= 0.7);
    CHECK(std::abs(f.y) <= 0.7);
    any_negative = any_negative || f.x < 0 || f.y < 0;
  }
  CHECK(any_negative);
  s.scenario = Scenario::kObstacle;
  std::set<double> xs;
  for (int k = 0; k < 40; ++k) {
    const auto p = plan_trajectory(s, k);
    REQUIRE(p.sim.obstacle);
    REQUIRE(p.sim.inlet);
    const double xo = p.sim.obstacle->center.x, xi = p.sim.inlet->center.x;
    CHECK(xo == std::round(xo));
    CHECK(xo >= 20);
    CHECK(xo <= 80);
    CHECK(xi >= 10);
    CHECK(xi <= 90);
    xs.insert(xo);
  }
  CHECK(xs.size() > 5);
  CHECK(plan_trajectory(s, 3).sample_seed == plan_trajectory(s, 3).sample_seed);
  CHECK(plan_trajectory(s, 3).sample_seed != plan_trajectory(s, 4).sample_seed);
  s.n_frames = 3;
  CHECK_THROWS_AS(s.validate(), InvalidConfig);
}

TEST_CASE("trajectory round trip and corruption") {
  const fs::path dir = temp_dir("traj");
  const auto t = build_trajectory(plan_trajectory(small_spec(), 0), 64);
  t.check();
  CHECK(t.n_nodes() == 64);
  CHECK(t.n_frames() == 6);
  save_trajectory(dir / "t.bin", t);
  const auto back = load_trajectory(dir / "t.bin");
  CHECK(back.positions == t.positions);
  CHECK(back.edges == t.edges);
  CHECK(back.normals == t.normals);
  CHECK(back.force == t.force);
  CHECK(back.u == t.u);
  CHECK(back.v == t.v);

  const std::string bytes = slurp(dir / "t.bin");
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir / "cut.bin", std::ios::binary) << bytes.substr(0, cut);
    CHECK_THROWS_AS(load_trajectory(dir / "cut.bin"), CorruptFile);
  }
  std::ofstream(dir / "long.bin", std::ios::binary) << bytes << "xx";
  CHECK_THROWS_AS(load_trajectory(dir / "long.bin"), CorruptFile);
  std::string magic = bytes;
  magic[0] = 'X';
  std::ofstream(dir / "magic.bin", std::ios::binary) << magic;
  CHECK_THROWS_AS(load_trajectory(dir / "magic.bin"), CorruptFile);
  CHECK_THROWS_AS(load_trajectory(dir / "none.bin"), CorruptFile);
}

TEST_CASE("dataset generation, integrity and determinism") {
  const fs::path dir = temp_dir("ns");
  NsDatasetSpec s = small_spec();
  const auto m = build_ns_dataset(s, dir / "a");
  CHECK(m.kind() == "ns-open");
  CHECK(m.files().size() == 3);
  for (const auto& t : m.doc.at("trajectories")) CHECK(t.at("sim").at("force") == nlohmann::json::array({0.0, 0.5}));

  s.jobs = 2;
  build_ns_dataset(s, dir / "b");
  for (const auto& f : m.files()) CHECK(slurp(f) == slurp(dir / "b" / f.filename()));
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));

  const auto loaded = load_manifest(dir / "a" / "manifest.json");
  CHECK(load_ns_dataset(loaded).size() == 3);
  CHECK_FALSE(trajectory_inlet(loaded, 0));
  CHECK_THROWS_AS(load_tetris_dataset(loaded), ArtifactMismatch);

  SUBCASE("missing file") {
    fs::remove(m.files()[1]);
    CHECK_THROWS_AS(load_manifest(dir / "a"), IntegrityError);
  }
  SUBCASE("checksum mismatch") {
    std::string b = slurp(m.files()[0]);
    b[b.size() - 1] ^= 0x01;
    std::ofstream(m.files()[0], std::ios::binary) << b;
    CHECK_THROWS_AS(load_manifest(dir / "a"), IntegrityError);
  }
  SUBCASE("broken manifest") {
    std::ofstream(dir / "a" / "manifest.json") << "{";
    CHECK_THROWS_AS(load_manifest(dir / "a"), CorruptFile);
  }
}

TEST_CASE("obstacle dataset carries inlets") {
  const fs::path dir = temp_dir("obs");
  NsDatasetSpec s = small_spec();
  s.scenario = Scenario::kObstacle;
  s.n_traj = 2;
  s.grid = 40;
  const auto m = build_ns_dataset(s, dir);
  CHECK(m.kind() == "ns-obstacle");
  const auto inlet = trajectory_inlet(m, 1);
  REQUIRE(inlet);
  CHECK(inlet->radius == 7.0);
  const auto t = load_ns_dataset(m)[0];
  double nz = 0;
  for (const auto& n : t.normals) nz += geom::norm(n);
  CHECK(nz > 0);
}

TEST_CASE("crc32 of a known string") {
  const fs::path dir = temp_dir("crc");
  std::ofstream(dir / "x", std::ios::binary) << "123456789";
  CHECK(file_crc32(dir / "x") == 0xCBF43926u);
}
