#include "se2gnn/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

#include "binio.hpp"
#include "se2gnn/errors.hpp"

namespace se2gnn::data {

namespace fs = std::filesystem;
using geom::Vec2;
using nlohmann::json;

namespace {

double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }
Vec2 to_f32(Vec2 v) { return {to_f32(v.x), to_f32(v.y)}; }

std::mt19937_64 sub_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

constexpr char kMagic[7] = {'S', 'E', '2', 'D', 'S', '\x00', '\x01'};

}  // namespace

// ---------------------------------------------------------------------------
// Tetris
// ---------------------------------------------------------------------------

const std::array<std::array<Vec2, 4>, kTetrisClasses>& tetris_shapes() {
  static const std::array<std::array<Vec2, 4>, kTetrisClasses> shapes{{
      {{{0, 0}, {1, 0}, {2, 0}, {3, 0}}},  // I
      {{{0, 0}, {1, 0}, {0, 1}, {1, 1}}},  // O
      {{{0, 0}, {1, 0}, {2, 0}, {1, 1}}},  // T
      {{{0, 0}, {1, 0}, {1, 1}, {2, 1}}},  // S
      {{{0, 1}, {1, 1}, {1, 0}, {2, 0}}},  // Z
      {{{0, 0}, {1, 0}, {2, 0}, {2, 1}}},  // L
      {{{0, 0}, {1, 0}, {2, 0}, {0, 1}}},  // J
  }};
  return shapes;
}

const char* tetris_label_name(int label) {
  static const char* names[kTetrisClasses] = {"I", "O", "T", "S", "Z", "L", "J"};
  if (label < 0 || label >= kTetrisClasses) throw InvalidArgument("tetris label out of range");
  return names[label];
}

TetrisSpec TetrisSpec::from_row(const std::string& row) {
  constexpr double pi = std::numbers::pi;
  if (row == "1x2pi") return {2 * pi, 1, false};
  if (row == "2xpi") return {pi, 2, false};
  if (row == "4xpi2") return {pi / 2, 4, false};
  if (row == "8xpi4") return {pi / 4, 8, false};
  if (row == "test") return {0.0, 100, true};
  throw InvalidArgument("unknown tetris row '" + row + "' (expected 1x2pi, 2xpi, 4xpi2, 8xpi4 or test)");
}

std::vector<TetrisSample> gen_tetris(const TetrisSpec& spec, std::uint64_t seed) {
  if (spec.copies_per_shape < 1) throw InvalidArgument("copies_per_shape must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::vector<TetrisSample> out;
  for (int label = 0; label < kTetrisClasses; ++label) {
    const auto centered = geom::center_of_mass_zero(tetris_shapes()[label]);
    for (int k = 0; k < spec.copies_per_shape; ++k) {
      const double theta = spec.test_mode ? angle(rng) : k * spec.rotation_angle;
      const geom::Rot2 r = geom::rotation_matrix(theta);
      TetrisSample s;
      s.label = label;
      for (int p = 0; p < 4; ++p) s.positions[p] = r.apply(centered[p]);
      out.push_back(s);
    }
  }
  return out;
}

void save_tetris(const fs::path& path, const std::vector<TetrisSample>& samples) {
  json arr = json::array();
  for (const auto& s : samples) {
    json pos = json::array();
    for (const auto& p : s.positions) pos.push_back({p.x, p.y});
    arr.push_back({{"label", s.label}, {"positions", pos}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << json{{"samples", arr}}.dump() << '\n';
}

std::vector<TetrisSample> load_tetris(const fs::path& path) {
  const auto bytes = binio::read_file(path);
  std::vector<TetrisSample> out;
  try {
    const json doc = json::parse(bytes.begin(), bytes.end());
    for (const auto& e : doc.at("samples")) {
      TetrisSample s;
      s.label = e.at("label").get<int>();
      if (s.label < 0 || s.label >= kTetrisClasses) throw CorruptFile(path.string() + ": label out of range");
      const auto& pos = e.at("positions");
      if (pos.size() != 4) throw CorruptFile(path.string() + ": expected 4 positions");
      for (int p = 0; p < 4; ++p) s.positions[p] = {pos[p].at(0).get<double>(), pos[p].at(1).get<double>()};
      out.push_back(s);
    }
  } catch (const json::exception& e) {
    throw CorruptFile(path.string() + ": " + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

void Trajectory::check() const {
  const std::size_t n = positions.size();
  if (normals.size() != n) throw InvalidArgument("trajectory: normals size mismatch");
  if (v.size() != u.size()) throw InvalidArgument("trajectory: u and v frame counts differ");
  for (std::size_t t = 0; t < u.size(); ++t) {
    if (u[t].size() != n || v[t].size() != 2 * n) throw InvalidArgument("trajectory: frame size mismatch");
  }
  for (const auto& [a, b] : edges) {
    if (a >= n || b >= n || a == b) throw InvalidArgument("trajectory: bad edge");
  }
}

geom::Graph2D Trajectory::graph() const { return geom::Graph2D::build(positions, edges, normals); }

void save_trajectory(const fs::path& path, const Trajectory& traj) {
  traj.check();
  binio::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(static_cast<std::uint32_t>(traj.n_nodes()));
  w.u32(static_cast<std::uint32_t>(traj.n_frames()));
  w.u32(static_cast<std::uint32_t>(traj.edges.size()));
  w.f32(static_cast<float>(traj.force.x));
  w.f32(static_cast<float>(traj.force.y));
  for (const auto& p : traj.positions) {
    w.f32(static_cast<float>(p.x));
    w.f32(static_cast<float>(p.y));
  }
  for (const auto& p : traj.normals) {
    w.f32(static_cast<float>(p.x));
    w.f32(static_cast<float>(p.y));
  }
  for (const auto& [a, b] : traj.edges) {
    w.u32(a);
    w.u32(b);
  }
  for (std::size_t t = 0; t < traj.n_frames(); ++t) {
    for (double x : traj.u[t]) w.f32(static_cast<float>(x));
    for (double x : traj.v[t]) w.f32(static_cast<float>(x));
  }
  w.save(path);
}

Trajectory load_trajectory(const fs::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + sizeof magic, kMagic)) throw CorruptFile(path.string() + ": bad magic");
  const std::uint32_t n = r.u32(), t = r.u32(), e = r.u32();
  // Size check up front so a corrupt header cannot trigger a huge allocation.
  const std::uint64_t need = 8ull + 16ull * n + 8ull * e + 12ull * n * t;
  r.check(static_cast<std::size_t>(std::min<std::uint64_t>(need, SIZE_MAX)));
  Trajectory traj;
  traj.force.x = r.f32();
  traj.force.y = r.f32();
  traj.positions.resize(n);
  traj.normals.resize(n);
  for (auto& p : traj.positions) {
    p.x = r.f32();
    p.y = r.f32();
  }
  for (auto& p : traj.normals) {
    p.x = r.f32();
    p.y = r.f32();
  }
  traj.edges.resize(e);
  for (auto& [a, b] : traj.edges) {
    a = r.u32();
    b = r.u32();
    if (a >= n || b >= n || a == b) throw CorruptFile(path.string() + ": edge index out of range");
  }
  traj.u.assign(t, std::vector<double>(n));
  traj.v.assign(t, std::vector<double>(2 * n));
  for (std::uint32_t k = 0; k < t; ++k) {
    for (auto& x : traj.u[k]) x = r.f32();
    for (auto& x : traj.v[k]) x = r.f32();
  }
  if (!r.at_end()) throw CorruptFile(path.string() + ": trailing bytes");
  return traj;
}

// ---------------------------------------------------------------------------
// Navier-Stokes datasets
// ---------------------------------------------------------------------------

std::string to_string(Scenario s) { return s == Scenario::kOpen ? "open" : "obstacle"; }

Scenario scenario_from_string(const std::string& s) {
  if (s == "open") return Scenario::kOpen;
  if (s == "obstacle") return Scenario::kObstacle;
  throw InvalidArgument("unknown scenario '" + s + "'");
}

std::string to_string(ForceMode m) { return m == ForceMode::kFixed ? "fixed" : "varying"; }

ForceMode force_mode_from_string(const std::string& s) {
  if (s == "fixed") return ForceMode::kFixed;
  if (s == "varying") return ForceMode::kVarying;
  throw InvalidArgument("unknown force mode '" + s + "'");
}

void NsDatasetSpec::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("dataset spec: " + m); };
  if (n_traj < 1) fail("n_traj must be >= 1");
  if (grid < 8) fail("grid must be >= 8");
  if (n_nodes < 3) fail("n_nodes must be >= 3");
  if (static_cast<long>(n_nodes) > static_cast<long>(grid) * grid) fail("n_nodes exceeds the grid cell count");
  if (n_frames < 4) fail("n_frames must be >= 4 (three history frames and a target)");
  if (!(force_range >= 0.0)) fail("force_range must be >= 0");
  if (jobs < 1) fail("jobs must be >= 1");
}

json NsDatasetSpec::to_json() const {
  return {{"scenario", to_string(scenario)}, {"n_traj", n_traj},         {"grid", grid},
          {"n_nodes", n_nodes},              {"n_frames", n_frames},     {"force", to_string(force_mode)},
          {"force_range", force_range},      {"seed", seed}};
}

TrajectoryPlan plan_trajectory(const NsDatasetSpec& spec, int index) {
  auto rng = sub_rng(spec.seed, static_cast<std::uint64_t>(index));
  TrajectoryPlan plan;
  if (spec.scenario == Scenario::kOpen) {
    plan.sim = sim::open_scenario(spec.grid);
  } else {
    std::uniform_int_distribution<int> x_obs(20, 80), x_in(10, 90);
    const int xo = x_obs(rng);
    const int xi = x_in(rng);
    plan.sim = sim::obstacle_scenario(spec.grid, xo, xi);
  }
  plan.sim.n_steps = spec.n_frames;
  plan.sim.seed = rng();
  if (spec.force_mode == ForceMode::kVarying) {
    std::uniform_real_distribution<double> f(-spec.force_range, spec.force_range);
    const double fx = f(rng);
    const double fy = f(rng);
    plan.sim.force = {fx, fy};
  } else {
    plan.sim.force = {0.0, 0.5};
  }
  plan.sample_seed = rng();
  return plan;
}

std::vector<double> interpolate(const std::vector<double>& field, const sim::SimConfig& cfg,
                                const std::vector<Vec2>& points) {
  if (field.size() != static_cast<std::size_t>(cfg.nx) * cfg.ny) throw InvalidArgument("interpolate: field size");
  std::vector<double> out(points.size());
  for (std::size_t k = 0; k < points.size(); ++k) {
    const double fi = std::clamp(points[k].x / cfg.dx - 0.5, 0.0, cfg.nx - 1.0);
    const double fj = std::clamp(points[k].y / cfg.dx - 0.5, 0.0, cfg.ny - 1.0);
    const int i0 = std::min(static_cast<int>(fi), cfg.nx - 2);
    const int j0 = std::min(static_cast<int>(fj), cfg.ny - 2);
    const double tx = fi - i0, ty = fj - j0;
    auto at = [&](int i, int j) { return field[static_cast<std::size_t>(j) * cfg.nx + i]; };
    const double a = at(i0, j0) + tx * (at(i0 + 1, j0) - at(i0, j0));
    const double b = at(i0, j0 + 1) + tx * (at(i0 + 1, j0 + 1) - at(i0, j0 + 1));
    out[k] = a + ty * (b - a);
  }
  return out;
}

std::vector<Vec2> boundary_normals(const std::vector<Vec2>& points, const sim::SimConfig& cfg) {
  std::vector<Vec2> out(points.size());
  const double w = cfg.width(), h = cfg.height(), reach = cfg.dx;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const Vec2 p = points[k];
    Vec2 n;
    if (p.x <= reach) n.x -= 1.0;
    if (w - p.x <= reach) n.x += 1.0;
    if (p.y <= reach) n.y -= 1.0;
    if (h - p.y <= reach) n.y += 1.0;
    if (cfg.obstacle) {
      const Vec2 d = cfg.obstacle->center - p;
      const double dist = geom::norm(d);
      if (dist > 0.0 && dist - cfg.obstacle->radius <= reach) n = n + (1.0 / dist) * d;
    }
    const double len = geom::norm(n);
    out[k] = len > 0.0 ? (1.0 / len) * n : Vec2{};
  }
  return out;
}

Trajectory build_trajectory(const TrajectoryPlan& plan, int n_nodes) {
  const auto frames = sim::simulate_trajectory(plan.sim);
  const auto& solid = frames.front().solid;
  std::vector<std::uint32_t> fluid;
  for (std::size_t k = 0; k < solid.size(); ++k) {
    if (!solid[k]) fluid.push_back(static_cast<std::uint32_t>(k));
  }
  if (static_cast<std::size_t>(n_nodes) > fluid.size()) {
    throw InvalidConfig("n_nodes exceeds the number of fluid cells");
  }
  Trajectory traj;
  bool ok = false;
  for (int attempt = 0; attempt < 5 && !ok; ++attempt) {
    auto rng = sub_rng(plan.sample_seed, static_cast<std::uint64_t>(attempt));
    std::vector<std::uint32_t> pool = fluid;
    for (int k = 0; k < n_nodes; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
    }
    pool.resize(n_nodes);
    std::sort(pool.begin(), pool.end());
    std::vector<Vec2> pts;
    for (std::uint32_t c : pool) pts.push_back(sim::cell_center(plan.sim, c % plan.sim.nx, c / plan.sim.nx));
    try {
      traj.edges = geom::delaunay(pts);
      traj.positions = pts;
      ok = true;
    } catch (const TriangulationFailed&) {
    }
  }
  if (!ok) throw TriangulationFailed("node sampling failed to triangulate after 5 attempts");
  for (auto& p : traj.positions) p = to_f32(p);
  traj.normals = boundary_normals(traj.positions, plan.sim);
  for (auto& n : traj.normals) n = to_f32(n);
  traj.force = to_f32(plan.sim.force);
  const std::size_t n = traj.n_nodes();
  for (const auto& f : frames) {
    auto u = interpolate(f.u, plan.sim, traj.positions);
    const auto vx = interpolate(f.vx, plan.sim, traj.positions);
    const auto vy = interpolate(f.vy, plan.sim, traj.positions);
    std::vector<double> v(2 * n);
    for (std::size_t k = 0; k < n; ++k) {
      u[k] = to_f32(u[k]);
      v[2 * k] = to_f32(vx[k]);
      v[2 * k + 1] = to_f32(vy[k]);
    }
    traj.u.push_back(std::move(u));
    traj.v.push_back(std::move(v));
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

std::uint32_t file_crc32(const fs::path& path) {
  const auto bytes = binio::read_file(path);
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<fs::path> Manifest::files() const {
  std::vector<fs::path> out;
  for (const auto& f : doc.at("files")) out.push_back(dir / f.at("path").get<std::string>());
  return out;
}

namespace {

json file_entry(const fs::path& dir, const std::string& name) {
  const fs::path p = dir / name;
  return {{"path", name}, {"crc32", file_crc32(p)}, {"bytes", fs::file_size(p)}};
}

void write_manifest(const fs::path& dir, const json& doc) {
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  out << doc.dump(2) << '\n';
}

std::string traj_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%05d.bin", k);
  return buf;
}

}  // namespace

Manifest build_ns_dataset(const NsDatasetSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  const int n = spec.n_traj;
  std::vector<TrajectoryPlan> plans;
  for (int k = 0; k < n; ++k) plans.push_back(plan_trajectory(spec, k));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int k = next++; k < n; k = next++) {
      try {
        save_trajectory(out_dir / traj_name(k), build_trajectory(plans[k], spec.n_nodes));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int jobs = std::min(spec.jobs, n);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (int k = 0; k < n; ++k) {
    if (!errors[k]) continue;
    for (int m = 0; m < n; ++m) {
      std::error_code ec;
      fs::remove(out_dir / traj_name(m), ec);
    }
    std::rethrow_exception(errors[k]);
  }
  json trajs = json::array(), files = json::array();
  for (int k = 0; k < n; ++k) {
    trajs.push_back({{"file", traj_name(k)}, {"sim", plans[k].sim.to_json()}});
    files.push_back(file_entry(out_dir, traj_name(k)));
  }
  Manifest m;
  m.dir = out_dir;
  m.doc = {{"schema_version", 1},
           {"kind", "ns-" + to_string(spec.scenario)},
           {"counts", {{"trajectories", n}, {"nodes", spec.n_nodes}, {"frames", spec.n_frames}}},
           {"seeds", {{"dataset", spec.seed}}},
           {"params", spec.to_json()},
           {"trajectories", trajs},
           {"files", files}};
  write_manifest(out_dir, m.doc);
  return m;
}

Manifest write_tetris_dataset(const std::vector<TetrisSample>& samples, const std::string& row, std::uint64_t seed,
                              const fs::path& out_dir) {
  fs::create_directories(out_dir);
  save_tetris(out_dir / "samples.json", samples);
  Manifest m;
  m.dir = out_dir;
  m.doc = {{"schema_version", 1},
           {"kind", "tetris"},
           {"counts", {{"samples", samples.size()}}},
           {"seeds", {{"dataset", seed}}},
           {"params", {{"row", row}}},
           {"files", json::array({file_entry(out_dir, "samples.json")})}};
  write_manifest(out_dir, m.doc);
  return m;
}

Manifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  const auto bytes = binio::read_file(file);
  Manifest m;
  m.dir = file.parent_path();
  try {
    m.doc = json::parse(bytes.begin(), bytes.end());
    if (m.doc.at("schema_version").get<int>() != 1) throw CorruptFile(file.string() + ": unsupported schema_version");
    const std::string kind = m.kind();
    if (kind != "tetris" && kind != "ns-open" && kind != "ns-obstacle") {
      throw CorruptFile(file.string() + ": unknown kind '" + kind + "'");
    }
    for (const auto& f : m.doc.at("files")) {
      const fs::path p = m.dir / f.at("path").get<std::string>();
      if (!fs::exists(p)) throw IntegrityError("manifest lists missing file " + p.string());
      if (file_crc32(p) != f.at("crc32").get<std::uint32_t>()) {
        throw IntegrityError("checksum mismatch for " + p.string());
      }
    }
  } catch (const json::exception& e) {
    throw CorruptFile(file.string() + ": " + e.what());
  }
  return m;
}

std::vector<Trajectory> load_ns_dataset(const Manifest& m) {
  if (m.kind().rfind("ns-", 0) != 0) throw ArtifactMismatch("manifest is not a Navier-Stokes dataset");
  std::vector<Trajectory> out;
  for (const auto& p : m.files()) out.push_back(load_trajectory(p));
  return out;
}

std::vector<TetrisSample> load_tetris_dataset(const Manifest& m) {
  if (m.kind() != "tetris") throw ArtifactMismatch("manifest is not a tetris dataset");
  std::vector<TetrisSample> out;
  for (const auto& p : m.files()) {
    auto s = load_tetris(p);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::optional<sim::Inlet> trajectory_inlet(const Manifest& m, std::size_t index) {
  if (!m.doc.contains("trajectories")) return std::nullopt;
  const auto& t = m.doc.at("trajectories");
  if (index >= t.size()) throw InvalidArgument("trajectory index out of range");
  const auto cfg = sim::SimConfig::from_json(t[index].at("sim"));
  return cfg.inlet;
}

}  // namespace se2gnn::data
