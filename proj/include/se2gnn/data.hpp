#pragma once

// Dataset builders and on-disk formats.
//
// Trajectory file: "SE2DS\x00\x01", u32 N, u32 T, u32 E, f32 force[2],
// f32 positions[N x 2], f32 normals[N x 2], u32 edges[E x 2] (undirected,
// first < second), then per frame f32 u[N] and f32 v[N x 2]. All little endian.
// Manifests are JSON and list every file with its zlib crc32.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "se2gnn/geom.hpp"
#include "se2gnn/sim.hpp"

namespace se2gnn::data {

// ---------------------------------------------------------------------------
// Tetris
// ---------------------------------------------------------------------------

inline constexpr int kTetrisClasses = 7;

struct TetrisSample {
  std::array<geom::Vec2, 4> positions;
  int label = 0;
};

/// The seven tetrominoes (I, O, T, S, Z, L, J) on the unit lattice, uncentered.
const std::array<std::array<geom::Vec2, 4>, kTetrisClasses>& tetris_shapes();
const char* tetris_label_name(int label);

struct TetrisSpec {
  double rotation_angle = 2.0 * 3.14159265358979323846;
  int copies_per_shape = 1;
  bool test_mode = false;  ///< 100 uniformly random rotations per shape

  /// "1x2pi", "2xpi", "4xpi2", "8xpi4" or "test". Throws InvalidArgument.
  static TetrisSpec from_row(const std::string& row);
};

/// Shapes are centered, then rotated by k * angle (k = 0..copies-1) or, in test
/// mode, by angles drawn from `seed`.
std::vector<TetrisSample> gen_tetris(const TetrisSpec& spec, std::uint64_t seed);

void save_tetris(const std::filesystem::path& path, const std::vector<TetrisSample>& samples);
/// Throws CorruptFile.
std::vector<TetrisSample> load_tetris(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Navier-Stokes trajectories
// ---------------------------------------------------------------------------

/// Every value is held at f32 precision so that save/load is lossless.
struct Trajectory {
  std::vector<geom::Vec2> positions;  ///< physical coordinates, uncentered
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  std::vector<geom::Vec2> normals;
  geom::Vec2 force;
  std::vector<std::vector<double>> u;  ///< T x N
  std::vector<std::vector<double>> v;  ///< T x 2N interleaved

  std::size_t n_nodes() const { return positions.size(); }
  std::size_t n_frames() const { return u.size(); }
  /// Throws InvalidArgument on inconsistent sizes or out-of-range edges.
  void check() const;
  geom::Graph2D graph() const;
};

void save_trajectory(const std::filesystem::path& path, const Trajectory& traj);
/// Throws CorruptFile on bad magic, truncation, trailing bytes or bad edge indices.
Trajectory load_trajectory(const std::filesystem::path& path);

enum class Scenario { kOpen, kObstacle };
enum class ForceMode { kFixed, kVarying };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);
std::string to_string(ForceMode m);
ForceMode force_mode_from_string(const std::string& s);

struct NsDatasetSpec {
  Scenario scenario = Scenario::kOpen;
  int n_traj = 8;
  int grid = 32;
  int n_nodes = 256;
  int n_frames = 20;  ///< frames per trajectory, >= 4
  ForceMode force_mode = ForceMode::kFixed;
  double force_range = 0.7;  ///< varying mode draws each component from U(-r, r)
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws InvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
};

/// Per-trajectory simulation settings drawn from the dataset seed.
struct TrajectoryPlan {
  sim::SimConfig sim;
  std::uint64_t sample_seed = 0;
};
TrajectoryPlan plan_trajectory(const NsDatasetSpec& spec, int index);

/// Bilinear interpolation of a cell-centered grid field at physical points
/// (clamped to the outermost cell centers).
std::vector<double> interpolate(const std::vector<double>& field, const sim::SimConfig& cfg,
                                const std::vector<geom::Vec2>& points);

/// Outward unit normals for nodes within one cell of a wall or the obstacle, zero elsewhere.
std::vector<geom::Vec2> boundary_normals(const std::vector<geom::Vec2>& points, const sim::SimConfig& cfg);

/// Simulates one trajectory and samples it onto a random Delaunay graph.
/// Triangulation failures resample with the next sub-seed, at most 5 attempts.
Trajectory build_trajectory(const TrajectoryPlan& plan, int n_nodes);

struct Manifest {
  nlohmann::json doc;
  std::filesystem::path dir;

  std::string kind() const { return doc.at("kind").get<std::string>(); }
  std::vector<std::filesystem::path> files() const;
};

/// Generates the dataset into `out_dir` and writes `manifest.json`. On failure every
/// file written so far is removed and the error is rethrown.
Manifest build_ns_dataset(const NsDatasetSpec& spec, const std::filesystem::path& out_dir);

Manifest write_tetris_dataset(const std::vector<TetrisSample>& samples, const std::string& row,
                              std::uint64_t seed, const std::filesystem::path& out_dir);

std::uint32_t file_crc32(const std::filesystem::path& path);

/// Reads a manifest (directory or file path) and verifies every listed file.
/// Throws CorruptFile for an unreadable manifest and IntegrityError for missing
/// or mismatching files.
Manifest load_manifest(const std::filesystem::path& path);

std::vector<Trajectory> load_ns_dataset(const Manifest& m);
std::vector<TetrisSample> load_tetris_dataset(const Manifest& m);

/// Inlet disc of trajectory `index`, if the manifest's scenario has one.
std::optional<sim::Inlet> trajectory_inlet(const Manifest& m, std::size_t index);

}  // namespace se2gnn::data
