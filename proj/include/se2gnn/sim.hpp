#pragma once

// Collocated-grid smoke solver: MacCormack advection, buoyancy, optional
// viscosity, inlet source and a pressure projection solved by conjugate
// gradients. Cell (i, j) has center ((i + 0.5) dx, (j + 0.5) dx) and flat index
// j * nx + i. Walls are free-slip.

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "se2gnn/geom.hpp"

namespace se2gnn::sim {

struct Circle {
  geom::Vec2 center;
  double radius = 0.0;
};

struct Inlet {
  geom::Vec2 center;
  double radius = 0.0;
  double intensity = 0.5;
};

struct SimConfig {
  int nx = 64;
  int ny = 64;
  double dx = 0.5;
  double dt = 1.5;
  double viscosity = 0.0;
  double density = 1.0;
  geom::Vec2 force{0.0, 0.5};
  std::optional<Circle> obstacle;
  std::optional<Inlet> inlet;
  int n_steps = 30;  ///< frames returned by simulate_trajectory, initial frame included
  int stride = 1;    ///< solver steps between returned frames
  std::uint64_t seed = 0;
  double cg_tolerance = 1e-6;
  int n_blobs = 0;  ///< random smoke blobs; 0 picks 3 to 6 from the seed

  double width() const { return nx * dx; }
  double height() const { return ny * dx; }
  /// Throws InvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
  static SimConfig from_json(const nlohmann::json& j);
};

/// Open box of side `extent` with random initial smoke and no obstacle.
SimConfig open_scenario(int grid, double extent = 32.0, double dt = 1.5);
/// Scaled obstacle scenario: 100 x 100 domain, ball of radius 15 at (x_obs, 50) and an
/// inlet of radius 7 at (x_inlet, 9.5), dt 0.5 with every second step kept.
SimConfig obstacle_scenario(int grid, double x_obstacle, double x_inlet);

struct FluidState {
  int nx = 0;
  int ny = 0;
  std::vector<double> u;
  std::vector<double> vx;
  std::vector<double> vy;
  std::vector<double> p;
  std::vector<std::uint8_t> solid;

  std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * nx + i; }
  std::size_t size() const { return u.size(); }
  double max_speed() const;
  double total_smoke() const;
};

/// Zero velocity, solid mask from the obstacle, smoke from Gaussian blobs (no inlet)
/// or zero (with inlet).
FluidState initial_state(const SimConfig& cfg);

/// Cell center coordinates.
geom::Vec2 cell_center(const SimConfig& cfg, int i, int j);

// Individual phases of `step`, exposed for testing.
void advect(FluidState& s, const SimConfig& cfg);
void apply_buoyancy(FluidState& s, const SimConfig& cfg);
void apply_viscosity(FluidState& s, const SimConfig& cfg);
void apply_inlet(FluidState& s, const SimConfig& cfg);
/// Zeroes solid velocities and wall-normal components, then removes the discrete
/// divergence. Returns the CG iteration count. Throws SolverFailure.
int project(FluidState& s, const SimConfig& cfg);

/// One full solver step.
FluidState step(const FluidState& state, const SimConfig& cfg);

/// cfg.n_steps frames: the initial state and then one frame every cfg.stride steps.
std::vector<FluidState> simulate_trajectory(const SimConfig& cfg,
                                            const std::optional<FluidState>& initial = std::nullopt);

/// Central-difference divergence on interior cells, one-sided on the outer ring.
std::vector<double> divergence(const std::vector<double>& vx, const std::vector<double>& vy,
                               int nx, int ny, double dx);

/// The divergence the projection drives to zero: central differences over fluid cells,
/// with out-of-domain and solid neighbours contributing zero.
std::vector<double> projected_divergence(const FluidState& s, const SimConfig& cfg);

}  // namespace se2gnn::sim
