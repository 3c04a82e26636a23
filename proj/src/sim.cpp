#include "se2gnn/sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "se2gnn/errors.hpp"

namespace se2gnn::sim {

using nlohmann::json;

void SimConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("sim config: " + m); };
  if (nx < 8 || ny < 8) fail("nx and ny must be >= 8");
  if (!(dx > 0.0) || !(dt > 0.0)) fail("dx and dt must be positive");
  if (!(density > 0.0)) fail("density must be positive");
  if (viscosity < 0.0) fail("viscosity must be >= 0");
  if (n_steps < 1 || stride < 1) fail("n_steps and stride must be >= 1");
  if (!(cg_tolerance > 0.0)) fail("cg_tolerance must be positive");
  if (n_blobs < 0) fail("n_blobs must be >= 0");
  const double half = 0.5 * std::min(width(), height());
  if (obstacle && !(obstacle->radius > 0.0 && obstacle->radius < half)) fail("obstacle radius out of range");
  if (inlet && !(inlet->radius > 0.0 && inlet->radius < half)) fail("inlet radius out of range");
}

namespace {

json vec_json(geom::Vec2 v) { return json::array({v.x, v.y}); }

geom::Vec2 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw InvalidConfig("expected a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

template <class F>
void strict_keys(const json& j, const char* what, F&& on_key) {
  if (!j.is_object()) throw InvalidConfig(std::string(what) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!on_key(k, v)) throw InvalidConfig(std::string(what) + ": unknown key '" + k + "'");
  }
}

}  // namespace

json SimConfig::to_json() const {
  json j{{"nx", nx},
         {"ny", ny},
         {"dx", dx},
         {"dt", dt},
         {"viscosity", viscosity},
         {"density", density},
         {"force", vec_json(force)},
         {"n_steps", n_steps},
         {"stride", stride},
         {"seed", seed},
         {"cg_tolerance", cg_tolerance},
         {"n_blobs", n_blobs}};
  if (obstacle) j["obstacle"] = {{"center", vec_json(obstacle->center)}, {"radius", obstacle->radius}};
  if (inlet) {
    j["inlet"] = {{"center", vec_json(inlet->center)},
                  {"radius", inlet->radius},
                  {"intensity", inlet->intensity}};
  }
  return j;
}

SimConfig SimConfig::from_json(const json& j) {
  SimConfig c;
  try {
    strict_keys(j, "sim config", [&](const std::string& k, const json& v) {
      if (k == "nx") c.nx = v.get<int>();
      else if (k == "ny") c.ny = v.get<int>();
      else if (k == "dx") c.dx = v.get<double>();
      else if (k == "dt") c.dt = v.get<double>();
      else if (k == "viscosity") c.viscosity = v.get<double>();
      else if (k == "density") c.density = v.get<double>();
      else if (k == "force") c.force = vec_from(v);
      else if (k == "n_steps") c.n_steps = v.get<int>();
      else if (k == "stride") c.stride = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "cg_tolerance") c.cg_tolerance = v.get<double>();
      else if (k == "n_blobs") c.n_blobs = v.get<int>();
      else if (k == "obstacle") {
        Circle o;
        strict_keys(v, "obstacle", [&](const std::string& kk, const json& vv) {
          if (kk == "center") o.center = vec_from(vv);
          else if (kk == "radius") o.radius = vv.get<double>();
          else return false;
          return true;
        });
        c.obstacle = o;
      } else if (k == "inlet") {
        Inlet in;
        strict_keys(v, "inlet", [&](const std::string& kk, const json& vv) {
          if (kk == "center") in.center = vec_from(vv);
          else if (kk == "radius") in.radius = vv.get<double>();
          else if (kk == "intensity") in.intensity = vv.get<double>();
          else return false;
          return true;
        });
        c.inlet = in;
      } else {
        return false;
      }
      return true;
    });
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("sim config: ") + e.what());
  }
  c.validate();
  return c;
}

SimConfig open_scenario(int grid, double extent, double dt) {
  SimConfig c;
  c.nx = c.ny = grid;
  c.dx = extent / grid;
  c.dt = dt;
  return c;
}

SimConfig obstacle_scenario(int grid, double x_obstacle, double x_inlet) {
  SimConfig c;
  c.nx = c.ny = grid;
  c.dx = 100.0 / grid;
  c.dt = 0.5;
  c.stride = 2;
  c.n_steps = 75;
  c.obstacle = Circle{{x_obstacle, 50.0}, 15.0};
  c.inlet = Inlet{{x_inlet, 9.5}, 7.0, 0.5};
  return c;
}

double FluidState::max_speed() const {
  double m = 0.0;
  for (std::size_t k = 0; k < vx.size(); ++k) m = std::max(m, std::hypot(vx[k], vy[k]));
  return m;
}

double FluidState::total_smoke() const {
  double s = 0.0;
  for (double x : u) s += x;
  return s;
}

geom::Vec2 cell_center(const SimConfig& cfg, int i, int j) {
  return {(i + 0.5) * cfg.dx, (j + 0.5) * cfg.dx};
}

namespace {

bool inside(geom::Vec2 p, geom::Vec2 c, double r) {
  const double dx = p.x - c.x, dy = p.y - c.y;
  return dx * dx + dy * dy < r * r;
}

}  // namespace

FluidState initial_state(const SimConfig& cfg) {
  cfg.validate();
  FluidState s;
  s.nx = cfg.nx;
  s.ny = cfg.ny;
  const std::size_t n = static_cast<std::size_t>(cfg.nx) * cfg.ny;
  s.u.assign(n, 0.0);
  s.vx.assign(n, 0.0);
  s.vy.assign(n, 0.0);
  s.p.assign(n, 0.0);
  s.solid.assign(n, 0);
  if (cfg.obstacle) {
    for (int j = 0; j < cfg.ny; ++j) {
      for (int i = 0; i < cfg.nx; ++i) {
        if (inside(cell_center(cfg, i, j), cfg.obstacle->center, cfg.obstacle->radius)) s.solid[s.index(i, j)] = 1;
      }
    }
  }
  if (!cfg.inlet) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int blobs = cfg.n_blobs > 0 ? cfg.n_blobs : 3 + static_cast<int>(rng() % 4);
    const double w = cfg.width(), h = cfg.height(), l = std::min(w, h);
    for (int b = 0; b < blobs; ++b) {
      const geom::Vec2 c{w * (0.2 + 0.6 * unit(rng)), h * (0.2 + 0.6 * unit(rng))};
      const double sigma = l * (0.05 + 0.07 * unit(rng));
      const double amp = 0.5 + 0.5 * unit(rng);
      for (int j = 0; j < cfg.ny; ++j) {
        for (int i = 0; i < cfg.nx; ++i) {
          const geom::Vec2 p = cell_center(cfg, i, j);
          const double r2 = (p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y);
          s.u[s.index(i, j)] += amp * std::exp(-0.5 * r2 / (sigma * sigma));
        }
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (s.solid[k]) s.u[k] = 0.0;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Advection
// ---------------------------------------------------------------------------

namespace {

struct Stencil {
  std::size_t k00, k10, k01, k11;
  double tx, ty;
};

// Position in index units, clamped to the cell-center lattice.
Stencil stencil(const FluidState& s, double fi, double fj) {
  fi = std::clamp(fi, 0.0, static_cast<double>(s.nx - 1));
  fj = std::clamp(fj, 0.0, static_cast<double>(s.ny - 1));
  const int i0 = std::min(static_cast<int>(std::floor(fi)), s.nx - 1);
  const int j0 = std::min(static_cast<int>(std::floor(fj)), s.ny - 1);
  // A point exactly on a cell center uses that cell alone, keeping the limiter range mirror symmetric.
  const int i1 = fi == i0 ? i0 : std::min(i0 + 1, s.nx - 1);
  const int j1 = fj == j0 ? j0 : std::min(j0 + 1, s.ny - 1);
  return {s.index(i0, j0), s.index(i1, j0), s.index(i0, j1), s.index(i1, j1), fi - i0, fj - j0};
}

double sample(const std::vector<double>& f, const Stencil& st) {
  const double a = f[st.k00] + st.tx * (f[st.k10] - f[st.k00]);
  const double b = f[st.k01] + st.tx * (f[st.k11] - f[st.k01]);
  return a + st.ty * (b - a);
}

}  // namespace

void advect(FluidState& s, const SimConfig& cfg) {
  const std::size_t n = s.size();
  const double c = cfg.dt / cfg.dx;
  std::vector<Stencil> back(n), fwd(n);
  for (int j = 0; j < s.ny; ++j) {
    for (int i = 0; i < s.nx; ++i) {
      const std::size_t k = s.index(i, j);
      back[k] = stencil(s, i - c * s.vx[k], j - c * s.vy[k]);
      fwd[k] = stencil(s, i + c * s.vx[k], j + c * s.vy[k]);
    }
  }
  auto maccormack = [&](const std::vector<double>& phi) {
    std::vector<double> pred(n), out(n);
    for (std::size_t k = 0; k < n; ++k) pred[k] = sample(phi, back[k]);
    for (std::size_t k = 0; k < n; ++k) {
      const double rev = sample(pred, fwd[k]);
      double v = pred[k] + 0.5 * (phi[k] - rev);
      const Stencil& st = back[k];
      const double lo = std::min({phi[st.k00], phi[st.k10], phi[st.k01], phi[st.k11]});
      const double hi = std::max({phi[st.k00], phi[st.k10], phi[st.k01], phi[st.k11]});
      out[k] = std::clamp(v, lo, hi);
    }
    return out;
  };
  s.u = maccormack(s.u);
  std::vector<double> vx = maccormack(s.vx);
  s.vy = maccormack(s.vy);
  s.vx = std::move(vx);
  for (std::size_t k = 0; k < n; ++k) {
    if (s.solid[k]) s.u[k] = s.vx[k] = s.vy[k] = 0.0;
  }
}

void apply_buoyancy(FluidState& s, const SimConfig& cfg) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.solid[k]) continue;
    s.vx[k] += cfg.dt * cfg.force.x * s.u[k];
    s.vy[k] += cfg.dt * cfg.force.y * s.u[k];
  }
}

void apply_viscosity(FluidState& s, const SimConfig& cfg) {
  if (cfg.viscosity == 0.0) return;
  const double a = cfg.dt * cfg.viscosity / (cfg.dx * cfg.dx);
  auto diffuse = [&](const std::vector<double>& f) {
    std::vector<double> out = f;
    for (int j = 0; j < s.ny; ++j) {
      for (int i = 0; i < s.nx; ++i) {
        const std::size_t k = s.index(i, j);
        if (s.solid[k]) continue;
        double lap = 0.0;
        // Neumann at walls and solids: missing neighbours mirror the cell.
        const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
        for (const auto& q : nb) {
          if (q[0] < 0 || q[0] >= s.nx || q[1] < 0 || q[1] >= s.ny) continue;
          const std::size_t m = s.index(q[0], q[1]);
          if (!s.solid[m]) lap += f[m] - f[k];
        }
        out[k] = f[k] + a * lap;
      }
    }
    return out;
  };
  s.vx = diffuse(s.vx);
  s.vy = diffuse(s.vy);
}

void apply_inlet(FluidState& s, const SimConfig& cfg) {
  if (!cfg.inlet) return;
  for (int j = 0; j < s.ny; ++j) {
    for (int i = 0; i < s.nx; ++i) {
      const std::size_t k = s.index(i, j);
      if (!s.solid[k] && inside(cell_center(cfg, i, j), cfg.inlet->center, cfg.inlet->radius)) {
        s.u[k] = cfg.inlet->intensity;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

namespace {

class Projector {
 public:
  Projector(const FluidState& s, double dx) : s_(s), h_(0.5 / dx) {}

  bool fluid(int i, int j) const {
    return i >= 0 && i < s_.nx && j >= 0 && j < s_.ny && !s_.solid[s_.index(i, j)];
  }

  // Velocity dofs fixed at zero: solid cells and wall-normal components on the outer ring.
  void constrain(std::vector<double>& vx, std::vector<double>& vy) const {
    for (int j = 0; j < s_.ny; ++j) {
      for (int i = 0; i < s_.nx; ++i) {
        const std::size_t k = s_.index(i, j);
        if (s_.solid[k] || i == 0 || i == s_.nx - 1) vx[k] = 0.0;
        if (s_.solid[k] || j == 0 || j == s_.ny - 1) vy[k] = 0.0;
      }
    }
  }

  // D v over fluid cells.
  void div(const std::vector<double>& vx, const std::vector<double>& vy, std::vector<double>& out) const {
    for (int j = 0; j < s_.ny; ++j) {
      for (int i = 0; i < s_.nx; ++i) {
        const std::size_t k = s_.index(i, j);
        if (s_.solid[k]) {
          out[k] = 0.0;
          continue;
        }
        double d = 0.0;
        if (fluid(i + 1, j)) d += vx[s_.index(i + 1, j)];
        if (fluid(i - 1, j)) d -= vx[s_.index(i - 1, j)];
        if (fluid(i, j + 1)) d += vy[s_.index(i, j + 1)];
        if (fluid(i, j - 1)) d -= vy[s_.index(i, j - 1)];
        out[k] = h_ * d;
      }
    }
  }

  // P D^T q
  void grad_t(const std::vector<double>& q, std::vector<double>& gx, std::vector<double>& gy) const {
    auto at = [&](int i, int j) { return fluid(i, j) ? q[s_.index(i, j)] : 0.0; };
    for (int j = 0; j < s_.ny; ++j) {
      for (int i = 0; i < s_.nx; ++i) {
        const std::size_t k = s_.index(i, j);
        gx[k] = h_ * (at(i - 1, j) - at(i + 1, j));
        gy[k] = h_ * (at(i, j - 1) - at(i, j + 1));
      }
    }
    constrain(gx, gy);
  }

 private:
  const FluidState& s_;
  double h_;
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

int project(FluidState& s, const SimConfig& cfg) {
  const std::size_t n = s.size();
  Projector op(s, cfg.dx);
  op.constrain(s.vx, s.vy);
  std::vector<double> b(n), q(n, 0.0), r(n), d(n), ad(n), gx(n), gy(n);
  op.div(s.vx, s.vy, b);
  const double bnorm = std::sqrt(dot(b, b));
  s.p.assign(n, 0.0);
  if (bnorm == 0.0) return 0;
  r = b;
  d = r;
  double rr = dot(r, r);
  const double target = cfg.cg_tolerance * bnorm;
  const long max_iter = 10L * s.nx * s.ny;
  int it = 0;
  while (std::sqrt(rr) > target) {
    if (it >= max_iter) {
      throw SolverFailure("pressure CG did not reach relative residual " + std::to_string(cfg.cg_tolerance) +
                          " after " + std::to_string(it) + " iterations");
    }
    op.grad_t(d, gx, gy);
    op.div(gx, gy, ad);
    const double dad = dot(d, ad);
    if (!(dad > 0.0)) throw SolverFailure("pressure CG breakdown (non-positive curvature)");
    const double alpha = rr / dad;
    for (std::size_t k = 0; k < n; ++k) {
      q[k] += alpha * d[k];
      r[k] -= alpha * ad[k];
    }
    const double rr_new = dot(r, r);
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t k = 0; k < n; ++k) d[k] = r[k] + beta * d[k];
    ++it;
  }
  op.grad_t(q, gx, gy);
  for (std::size_t k = 0; k < n; ++k) {
    s.vx[k] -= gx[k];
    s.vy[k] -= gy[k];
    s.p[k] = -cfg.density / cfg.dt * q[k];
  }
  return it;
}

FluidState step(const FluidState& state, const SimConfig& cfg) {
  if (state.nx != cfg.nx || state.ny != cfg.ny) throw InvalidArgument("sim step: state does not match config grid");
  FluidState s = state;
  advect(s, cfg);
  apply_buoyancy(s, cfg);
  apply_viscosity(s, cfg);
  apply_inlet(s, cfg);
  project(s, cfg);
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.solid[k]) s.u[k] = 0.0;
    s.u[k] = std::max(s.u[k], 0.0);
  }
  return s;
}

std::vector<FluidState> simulate_trajectory(const SimConfig& cfg, const std::optional<FluidState>& initial) {
  cfg.validate();
  FluidState s = initial ? *initial : initial_state(cfg);
  std::vector<FluidState> frames;
  frames.reserve(static_cast<std::size_t>(cfg.n_steps));
  frames.push_back(s);
  while (static_cast<int>(frames.size()) < cfg.n_steps) {
    for (int k = 0; k < cfg.stride; ++k) s = step(s, cfg);
    frames.push_back(s);
  }
  return frames;
}

std::vector<double> divergence(const std::vector<double>& vx, const std::vector<double>& vy, int nx, int ny,
                               double dx) {
  std::vector<double> out(static_cast<std::size_t>(nx) * ny, 0.0);
  auto idx = [nx](int i, int j) { return static_cast<std::size_t>(j) * nx + i; };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      double ddx, ddy;
      if (i == 0) ddx = (vx[idx(1, j)] - vx[idx(0, j)]) / dx;
      else if (i == nx - 1) ddx = (vx[idx(i, j)] - vx[idx(i - 1, j)]) / dx;
      else ddx = (vx[idx(i + 1, j)] - vx[idx(i - 1, j)]) / (2.0 * dx);
      if (j == 0) ddy = (vy[idx(i, 1)] - vy[idx(i, 0)]) / dx;
      else if (j == ny - 1) ddy = (vy[idx(i, j)] - vy[idx(i, j - 1)]) / dx;
      else ddy = (vy[idx(i, j + 1)] - vy[idx(i, j - 1)]) / (2.0 * dx);
      out[idx(i, j)] = ddx + ddy;
    }
  }
  return out;
}

std::vector<double> projected_divergence(const FluidState& s, const SimConfig& cfg) {
  std::vector<double> out(s.size());
  Projector(s, cfg.dx).div(s.vx, s.vy, out);
  return out;
}

}  // namespace se2gnn::sim
