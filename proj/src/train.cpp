#include "se2gnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "se2gnn/errors.hpp"

namespace se2gnn::train {

namespace eng = engine;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("train config: " + m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(lr0 > 0.0)) fail("lr0 must be positive");
  if (schedule != "cosine") fail("schedule must be 'cosine'");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must be in (0, 1)");
  if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  if (windows_per_trajectory < 1) fail("windows_per_trajectory must be >= 1");
  if (jobs < 1) fail("jobs must be >= 1");
}

json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"epochs", epochs},
          {"lr0", lr0},
          {"schedule", schedule},
          {"val_fraction", val_fraction},
          {"seed", seed},
          {"precision", precision},
          {"windows_per_trajectory", windows_per_trajectory},
          {"clip_norm", clip_norm},
          {"jobs", jobs}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidConfig("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "lr0") c.lr0 = v.get<double>();
      else if (key == "schedule") c.schedule = v.get<std::string>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "precision") c.precision = v.get<int>();
      else if (key == "windows_per_trajectory") c.windows_per_trajectory = v.get<int>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "jobs") c.jobs = v.get<int>();
      else if (key == "schema_version") {
        if (v.get<int>() != 1) throw InvalidConfig("train config: unsupported schema_version");
      } else {
        throw InvalidConfig("train config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Fields and metrics
// ---------------------------------------------------------------------------

Frame frame_of(const data::Trajectory& traj, std::size_t t) {
  if (t >= traj.n_frames()) throw InvalidArgument("frame index out of range");
  return {traj.u[t], traj.v[t]};
}

double smse_loss(const Frame& pred, const Frame& target) {
  const std::size_t n = target.u.size();
  if (pred.u.size() != n || pred.v.size() != 2 * n || target.v.size() != 2 * n) {
    throw ShapeMismatch("smse_loss: prediction and target sizes differ");
  }
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double du = pred.u[i] - target.u[i];
    const double dx = pred.v[2 * i] - target.v[2 * i];
    const double dy = pred.v[2 * i + 1] - target.v[2 * i + 1];
    s += du * du + dx * dx + dy * dy;
  }
  return s / static_cast<double>(n);
}

model::NodeInputs window_inputs(const data::Trajectory& traj, std::span<const Frame> history,
                                const std::vector<double>* inlet_mask) {
  if (history.size() != kHistory) throw InvalidArgument("window_inputs: expected three history frames");
  const std::size_t n = traj.n_nodes();
  const std::size_t ns = kHistory + (inlet_mask ? 1 : 0);
  const std::size_t nr = kHistory + 2;
  if (inlet_mask && inlet_mask->size() != n) throw ShapeMismatch("window_inputs: inlet mask size");
  model::NodeInputs in;
  in.scalar = eng::Array<double>::zeros({n, ns});
  in.rot = eng::Array<double>::zeros({n, 2 * nr});
  for (std::size_t h = 0; h < kHistory; ++h) {
    if (history[h].u.size() != n || history[h].v.size() != 2 * n) throw ShapeMismatch("window_inputs: frame size");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < kHistory; ++h) {
      in.scalar.at(i, h) = history[h].u[i];
      in.rot.at(i, 2 * h) = history[h].v[2 * i];
      in.rot.at(i, 2 * h + 1) = history[h].v[2 * i + 1];
    }
    if (inlet_mask) in.scalar.at(i, kHistory) = (*inlet_mask)[i];
    in.rot.at(i, 2 * kHistory) = traj.normals[i].x;
    in.rot.at(i, 2 * kHistory + 1) = traj.normals[i].y;
    in.rot.at(i, 2 * kHistory + 2) = traj.force.x;
    in.rot.at(i, 2 * kHistory + 3) = traj.force.y;
  }
  return in;
}

std::vector<double> inlet_mask(const data::Trajectory& traj, const sim::Inlet& inlet) {
  std::vector<double> m(traj.n_nodes(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (geom::norm(traj.positions[i] - inlet.center) < inlet.radius) m[i] = 1.0;
  }
  return m;
}

template <class T>
Predictor model_predictor(const model::Model<T>& m) {
  return [&m](const StepContext& c) {
    const model::Prediction p = m.predict(c.graph, c.inputs);
    const std::size_t n = c.graph.num_nodes();
    if (p.scalar.cols() < 1 || p.rot.data.size() < 2 * n) {
      throw ArtifactMismatch("surrogate model needs one scalar and one vector output");
    }
    Frame f;
    f.u.resize(n);
    f.v.resize(2 * n);
    const std::size_t sc = p.scalar.cols(), rc = p.rot.data.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
      f.u[i] = p.scalar.data[i * sc];
      f.v[2 * i] = p.rot.data[i * rc];
      f.v[2 * i + 1] = p.rot.data[i * rc + 1];
    }
    return f;
  };
}

template Predictor model_predictor<float>(const model::Model<float>&);
template Predictor model_predictor<double>(const model::Model<double>&);

Predictor oracle_predictor() {
  return [](const StepContext& c) { return frame_of(c.traj, c.target_index); };
}

Predictor identity_predictor() {
  return [](const StepContext& c) {
    const std::size_t n = c.traj.n_nodes();
    Frame f;
    f.u.resize(n);
    f.v.resize(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      f.u[i] = c.inputs.scalar.at(i, kHistory - 1);
      f.v[2 * i] = c.inputs.rot.at(i, 2 * (kHistory - 1));
      f.v[2 * i + 1] = c.inputs.rot.at(i, 2 * (kHistory - 1) + 1);
    }
    return f;
  };
}

double one_step_error(const Predictor& p, const data::Trajectory& traj, const std::vector<double>* mask) {
  const std::size_t t_total = traj.n_frames();
  if (t_total < kHistory + 1) throw InvalidArgument("one_step_error needs at least 4 frames");
  const geom::Graph2D graph = traj.graph();
  double acc = 0.0;
  for (std::size_t t = kHistory; t < t_total; ++t) {
    const std::vector<Frame> hist{frame_of(traj, t - 3), frame_of(traj, t - 2), frame_of(traj, t - 1)};
    const auto in = window_inputs(traj, hist, mask);
    acc += smse_loss(p({traj, graph, in, t}), frame_of(traj, t));
  }
  return acc / static_cast<double>(t_total - kHistory);
}

RolloutResult rollout(const Predictor& p, const data::Trajectory& traj, int horizon, const std::vector<double>* mask) {
  if (horizon < 1 || static_cast<std::size_t>(horizon) + kHistory > traj.n_frames()) {
    throw InvalidArgument("rollout horizon " + std::to_string(horizon) + " outside [1, T-3]");
  }
  const geom::Graph2D graph = traj.graph();
  std::vector<Frame> hist{frame_of(traj, 0), frame_of(traj, 1), frame_of(traj, 2)};
  RolloutResult r;
  for (int h = 0; h < horizon; ++h) {
    const std::size_t t = kHistory + static_cast<std::size_t>(h);
    const auto in = window_inputs(traj, hist, mask);
    Frame next = p({traj, graph, in, t});
    r.step_errors.push_back(smse_loss(next, frame_of(traj, t)));
    hist.erase(hist.begin());
    hist.push_back(next);
    r.frames.push_back(std::move(next));
  }
  double s = 0.0;
  for (double e : r.step_errors) s += e;
  r.mean_error = s / horizon;
  return r;
}

json MetricReport::to_json() const {
  json j{{"one_step_smse", one_step_smse}, {"rollout_smse", rollout_smse}};
  j["accuracy"] = accuracy ? json(*accuracy) : json(nullptr);
  j["nll"] = nll ? json(*nll) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

template <class T>
bool adam_step(eng::ParamSet<T>& params, const std::vector<std::vector<T>>& grads, AdamState& st, double lr) {
  if (grads.size() != params.size()) throw ShapeMismatch("adam_step: gradient count differs from parameter count");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].value.size()) throw ShapeMismatch("adam_step: gradient shape for " + params[k].name);
  }
  if (st.m.empty()) {
    for (const auto& e : params) {
      st.m.emplace_back(e.value.size(), 0.0);
      st.v.emplace_back(e.value.size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ShapeMismatch("adam_step: optimizer state does not match parameters");
  for (const auto& g : grads) {
    for (T x : g) {
      if (!std::isfinite(static_cast<double>(x))) {
        ++st.skipped;
        return false;
      }
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(grads[k][i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
  return true;
}

template bool adam_step<float>(eng::ParamSet<float>&, const std::vector<std::vector<float>>&, AdamState&, double);
template bool adam_step<double>(eng::ParamSet<double>&, const std::vector<std::vector<double>>&, AdamState&, double);

double cosine_lr(long step, long total, double lr0) {
  if (step < 0 || step > total) throw InvalidArgument("cosine_lr: step outside [0, total]");
  if (total == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

template <class T>
double clip_grad_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      for (T& x : g) x = static_cast<T>(static_cast<double>(x) * f);
    }
  }
  return norm;
}

template double clip_grad_norm<float>(std::vector<std::vector<float>>&, double);
template double clip_grad_norm<double>(std::vector<std::vector<double>>&, double);

// ---------------------------------------------------------------------------
// Shared loop helpers
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::string csv_row(int epoch, const std::string& split, std::optional<double> loss, std::optional<double> one_step,
                    std::optional<double> acc, std::optional<double> nll, double lr) {
  auto cell = [](std::optional<double> v) { return v ? fmt(*v) : std::string(); };
  return std::to_string(epoch) + "," + split + "," + cell(loss) + "," + cell(one_step) + "," + cell(acc) + "," +
         cell(nll) + "," + fmt(lr) + "\n";
}

template <class T>
eng::ParamSet<double> to_double(const eng::ParamSet<T>& p) {
  eng::ParamSet<double> out;
  for (const auto& e : p) out.add(e.name, e.shape, std::vector<double>(e.value.begin(), e.value.end()));
  return out;
}

template <class T>
std::vector<T> cast_vec(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

// Runs `item(k, session)` for every k in [0, count) on up to `jobs` threads, each
// item getting its own session, and sums gradients in thread order. Returns the
// summed loss.
template <class T, class F>
double accumulate(const eng::ParamSet<T>& params, std::size_t count, int jobs, F&& item,
                  std::vector<std::vector<T>>& grads) {
  const std::size_t nt = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(jobs), count));
  std::vector<std::vector<std::vector<T>>> part(nt);
  std::vector<double> loss(nt, 0.0);
  std::vector<std::exception_ptr> err(nt);
  auto run = [&](std::size_t w) {
    try {
      const std::size_t lo = count * w / nt, hi = count * (w + 1) / nt;
      for (std::size_t k = lo; k < hi; ++k) {
        eng::Session<T> s(params);
        const eng::Tensor<T> l = item(k, s);
        loss[w] += static_cast<double>(l.item());
        s.backward(l);
        auto g = s.gradients();
        if (part[w].empty()) {
          part[w] = std::move(g);
        } else {
          for (std::size_t a = 0; a < g.size(); ++a) {
            for (std::size_t b = 0; b < g[a].size(); ++b) part[w][a][b] += g[a][b];
          }
        }
      }
    } catch (...) {
      err[w] = std::current_exception();
    }
  };
  if (nt == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < nt; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (auto& e : err) {
    if (e) std::rethrow_exception(e);
  }
  grads.clear();
  for (const auto& e : params) grads.emplace_back(e.value.size(), T(0));
  double total = 0.0;
  for (std::size_t w = 0; w < nt; ++w) {
    total += loss[w];
    for (std::size_t a = 0; a < part[w].size(); ++a) {
      for (std::size_t b = 0; b < part[w][a].size(); ++b) grads[a][b] += part[w][a][b];
    }
  }
  return total;
}

template <class T>
void optimizer_update(eng::ParamSet<T>& params, std::vector<std::vector<T>>& grads, AdamState& st,
                      const TrainConfig& tc, double lr) {
  clip_grad_norm(grads, tc.clip_norm);
  adam_step(params, grads, st, lr);
}

}  // namespace

double suggest_cutoff(std::span<const geom::Graph2D> graphs) {
  std::vector<double> len;
  for (const auto& g : graphs) {
    for (const auto& e : g.edges) len.push_back(geom::norm(g.positions[e.j] - g.positions[e.i]));
  }
  if (len.empty()) throw InvalidArgument("suggest_cutoff: no edges");
  std::sort(len.begin(), len.end());
  const std::size_t k = std::min(len.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * len.size())) - 1);
  return len[k];
}

SurrogateData surrogate_data(const data::Manifest& m) {
  SurrogateData d;
  d.trajectories = data::load_ns_dataset(m);
  if (m.kind() == "ns-obstacle") {
    for (std::size_t k = 0; k < d.trajectories.size(); ++k) {
      const auto inlet = data::trajectory_inlet(m, k);
      d.inlet_masks.push_back(inlet ? inlet_mask(d.trajectories[k], *inlet) : std::vector<double>(d.trajectories[k].n_nodes(), 0.0));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Surrogate training
// ---------------------------------------------------------------------------

namespace {

template <class T>
eng::Tensor<T> window_loss(eng::Session<T>& s, const model::Model<T>& m, const geom::Graph2D& graph,
                           const data::Trajectory& traj, std::size_t t, const std::vector<double>* mask,
                           double node_total) {
  const std::vector<Frame> hist{frame_of(traj, t - 3), frame_of(traj, t - 2), frame_of(traj, t - 1)};
  const auto in = window_inputs(traj, hist, mask);
  const auto out = m.forward(s, graph, in);
  const std::size_t n = traj.n_nodes();
  if (out.scalar.cols() != 1 || out.rot.cols() != 2) {
    throw InvalidConfig("surrogate model must have out_scalar_dim = 1 and out_rot_dim = 1");
  }
  const auto tu = s.constant({n, 1}, cast_vec<T>(traj.u[t]));
  const auto tv = s.constant({n, 2}, cast_vec<T>(traj.v[t]));
  const auto sq = eng::add(eng::sum(eng::square(eng::sub(out.scalar, tu))), eng::sum(eng::square(eng::sub(out.rot, tv))));
  return eng::scale(sq, static_cast<T>(1.0 / node_total));
}

template <class T>
MetricReport surrogate_report(const model::Model<T>& m, const SurrogateData& d, const std::vector<std::size_t>& idx) {
  MetricReport r;
  const Predictor p = model_predictor(m);
  std::size_t horizon = 10;
  for (std::size_t k : idx) horizon = std::min(horizon, d.trajectories[k].n_frames() - kHistory);
  r.rollout_smse.assign(horizon, 0.0);
  for (std::size_t k : idx) {
    const auto* mask = d.inlet_masks.empty() ? nullptr : &d.inlet_masks[k];
    r.one_step_smse += one_step_error(p, d.trajectories[k], mask);
    const auto ro = rollout(p, d.trajectories[k], static_cast<int>(horizon), mask);
    double run = 0.0;
    for (std::size_t h = 0; h < horizon; ++h) {
      run += ro.step_errors[h];
      r.rollout_smse[h] += run / static_cast<double>(h + 1);
    }
  }
  r.one_step_smse /= static_cast<double>(idx.size());
  for (double& x : r.rollout_smse) x /= static_cast<double>(idx.size());
  return r;
}

template <class T>
TrainResult train_surrogate_impl(const model::ModelConfig& cfg, const SurrogateData& d, const TrainConfig& tc) {
  const std::size_t n_traj = d.trajectories.size();
  if (n_traj == 0) throw InvalidArgument("train_surrogate: empty dataset");
  if (!d.inlet_masks.empty() && d.inlet_masks.size() != n_traj) throw InvalidArgument("train_surrogate: inlet masks");
  const int expected_scalars = kHistory + (d.inlet_masks.empty() ? 0 : 1);
  if (cfg.embedding != model::EmbeddingKind::kNode || cfg.in_scalar != expected_scalars || cfg.in_rot != kHistory + 2) {
    throw InvalidConfig("surrogate model needs node embedding with in_scalar = " + std::to_string(expected_scalars) +
                        " and in_rot = 5");
  }
  for (const auto& t : d.trajectories) {
    if (t.n_frames() < kHistory + 1) throw InvalidArgument("train_surrogate: trajectories need at least 4 frames");
  }
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(n_traj);
  for (std::size_t k = 0; k < n_traj; ++k) order[k] = k;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = 0;
  if (n_traj >= 2) {
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(tc.val_fraction * n_traj)), 1, n_traj - 1);
  }
  std::vector<std::size_t> val(order.end() - static_cast<long>(n_val), order.end());
  std::vector<std::size_t> tr(order.begin(), order.end() - static_cast<long>(n_val));
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  const std::vector<std::size_t>& select = val.empty() ? tr : val;

  std::vector<geom::Graph2D> graphs;
  for (const auto& t : d.trajectories) graphs.push_back(t.graph());

  model::Model<T> m = model::Model<T>::build(cfg);
  AdamState st;
  const std::size_t per_epoch = tr.size() * static_cast<std::size_t>(tc.windows_per_trajectory);
  const std::size_t batches = (per_epoch + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = static_cast<long>(batches) * tc.epochs;
  long step = 0;

  TrainResult res;
  res.config = cfg;
  res.val_indices = val;
  res.csv = std::string(kCsvHeader) + "\n";
  double best = INFINITY;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<std::pair<std::size_t, std::size_t>> windows;
    for (std::size_t k : tr) {
      std::uniform_int_distribution<std::size_t> pick(kHistory, d.trajectories[k].n_frames() - 1);
      for (int w = 0; w < tc.windows_per_trajectory; ++w) windows.emplace_back(k, pick(rng));
    }
    std::shuffle(windows.begin(), windows.end(), rng);
    double epoch_loss = 0.0;
    double lr = tc.lr0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * tc.batch_size, hi = std::min(per_epoch, lo + tc.batch_size);
      double nodes = 0.0;
      for (std::size_t k = lo; k < hi; ++k) nodes += static_cast<double>(d.trajectories[windows[k].first].n_nodes());
      std::vector<std::vector<T>> grads;
      const double loss = accumulate<T>(
          m.params(), hi - lo, tc.jobs,
          [&](std::size_t k, eng::Session<T>& s) {
            const auto [ti, t] = windows[lo + k];
            const auto* mask = d.inlet_masks.empty() ? nullptr : &d.inlet_masks[ti];
            return window_loss(s, m, graphs[ti], d.trajectories[ti], t, mask, nodes);
          },
          grads);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b + 1) + " (lr " + fmt(lr) + ")");
      }
      lr = cosine_lr(step, total_steps, tc.lr0);
      optimizer_update(m.params(), grads, st, tc, lr);
      ++step;
      epoch_loss += loss * static_cast<double>(hi - lo);
    }
    epoch_loss /= static_cast<double>(per_epoch);
    res.csv += csv_row(epoch, "train", epoch_loss, std::nullopt, std::nullopt, std::nullopt, lr);
    double sel = 0.0;
    const Predictor p = model_predictor(m);
    for (std::size_t k : select) {
      sel += one_step_error(p, d.trajectories[k], d.inlet_masks.empty() ? nullptr : &d.inlet_masks[k]);
    }
    sel /= static_cast<double>(select.size());
    if (!std::isfinite(sel)) throw TrainingDiverged("non-finite validation error at epoch " + std::to_string(epoch));
    res.csv += csv_row(epoch, val.empty() ? "train-eval" : "val", sel, sel, std::nullopt, std::nullopt, lr);
    if (sel < best) {
      best = sel;
      res.best_epoch = epoch;
      res.params = to_double(m.params());
    }
  }
  res.skipped_steps = st.skipped;
  model::Model<T> best_model = model::Model<T>::build(cfg);
  best_model.load_values(res.params);
  res.report = surrogate_report(best_model, d, select);
  return res;
}

}  // namespace

TrainResult train_surrogate(const model::ModelConfig& cfg, const SurrogateData& d, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  return tc.precision == 32 ? train_surrogate_impl<float>(cfg, d, tc) : train_surrogate_impl<double>(cfg, d, tc);
}

// ---------------------------------------------------------------------------
// Tetris
// ---------------------------------------------------------------------------

model::ModelConfig tetris_model_config(model::ConvKind kind, int hidden_scalar, int hidden_rot, std::uint64_t seed) {
  model::ModelConfig c;
  c.n_layers = 2;
  c.conv_kind = kind;
  c.hidden_scalar = hidden_scalar;
  c.hidden_rot = hidden_rot;
  c.embedding = model::EmbeddingKind::kRelative;
  c.in_scalar = 0;
  c.in_rot = 0;
  c.out_scalar_dim = data::kTetrisClasses;
  c.out_rot_dim = 0;
  c.cutoff = 4.0;
  c.seed = seed;
  return c;
}

namespace {

const model::NodeInputs& empty_inputs() {
  static const model::NodeInputs in{eng::Array<double>::zeros({4, 0}), eng::Array<double>::zeros({4, 0})};
  return in;
}

template <class T>
eng::Tensor<T> pooled_logits(eng::Session<T>& s, const model::Model<T>& m, const data::TetrisSample& sample) {
  const auto g = geom::Graph2D::complete(sample.positions);
  const auto out = m.forward(s, g, empty_inputs());
  const auto ones = s.constant({1, g.num_nodes()}, std::vector<T>(g.num_nodes(), T(1)));
  return eng::matmul(ones, out.scalar);
}

}  // namespace

template <class T>
std::vector<double> tetris_logits(const model::Model<T>& m, const data::TetrisSample& sample) {
  eng::Session<T> s(m.params(), false);
  const auto l = pooled_logits(s, m, sample);
  return std::vector<double>(l.value().begin(), l.value().end());
}

template std::vector<double> tetris_logits<float>(const model::Model<float>&, const data::TetrisSample&);
template std::vector<double> tetris_logits<double>(const model::Model<double>&, const data::TetrisSample&);

template <class T>
TetrisEval evaluate_tetris(const model::Model<T>& m, std::span<const data::TetrisSample> samples) {
  TetrisEval e;
  if (samples.empty()) return e;
  for (const auto& s : samples) {
    const auto l = tetris_logits(m, s);
    const double mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double x : l) z += std::exp(x - mx);
    e.nll += -(l[s.label] - mx - std::log(z));
    if (std::max_element(l.begin(), l.end()) - l.begin() == s.label) e.accuracy += 1.0;
  }
  e.accuracy /= static_cast<double>(samples.size());
  e.nll /= static_cast<double>(samples.size());
  return e;
}

template TetrisEval evaluate_tetris<float>(const model::Model<float>&, std::span<const data::TetrisSample>);
template TetrisEval evaluate_tetris<double>(const model::Model<double>&, std::span<const data::TetrisSample>);

namespace {

template <class T>
TrainResult train_tetris_impl(const model::ModelConfig& cfg, std::span<const data::TetrisSample> train,
                              std::span<const data::TetrisSample> test, const TrainConfig& tc) {
  if (train.empty()) throw InvalidArgument("train_tetris: empty training set");
  if (cfg.out_scalar_dim != data::kTetrisClasses) throw InvalidConfig("tetris model needs out_scalar_dim = 7");
  if (cfg.embedding != model::EmbeddingKind::kRelative) throw InvalidConfig("tetris model needs relative embedding");
  model::Model<T> m = model::Model<T>::build(cfg);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  const std::size_t bs = static_cast<std::size_t>(tc.batch_size);
  const std::size_t batches = (train.size() + bs - 1) / bs;
  const long total_steps = static_cast<long>(batches) * tc.epochs;
  long step = 0;
  AdamState st;
  TrainResult res;
  res.config = cfg;
  res.csv = std::string(kCsvHeader) + "\n";
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0, lr = tc.lr0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * bs, hi = std::min(train.size(), lo + bs);
      const T inv = static_cast<T>(1.0 / static_cast<double>(hi - lo));
      std::vector<std::vector<T>> grads;
      const double loss = accumulate<T>(
          m.params(), hi - lo, tc.jobs,
          [&](std::size_t k, eng::Session<T>& s) {
            const auto& sample = train[order[lo + k]];
            const auto lp = eng::log_softmax_rows(pooled_logits(s, m, sample));
            const std::uint32_t label = static_cast<std::uint32_t>(sample.label);
            return eng::scale(eng::select_cols(lp, std::span<const std::uint32_t>(&label, 1)), -inv);
          },
          grads);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite tetris loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b + 1));
      }
      lr = cosine_lr(step, total_steps, tc.lr0);
      optimizer_update(m.params(), grads, st, tc, lr);
      ++step;
      epoch_loss += loss * static_cast<double>(hi - lo);
    }
    epoch_loss /= static_cast<double>(train.size());
    res.csv += csv_row(epoch, "train", epoch_loss, std::nullopt, std::nullopt, epoch_loss, lr);
  }
  const TetrisEval tr_eval = evaluate_tetris(m, train);
  res.csv += csv_row(tc.epochs, "train-eval", tr_eval.nll, std::nullopt, tr_eval.accuracy, tr_eval.nll, 0.0);
  res.best_epoch = tc.epochs;
  res.params = to_double(m.params());
  res.skipped_steps = st.skipped;
  if (!test.empty()) {
    const TetrisEval te = evaluate_tetris(m, test);
    res.report.accuracy = te.accuracy;
    res.report.nll = te.nll;
    res.csv += csv_row(tc.epochs, "test", te.nll, std::nullopt, te.accuracy, te.nll, 0.0);
  }
  return res;
}

}  // namespace

TrainResult train_tetris(const model::ModelConfig& cfg, std::span<const data::TetrisSample> train,
                         std::span<const data::TetrisSample> test, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  return tc.precision == 32 ? train_tetris_impl<float>(cfg, train, test, tc)
                            : train_tetris_impl<double>(cfg, train, test, tc);
}

}  // namespace se2gnn::train
