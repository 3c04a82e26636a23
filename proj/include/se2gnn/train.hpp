#pragma once

// Losses, metrics, optimizer and the two training loops (smoke surrogate and
// Tetris classifier).

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "se2gnn/data.hpp"
#include "se2gnn/engine.hpp"
#include "se2gnn/model.hpp"

namespace se2gnn::train {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 500;
  double lr0 = 1e-3;
  std::string schedule = "cosine";
  double val_fraction = 0.05;
  std::uint64_t seed = 0;
  int precision = 64;
  int windows_per_trajectory = 1;  ///< random history windows drawn per trajectory and epoch
  double clip_norm = 10.0;         ///< global gradient norm; <= 0 disables clipping
  int jobs = 1;

  /// Throws InvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Fields, windows and metrics
// ---------------------------------------------------------------------------

struct Frame {
  std::vector<double> u;  ///< N
  std::vector<double> v;  ///< 2N interleaved
};

inline constexpr int kHistory = 3;

Frame frame_of(const data::Trajectory& traj, std::size_t t);

/// (1/N) sum_i (u_i - u_i^t)^2 + |v_i - v_i^t|^2. Throws ShapeMismatch.
double smse_loss(const Frame& pred, const Frame& target);

/// Per-node inputs for one window. Scalars: u at the three history frames, then the
/// inlet mask when given. Vectors: v at the three history frames, the boundary
/// normal and the force.
model::NodeInputs window_inputs(const data::Trajectory& traj, std::span<const Frame> history,
                                const std::vector<double>* inlet_mask = nullptr);

/// 1 for nodes inside the inlet disc, 0 elsewhere.
std::vector<double> inlet_mask(const data::Trajectory& traj, const sim::Inlet& inlet);

struct StepContext {
  const data::Trajectory& traj;
  const geom::Graph2D& graph;
  const model::NodeInputs& inputs;
  std::size_t target_index;  ///< frame being predicted; oracles may look it up
};
using Predictor = std::function<Frame(const StepContext&)>;

template <class T>
Predictor model_predictor(const model::Model<T>& m);
/// Returns the true target frame.
Predictor oracle_predictor();
/// Repeats the most recent input frame.
Predictor identity_predictor();

/// Mean SMSE over target frames 3..T-1 (0-based) with true three-frame histories.
/// Throws InvalidArgument when T < 4.
double one_step_error(const Predictor& p, const data::Trajectory& traj,
                      const std::vector<double>* inlet_mask = nullptr);

struct RolloutResult {
  std::vector<Frame> frames;          ///< predicted frames 3 .. 3 + horizon - 1
  std::vector<double> step_errors;    ///< SMSE at each horizon step
  double mean_error = 0.0;            ///< average of step_errors
};

/// Seeds with true frames 0..2 and feeds predictions back. Throws InvalidArgument
/// when horizon is outside [1, T - 3].
RolloutResult rollout(const Predictor& p, const data::Trajectory& traj, int horizon,
                      const std::vector<double>* inlet_mask = nullptr);

struct MetricReport {
  double one_step_smse = 0.0;
  std::vector<double> rollout_smse;  ///< mean error for horizons 1..H
  std::optional<double> accuracy;
  std::optional<double> nll;
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  long skipped = 0;  ///< updates dropped because of non-finite gradients
  std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update. A non-finite gradient skips the update, bumps
/// `skipped` and returns false. Throws ShapeMismatch.
template <class T>
bool adam_step(engine::ParamSet<T>& params, const std::vector<std::vector<T>>& grads, AdamState& state,
               double lr);

/// lr0 * 0.5 * (1 + cos(pi * step / total)). Throws InvalidArgument outside [0, total].
double cosine_lr(long step, long total, double lr0);

/// Scales `grads` in place so their global norm is at most `max_norm`; returns the norm before.
template <class T>
double clip_grad_norm(std::vector<std::vector<T>>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// 99th percentile of edge lengths over the given graphs.
double suggest_cutoff(std::span<const geom::Graph2D> graphs);

struct SurrogateData {
  std::vector<data::Trajectory> trajectories;
  std::vector<std::vector<double>> inlet_masks;  ///< empty, or one per trajectory
};

SurrogateData surrogate_data(const data::Manifest& m);

struct TrainResult {
  model::ModelConfig config;
  engine::ParamSet<double> params;  ///< best checkpoint
  MetricReport report;              ///< validation metrics of the best checkpoint
  int best_epoch = 0;
  std::string csv;                  ///< per-epoch metrics
  long skipped_steps = 0;
  std::vector<std::size_t> val_indices;
};

inline constexpr const char* kCsvHeader = "epoch,split,loss,one_step,accuracy,nll,lr";

/// Trains on random three-frame windows; the best-validation parameters are returned.
/// Throws TrainingDiverged on a non-finite loss.
TrainResult train_surrogate(const model::ModelConfig& cfg, const SurrogateData& data, const TrainConfig& tc);

/// The classifier configuration: relative embedding, 7 logits, no vector output.
model::ModelConfig tetris_model_config(model::ConvKind kind, int hidden_scalar, int hidden_rot,
                                       std::uint64_t seed);

struct TetrisEval {
  double accuracy = 0.0;
  double nll = 0.0;
};

/// Sum-pooled logits for one sample.
template <class T>
std::vector<double> tetris_logits(const model::Model<T>& m, const data::TetrisSample& s);

template <class T>
TetrisEval evaluate_tetris(const model::Model<T>& m, std::span<const data::TetrisSample> samples);

/// Cross-entropy training on `train`; reports accuracy and nll on `test` with the
/// final parameters.
TrainResult train_tetris(const model::ModelConfig& cfg, std::span<const data::TetrisSample> train,
                         std::span<const data::TetrisSample> test, const TrainConfig& tc);

}  // namespace se2gnn::train
