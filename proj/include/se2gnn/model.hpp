#pragma once

// SE(2) graph network: embedding, K blocks of (norm, message passing, norm,
// feed-forward) with residuals, and separate scalar and rotational heads.
// The invariant variants use the same layout with every rotational width set
// to zero; raw vectors then enter as plain scalar channels.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "se2gnn/engine.hpp"
#include "se2gnn/geom.hpp"
#include "se2gnn/layers.hpp"

namespace se2gnn::model {

using engine::Array;

enum class ConvKind { kSe2Mlp, kSe2Trans, kInvMlp, kInvTrans };
enum class EmbeddingKind { kNode, kRelative };

std::string to_string(ConvKind k);
ConvKind conv_kind_from_string(const std::string& s);
std::string to_string(EmbeddingKind k);
EmbeddingKind embedding_kind_from_string(const std::string& s);

struct ModelConfig {
  int n_layers = 7;
  int hidden_scalar = 64;
  int hidden_rot = 64;  ///< vectors per node; ignored by invariant kinds
  ConvKind conv_kind = ConvKind::kSe2Trans;
  int n_base = 8;
  double cutoff = 1.0;
  int in_scalar = 3;  ///< raw scalar channels per node
  int in_rot = 5;     ///< raw 2-vectors per node
  int out_scalar_dim = 1;
  int out_rot_dim = 1;
  EmbeddingKind embedding = EmbeddingKind::kNode;
  std::uint64_t seed = 0;

  bool equivariant() const { return conv_kind == ConvKind::kSe2Mlp || conv_kind == ConvKind::kSe2Trans; }
  /// Throws InvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Closed-form parameter count of the model `build(cfg)` produces.
std::size_t parameter_count(const ModelConfig& cfg);

/// Scalar width for the invariant counterpart whose parameter count is closest to `cfg`'s.
int matched_invariant_width(const ModelConfig& cfg, ConvKind invariant_kind);

/// Raw per-node inputs: scalar N x in_scalar, rot N x (2 in_rot) interleaved.
struct NodeInputs {
  Array<double> scalar;
  Array<double> rot;
  std::size_t n_nodes() const { return scalar.rows(); }
};

struct Prediction {
  Array<double> scalar;  ///< N x out_scalar_dim
  Array<double> rot;     ///< N x out_rot_dim x 2
};

template <class T>
class Model {
 public:
  struct Output {
    engine::Tensor<T> scalar;  ///< N x out_scalar_dim
    engine::Tensor<T> rot;     ///< N x 2 out_rot_dim
  };

  static Model build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  engine::ParamSet<T>& params() { return params_; }
  const engine::ParamSet<T>& params() const { return params_; }

  Output forward(engine::Session<T>& s, const geom::Graph2D& graph, const NodeInputs& in) const;
  /// Gradient-free forward returning plain arrays.
  Prediction predict(const geom::Graph2D& graph, const NodeInputs& in) const;

  /// Copies values by parameter name; throws ArtifactMismatch on missing names or shapes.
  template <class U>
  void load_values(const engine::ParamSet<U>& src);

  template <class U>
  Model<U> cast() const {
    Model<U> m = Model<U>::build(cfg_);
    m.load_values(params_);
    return m;
  }

 private:
  ModelConfig cfg_;
  engine::ParamSet<T> params_;
  std::size_t scalar_ = 0, rot_ = 0;
  layers::EmbedWeights embed_;
  layers::So2MlpWeights embed_rel_;
  struct Block {
    layers::LayerNormParams ln1, ln2;
    layers::ConvWeights conv;
    layers::So2MlpWeights ff;
  };
  std::vector<Block> blocks_;
  layers::Mlp head_scalar_, head_rot_;
};

struct EquivarianceStats {
  double mean = 0.0;
  double max = 0.0;
};

/// Samples beta ~ U(0, 2 pi) and a translation per trial and compares g.f(x) with f(g.x)
/// on both heads: max |difference| / max(max |reference|, 1e-12).
template <class T>
EquivarianceStats equivariance_error(const Model<T>& model, const geom::Graph2D& graph,
                                     const NodeInputs& in, int trials, std::uint64_t seed);

enum class ActivationKind { kSe2, kFourier };

/// Random features on random node positions, pushed through one nonlinearity.
struct ActivationProbe {
  ActivationKind kind = ActivationKind::kSe2;
  int n_samples = 8;           ///< Fourier only
  bool scalar_offset = false;  ///< Fourier only: pair each vector with a scalar channel
  int n_nodes = 64;
  int n_scalar = 16;
  int n_rot = 16;
};

/// Same statistic as `equivariance_error`, for a single LeakyReLU nonlinearity.
template <class T>
EquivarianceStats activation_equivariance_error(const ActivationProbe& probe, int trials,
                                                std::uint64_t seed);

/// Rotates every vector of a flattened N x 2R array.
Array<double> rotate_vectors(const Array<double>& rot, geom::Rot2 r);

// ---------------------------------------------------------------------------
// Checkpoints: "SE2CKPT1", u32 header length, JSON header, u32 count, then per
// parameter u32 name length, name, u32 rank, u32 dims[rank], f32 values.
// ---------------------------------------------------------------------------

struct Checkpoint {
  nlohmann::json header;
  engine::ParamSet<double> params;
  std::string kind() const { return header.value("kind", std::string("model")); }
  ModelConfig config() const;
};

/// `extra` is merged into the header; its "kind" is kept when present.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const nlohmann::json& extra = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header,
                     const engine::ParamSet<double>& params);
/// Throws CorruptFile on bad magic, truncation or malformed header.
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace se2gnn::model
