#pragma once

// Equivariant building blocks over (scalar, rotational) feature pairs.
//
// Rotational features are stored as N x (2 Nr) with interleaved (x, y) pairs.
// Every layer that is not equivariant by construction works by rotating the
// vectors into a local frame, applying an unconstrained map, and rotating back.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "se2gnn/engine.hpp"
#include "se2gnn/geom.hpp"

namespace se2gnn::layers {

using engine::ParamId;
using engine::ParamSet;
using engine::Session;
using engine::Tape;
using engine::Tensor;

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

/// Number of rotate() calls that touched at least one vector, process wide.
std::uint64_t rotation_count();
void reset_rotation_count();

/// Per-row rotation angles, kept as (cos, sin).
template <class T>
struct Rotations {
  std::vector<T> cos;
  std::vector<T> sin;

  static Rotations from_angles(std::span<const double> theta);
  std::size_t size() const { return cos.size(); }
  Rotations inverse() const;
  Rotations gather(std::span<const std::uint32_t> index) const;
};

/// Applies R to every (x, y) pair of row r. Zero-width inputs pass through uncounted.
template <class T>
Tensor<T> rotate(const Tensor<T>& rot, const Rotations<T>& r);

template <class T>
struct FeaturePair {
  Tensor<T> scalar;  ///< N x Cs
  Tensor<T> rot;     ///< N x 2Nr, interleaved
  std::size_t n_nodes() const { return scalar.rows(); }
  std::size_t n_scalar() const { return scalar.cols(); }
  std::size_t n_rot() const { return rot.cols() / 2; }
};

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

/// Creates named parameters. Weights are uniform in +-sqrt(1/fan_in), biases zero.
/// Values are drawn in double so float and double models start identical.
template <class T>
class ParamFactory {
 public:
  ParamFactory(ParamSet<T>& set, std::uint64_t seed) : set_(&set), rng_(seed) {}
  ParamId dense(const std::string& name, std::size_t in, std::size_t out);
  ParamId filled(const std::string& name, engine::Shape shape, double value);
  ParamSet<T>& set() { return *set_; }

 private:
  ParamSet<T>* set_;
  std::mt19937_64 rng_;
};

/// Dense stack with LeakyReLU between layers (none after the last).
struct Mlp {
  std::vector<ParamId> weight;
  std::vector<ParamId> bias;
  std::vector<std::size_t> dims;
  std::size_t in() const { return dims.front(); }
  std::size_t out() const { return dims.back(); }
};

template <class T>
Mlp make_mlp(ParamFactory<T>& f, const std::string& name, std::vector<std::size_t> dims);

template <class T>
Tensor<T> linear(Session<T>& s, ParamId w, ParamId b, const Tensor<T>& x);

template <class T>
Tensor<T> apply_mlp(Session<T>& s, const Mlp& mlp, Tensor<T> x);

// ---------------------------------------------------------------------------
// SO2-MLP
// ---------------------------------------------------------------------------

struct So2MlpWeights {
  Mlp mlp;
  std::size_t in_scalar = 0;
  std::size_t in_rot = 0;  ///< vectors
  std::size_t out_scalar = 0;
  std::size_t out_rot = 0;  ///< vectors
};

/// `out_rot_width` counts components and must be even.
template <class T>
So2MlpWeights make_so2_mlp(ParamFactory<T>& f, const std::string& name, std::size_t in_scalar,
                           std::size_t in_rot, std::vector<std::size_t> hidden,
                           std::size_t out_scalar, std::size_t out_rot_width);

/// Rotate by R_alpha, MLP on [scalar, rot], rotate the rotational output back.
template <class T>
FeaturePair<T> so2_mlp(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                       const So2MlpWeights& w);

// ---------------------------------------------------------------------------
// Message passing
// ---------------------------------------------------------------------------

/// Per-edge and per-node geometry consumed by the message-passing layers.
/// Edge k carries a message from src[k] (j) into dst[k] (i).
template <class T>
struct MessageContext {
  std::size_t n_nodes = 0;
  std::size_t n_base = 0;
  std::vector<std::uint32_t> src;
  std::vector<std::uint32_t> dst;
  std::vector<T> basis;    ///< E x n_base
  std::vector<T> rel_vec;  ///< E x 2, r_j - r_i
  std::vector<double> theta;
  Rotations<T> edge_rot;  ///< R_theta per edge
  Rotations<T> node_rot;  ///< R_alpha per node

  std::size_t n_edges() const { return src.size(); }
};

template <class T>
MessageContext<T> make_context(const geom::Graph2D& graph, const geom::RadialBasisConfig& basis);

enum class ConvKind { kMlp, kTrans };

struct ConvWeights {
  ConvKind kind = ConvKind::kMlp;
  std::size_t scalar = 0;
  std::size_t rot = 0;
  std::size_t n_base = 0;
  bool with_rel_vec = false;  ///< raw edge vector as two extra scalars (invariant models)
  Mlp message;                ///< f^m for the MLP kind
  std::size_t d = 0;          ///< width of z for the attention kind
  ParamId z_w, z_b, ln_g, ln_b, att_w, att_b, msg_w, msg_b;
};

template <class T>
ConvWeights make_conv(ParamFactory<T>& f, const std::string& name, ConvKind kind,
                      std::size_t scalar, std::size_t rot, std::size_t n_base,
                      bool with_rel_vec);

/// Aligned edge input [x~_i, x~_j, b_ij, (rel_vec), R_theta x^_i, R_theta x^_j].
template <class T>
Tensor<T> edge_inputs(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                      bool with_rel_vec);

template <class T>
FeaturePair<T> se2conv_mlp(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                           const ConvWeights& w);

template <class T>
FeaturePair<T> se2conv_trans(Session<T>& s, const FeaturePair<T>& x,
                             const MessageContext<T>& ctx, const ConvWeights& w);

/// Dispatches on w.kind.
template <class T>
FeaturePair<T> message_passing(Session<T>& s, const FeaturePair<T>& x,
                               const MessageContext<T>& ctx, const ConvWeights& w);

/// Attention coefficients of se2conv_trans (E x 1), exposed for inspection.
template <class T>
Tensor<T> attention_weights(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                            const ConvWeights& w);

// ---------------------------------------------------------------------------
// Normalization, feed-forward, embeddings and heads
// ---------------------------------------------------------------------------

struct LayerNormParams {
  ParamId gamma_s;
  ParamId gamma_r;
  std::size_t scalar = 0;
  std::size_t rot = 0;
};

template <class T>
LayerNormParams make_layer_norm(ParamFactory<T>& f, const std::string& name, std::size_t scalar,
                                std::size_t rot);

/// Scalars: gamma_s (x - mu) / sqrt(var + eps). Vectors: gamma_r / sqrt(mean(x^2) + eps), no centering.
template <class T>
FeaturePair<T> separable_layer_norm(Session<T>& s, const FeaturePair<T>& x,
                                    const LayerNormParams& p);

/// x + so2_mlp(norm(x)); the norm is skipped when `pre_norm` is null.
template <class T>
FeaturePair<T> feed_forward(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                            const So2MlpWeights& w, const LayerNormParams* pre_norm = nullptr);

struct EmbedWeights {
  Mlp scalar;
  So2MlpWeights rot;
  bool rotational = true;
};

/// x~ = MLP(x~0), x^ = SO2-MLP(x^0, alpha). Raw inputs are N x C0 and N x 2R0.
template <class T>
FeaturePair<T> embed_nodes(Session<T>& s, const Tensor<T>& raw_scalar, const Tensor<T>& raw_rot,
                           const MessageContext<T>& ctx, const EmbedWeights& w);

/// Node features from relative edge vectors: sum over in-edges of SO2-MLP(r_ij) aligned by theta_ij.
/// With a purely scalar MLP (rot output 0 and no rotational input) the raw vector enters as scalars.
template <class T>
FeaturePair<T> embed_relative(Session<T>& s, const MessageContext<T>& ctx,
                              const So2MlpWeights& w, bool rotational);

/// Builds the context and the node embedding in one go.
template <class T>
std::pair<FeaturePair<T>, MessageContext<T>> embed_inputs(
    Session<T>& s, const geom::Graph2D& graph, const Tensor<T>& raw_scalar,
    const Tensor<T>& raw_rot, const geom::RadialBasisConfig& basis, const EmbedWeights& w);

/// MLP(x~ (+) R_alpha x^) -> N x C_out, rotation invariant.
template <class T>
Tensor<T> output_scalar(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                        const Mlp& w);

/// R_-alpha MLP(x~ (+) R_alpha x^) -> N x 2 N_out. The MLP output width must be even.
template <class T>
Tensor<T> output_rot(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                     const Mlp& w);

// ---------------------------------------------------------------------------
// Comparison layers
// ---------------------------------------------------------------------------

template <class T>
using Pointwise = std::function<Tensor<T>(const Tensor<T>&)>;

template <class T>
Pointwise<T> leaky_relu_fn(double slope = kLeakySlope);

/// Rotate into the node frame, apply `fn` elementwise, rotate back.
template <class T>
FeaturePair<T> se2_activation(const FeaturePair<T>& x, const Rotations<T>& alpha,
                              const Pointwise<T>& fn);

struct LinearWeights {
  ParamId w, b;
  std::size_t out_scalar = 0;
  std::size_t out_rot = 0;
};

template <class T>
LinearWeights make_so2_linear(ParamFactory<T>& f, const std::string& name, std::size_t in_scalar,
                              std::size_t in_rot, std::size_t out_scalar, std::size_t out_rot);

/// Single linear map applied in the node frame.
template <class T>
FeaturePair<T> so2_linear(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                          const LinearWeights& w);

/// out_o = sum_j [[w1, -w2], [w2, w1]]_{oj} x_j, either with fixed (w1, w2) or with
/// (w1, w2) predicted per node from the scalar features.
struct RotmatWeights {
  std::size_t in_rot = 0;
  std::size_t out_rot = 0;
  bool conditioned = false;
  ParamId w1, w2;  ///< in_rot x out_rot each, unconditioned form
  Mlp cond;        ///< scalars -> 2 * out_rot * in_rot, conditioned form
};

template <class T>
RotmatWeights make_rotmat_linear(ParamFactory<T>& f, const std::string& name, std::size_t in_rot,
                                 std::size_t out_rot, std::size_t cond_scalar = 0);

template <class T>
Tensor<T> rotmat_linear(Session<T>& s, const Tensor<T>& rot, const Tensor<T>* scalars,
                        const RotmatWeights& w);

/// G^-1 f(G x) per 2-vector: G samples n equiangular directions d_k = 2 pi k / n on the
/// circle, G^-1 v = (2/n) sum_k v_k d_k. With `scalar_offset` a zero-frequency channel
/// is added to every sample before `fn` and read back as the sample mean.
template <class T>
Tensor<T> fourier_pointwise_nonlin(const Tensor<T>& rot, int n_samples, const Pointwise<T>& fn);

template <class T>
FeaturePair<T> fourier_pointwise_nonlin(const FeaturePair<T>& x, int n_samples,
                                        const Pointwise<T>& fn, bool scalar_offset);

}  // namespace se2gnn::layers
