#include "se2gnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "binio.hpp"
#include "se2gnn/errors.hpp"

namespace se2gnn::model {

namespace eng = se2gnn::engine;
using nlohmann::json;

std::string to_string(ConvKind k) {
  switch (k) {
    case ConvKind::kSe2Mlp: return "se2-mlp";
    case ConvKind::kSe2Trans: return "se2-trans";
    case ConvKind::kInvMlp: return "inv-mlp";
    case ConvKind::kInvTrans: return "inv-trans";
  }
  return "?";
}

ConvKind conv_kind_from_string(const std::string& s) {
  for (ConvKind k : {ConvKind::kSe2Mlp, ConvKind::kSe2Trans, ConvKind::kInvMlp, ConvKind::kInvTrans}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidConfig("unknown conv_kind '" + s + "' (se2-mlp, se2-trans, inv-mlp, inv-trans)");
}

std::string to_string(EmbeddingKind k) { return k == EmbeddingKind::kNode ? "node" : "relative"; }

EmbeddingKind embedding_kind_from_string(const std::string& s) {
  if (s == "node") return EmbeddingKind::kNode;
  if (s == "relative") return EmbeddingKind::kRelative;
  throw InvalidConfig("unknown embedding '" + s + "' (node, relative)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (hidden_scalar < 1) fail("hidden_scalar must be >= 1");
  if (hidden_rot < 0) fail("hidden_rot must be >= 0");
  if (n_base < 1) fail("n_base must be >= 1");
  if (!(cutoff > 0.0) || !std::isfinite(cutoff)) fail("cutoff must be positive");
  if (in_scalar < 0 || in_rot < 0) fail("input dims must be >= 0");
  if (out_scalar_dim < 0 || out_rot_dim < 0) fail("output dims must be >= 0");
  if (out_scalar_dim + out_rot_dim == 0) fail("model has no outputs");
  if (embedding == EmbeddingKind::kNode && in_scalar + in_rot == 0) fail("node embedding without inputs");
}

json ModelConfig::to_json() const {
  return json{{"n_layers", n_layers},
              {"hidden_scalar", hidden_scalar},
              {"hidden_rot", hidden_rot},
              {"conv_kind", to_string(conv_kind)},
              {"n_base", n_base},
              {"cutoff", cutoff},
              {"in_scalar", in_scalar},
              {"in_rot", in_rot},
              {"out_scalar_dim", out_scalar_dim},
              {"out_rot_dim", out_rot_dim},
              {"embedding", to_string(embedding)},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw InvalidConfig("model config must be a JSON object");
  ModelConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n_layers") c.n_layers = v.get<int>();
      else if (key == "hidden_scalar") c.hidden_scalar = v.get<int>();
      else if (key == "hidden_rot") c.hidden_rot = v.get<int>();
      else if (key == "conv_kind") c.conv_kind = conv_kind_from_string(v.get<std::string>());
      else if (key == "n_base") c.n_base = v.get<int>();
      else if (key == "cutoff") c.cutoff = v.get<double>();
      else if (key == "in_scalar") c.in_scalar = v.get<int>();
      else if (key == "in_rot") c.in_rot = v.get<int>();
      else if (key == "out_scalar_dim") c.out_scalar_dim = v.get<int>();
      else if (key == "out_rot_dim") c.out_rot_dim = v.get<int>();
      else if (key == "embedding") c.embedding = embedding_kind_from_string(v.get<std::string>());
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "schema_version") {
        if (v.get<int>() != 1) throw InvalidConfig("model config: unsupported schema_version");
      } else {
        throw InvalidConfig("model config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct Dims {
  std::size_t s, r, w, in_s, out_s;
  bool eq;
};

Dims dims_of(const ModelConfig& c) {
  Dims d;
  d.eq = c.equivariant();
  d.s = static_cast<std::size_t>(c.hidden_scalar);
  d.r = d.eq ? static_cast<std::size_t>(c.hidden_rot) : 0;
  d.w = d.s + 2 * d.r;
  d.in_s = static_cast<std::size_t>(c.in_scalar + (d.eq ? 0 : 2 * c.in_rot));
  d.out_s = static_cast<std::size_t>(c.out_scalar_dim + (d.eq ? 0 : 2 * c.out_rot_dim));
  return d;
}

std::size_t mlp_count(std::initializer_list<std::size_t> dims) {
  std::size_t n = 0;
  for (auto it = dims.begin(); it + 1 != dims.end(); ++it) n += (*it + 1) * *(it + 1);
  return n;
}

bool is_trans(ConvKind k) { return k == ConvKind::kSe2Trans || k == ConvKind::kInvTrans; }

}  // namespace

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const Dims d = dims_of(cfg);
  const std::size_t nb = static_cast<std::size_t>(cfg.n_base);
  std::size_t n = 0;
  if (cfg.embedding == EmbeddingKind::kNode) {
    n += mlp_count({d.in_s, 3 * d.s, d.s});
    if (d.eq && d.r > 0) n += mlp_count({2 * static_cast<std::size_t>(cfg.in_rot), 6 * d.r, 2 * d.r});
  } else {
    n += mlp_count({2, 3 * d.w, d.s + 2 * d.r});
  }
  const std::size_t m = 2 * d.w + nb + (d.eq ? 0 : 2);
  std::size_t block = 2 * (d.s + d.r);
  if (is_trans(cfg.conv_kind)) {
    const std::size_t z = 3 * d.w;
    block += (m + 1) * z + 2 * z + (z + 1) + (z + 1) * d.w;
  } else {
    block += mlp_count({m, 3 * d.w, d.w});
  }
  block += mlp_count({d.w, 3 * d.w, 3 * d.w, d.w});
  n += block * static_cast<std::size_t>(cfg.n_layers);
  if (d.out_s > 0) n += mlp_count({d.w, d.w, d.out_s});
  if (d.eq && cfg.out_rot_dim > 0) n += mlp_count({d.w, d.w, 2 * static_cast<std::size_t>(cfg.out_rot_dim)});
  return n;
}

int matched_invariant_width(const ModelConfig& cfg, ConvKind invariant_kind) {
  const auto target = static_cast<double>(parameter_count(cfg));
  ModelConfig inv = cfg;
  inv.conv_kind = invariant_kind;
  if (inv.equivariant()) throw InvalidConfig("matched_invariant_width: kind must be invariant");
  int best = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int s = 1; s <= 8192; ++s) {
    inv.hidden_scalar = s;
    const double gap = std::fabs(static_cast<double>(parameter_count(inv)) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = s;
    } else if (static_cast<double>(parameter_count(inv)) > target) {
      break;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
Model<T> Model<T>::build(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  const Dims d = dims_of(cfg);
  m.scalar_ = d.s;
  m.rot_ = d.r;
  const std::size_t nb = static_cast<std::size_t>(cfg.n_base);
  layers::ParamFactory<T> f(m.params_, cfg.seed);

  if (cfg.embedding == EmbeddingKind::kNode) {
    m.embed_.scalar = layers::make_mlp(f, "embed.scalar", {d.in_s, 3 * d.s, d.s});
    m.embed_.rotational = d.eq && d.r > 0;
    if (m.embed_.rotational) {
      m.embed_.rot = layers::make_so2_mlp(f, "embed.rot", 0, static_cast<std::size_t>(cfg.in_rot),
                                          {6 * d.r}, 0, 2 * d.r);
    }
  } else {
    m.embed_rel_ = d.eq ? layers::make_so2_mlp(f, "embed.rel", 0, 1, {3 * d.w}, d.s, 2 * d.r)
                        : layers::make_so2_mlp(f, "embed.rel", 2, 0, {3 * d.w}, d.s, 0);
  }
  const layers::ConvKind ck = is_trans(cfg.conv_kind) ? layers::ConvKind::kTrans : layers::ConvKind::kMlp;
  for (int k = 0; k < cfg.n_layers; ++k) {
    const std::string p = "block" + std::to_string(k);
    Block b;
    b.ln1 = layers::make_layer_norm(f, p + ".ln1", d.s, d.r);
    b.conv = layers::make_conv(f, p + ".conv", ck, d.s, d.r, nb, !d.eq);
    b.ln2 = layers::make_layer_norm(f, p + ".ln2", d.s, d.r);
    b.ff = layers::make_so2_mlp(f, p + ".ff", d.s, d.r, {3 * d.w, 3 * d.w}, d.s, 2 * d.r);
    m.blocks_.push_back(b);
  }
  if (d.out_s > 0) m.head_scalar_ = layers::make_mlp(f, "head.scalar", {d.w, d.w, d.out_s});
  if (d.eq && cfg.out_rot_dim > 0) {
    m.head_rot_ = layers::make_mlp(f, "head.rot", {d.w, d.w, 2 * static_cast<std::size_t>(cfg.out_rot_dim)});
  }
  return m;
}

namespace {

template <class T>
std::vector<T> cast_vec(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace

template <class T>
typename Model<T>::Output Model<T>::forward(eng::Session<T>& s, const geom::Graph2D& graph,
                                            const NodeInputs& in) const {
  const std::size_t n = graph.num_nodes();
  const Dims d = dims_of(cfg_);
  const auto ctx = layers::make_context<T>(graph, {cfg_.n_base, cfg_.cutoff});
  layers::FeaturePair<T> x;
  if (cfg_.embedding == EmbeddingKind::kRelative) {
    x = layers::embed_relative(s, ctx, embed_rel_, d.eq);
  } else {
    const auto in_s = static_cast<std::size_t>(cfg_.in_scalar);
    const auto in_r = static_cast<std::size_t>(cfg_.in_rot);
    if (in.scalar.rows() != n || in.scalar.cols() != in_s || in.rot.rows() != n ||
        in.rot.cols() != 2 * in_r) {
      throw ShapeMismatch("model forward: inputs " + eng::to_string(in.scalar.shape) + " / " +
                          eng::to_string(in.rot.shape) + " for " + std::to_string(n) +
                          " nodes with " + std::to_string(in_s) + " scalars and " +
                          std::to_string(in_r) + " vectors");
    }
    const eng::Tensor<T> rot = s.constant({n, 2 * in_r}, cast_vec<T>(in.rot.data));
    eng::Tensor<T> scal = s.constant({n, in_s}, cast_vec<T>(in.scalar.data));
    // Invariant models see the raw vectors as plain scalar channels.
    if (!d.eq) scal = eng::concat<T>({scal, rot});
    x = layers::embed_nodes(s, scal, rot, ctx, embed_);
  }
  for (const Block& b : blocks_) {
    const auto c = layers::message_passing(s, layers::separable_layer_norm(s, x, b.ln1), ctx, b.conv);
    x = {eng::add(x.scalar, c.scalar), eng::add(x.rot, c.rot)};
    x = layers::feed_forward(s, x, ctx.node_rot, b.ff, &b.ln2);
  }
  Output out;
  const auto out_s = static_cast<std::size_t>(cfg_.out_scalar_dim);
  const auto out_r = static_cast<std::size_t>(cfg_.out_rot_dim);
  const eng::Tensor<T> hs = d.out_s > 0 ? layers::output_scalar(s, x, ctx.node_rot, head_scalar_)
                                        : s.constant({n, 0}, {});
  if (d.eq) {
    out.scalar = hs;
    out.rot = out_r > 0 ? layers::output_rot(s, x, ctx.node_rot, head_rot_) : s.constant({n, 0}, {});
  } else {
    out.scalar = eng::slice_cols(hs, 0, out_s);
    out.rot = eng::slice_cols(hs, out_s, out_s + 2 * out_r);
  }
  return out;
}

template <class T>
Prediction Model<T>::predict(const geom::Graph2D& graph, const NodeInputs& in) const {
  eng::Session<T> s(params_, false);
  const Output o = forward(s, graph, in);
  Prediction p;
  const std::size_t n = graph.num_nodes();
  p.scalar.shape = {n, static_cast<std::size_t>(cfg_.out_scalar_dim)};
  p.scalar.data.assign(o.scalar.value().begin(), o.scalar.value().end());
  p.rot.shape = {n, static_cast<std::size_t>(cfg_.out_rot_dim), 2};
  p.rot.data.assign(o.rot.value().begin(), o.rot.value().end());
  return p;
}

template <class T>
template <class U>
void Model<T>::load_values(const eng::ParamSet<U>& src) {
  if (src.size() != params_.size()) {
    throw ArtifactMismatch("parameter count mismatch: checkpoint has " + std::to_string(src.size()) +
                           " arrays, model expects " + std::to_string(params_.size()));
  }
  for (auto& e : params_) {
    const std::size_t k = src.find(e.name);
    if (k == src.size()) throw ArtifactMismatch("checkpoint lacks parameter " + e.name);
    const auto& o = src[k];
    if (o.shape != e.shape) {
      throw ArtifactMismatch("parameter " + e.name + " has shape " + eng::to_string(o.shape) +
                             ", model expects " + eng::to_string(e.shape));
    }
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] = static_cast<T>(o.value[i]);
  }
}

Array<double> rotate_vectors(const Array<double>& rot, geom::Rot2 r) {
  Array<double> out = rot;
  for (std::size_t k = 0; k + 1 < out.data.size(); k += 2) {
    const geom::Vec2 v = r.apply({rot.data[k], rot.data[k + 1]});
    out.data[k] = v.x;
    out.data[k + 1] = v.y;
  }
  return out;
}

template <class T>
EquivarianceStats equivariance_error(const Model<T>& model, const geom::Graph2D& graph,
                                     const NodeInputs& in, int trials, std::uint64_t seed) {
  if (trials < 1) throw InvalidArgument("equivariance_error: trials must be >= 1");
  const Prediction ref = model.predict(graph, in);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> shift(-10.0, 10.0);
  EquivarianceStats st;
  for (int t = 0; t < trials; ++t) {
    const geom::Rot2 g = geom::rotation_matrix(angle(rng));
    const geom::Vec2 tr{shift(rng), shift(rng)};
    NodeInputs moved{in.scalar, rotate_vectors(in.rot, g)};
    const Prediction got = model.predict(graph.transformed(g, tr), moved);
    const Array<double> want_rot = rotate_vectors(ref.rot, g);
    double diff = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < ref.scalar.data.size(); ++k) {
      diff = std::max(diff, std::fabs(got.scalar.data[k] - ref.scalar.data[k]));
      scale = std::max(scale, std::fabs(ref.scalar.data[k]));
    }
    for (std::size_t k = 0; k < want_rot.data.size(); ++k) {
      diff = std::max(diff, std::fabs(got.rot.data[k] - want_rot.data[k]));
      scale = std::max(scale, std::fabs(want_rot.data[k]));
    }
    const double err = diff / std::max(scale, 1e-12);
    st.mean += err / trials;
    st.max = std::max(st.max, err);
  }
  return st;
}

template <class T>
EquivarianceStats activation_equivariance_error(const ActivationProbe& probe, int trials,
                                                std::uint64_t seed) {
  if (trials < 1) throw InvalidArgument("activation_equivariance_error: trials must be >= 1");
  if (probe.n_nodes < 1 || probe.n_scalar < 0 || probe.n_rot < 1) {
    throw InvalidArgument("activation_equivariance_error: bad probe sizes");
  }
  const auto n = static_cast<std::size_t>(probe.n_nodes);
  const auto cs = static_cast<std::size_t>(probe.n_scalar);
  const auto cr = static_cast<std::size_t>(probe.n_rot);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-5.0, 5.0);
  std::normal_distribution<double> feat(0.0, 1.0);
  std::vector<geom::Vec2> points(n);
  for (auto& p : points) p = {pos(rng), pos(rng)};
  points = geom::center_of_mass_zero(points);
  Array<double> scalar = Array<double>::zeros({n, cs});
  Array<double> rot = Array<double>::zeros({n, 2 * cr});
  for (auto& x : scalar.data) x = feat(rng);
  for (auto& x : rot.data) x = feat(rng);

  const layers::Pointwise<T> fn = layers::leaky_relu_fn<T>();
  auto run = [&](const std::vector<geom::Vec2>& pts, const Array<double>& r) {
    eng::Tape<T> tape(false);
    layers::FeaturePair<T> x{tape.constant({n, cs}, cast_vec<T>(scalar.data)),
                             tape.constant({n, 2 * cr}, cast_vec<T>(r.data))};
    layers::FeaturePair<T> y;
    if (probe.kind == ActivationKind::kSe2) {
      const auto angles = geom::global_angles(pts);
      y = layers::se2_activation(x, layers::Rotations<T>::from_angles(angles), fn);
    } else {
      y = layers::fourier_pointwise_nonlin(x, probe.n_samples, fn, probe.scalar_offset);
    }
    return std::pair<std::vector<double>, Array<double>>{
        std::vector<double>(y.scalar.value().begin(), y.scalar.value().end()),
        Array<double>{{n, 2 * cr}, std::vector<double>(y.rot.value().begin(), y.rot.value().end())}};
  };
  const auto ref = run(points, rot);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  EquivarianceStats st;
  for (int t = 0; t < trials; ++t) {
    const geom::Rot2 g = geom::rotation_matrix(angle(rng));
    const auto got = run(geom::transform_points(points, g, {}), rotate_vectors(rot, g));
    const Array<double> want = rotate_vectors(ref.second, g);
    double diff = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < ref.first.size(); ++k) {
      diff = std::max(diff, std::fabs(got.first[k] - ref.first[k]));
      scale = std::max(scale, std::fabs(ref.first[k]));
    }
    for (std::size_t k = 0; k < want.data.size(); ++k) {
      diff = std::max(diff, std::fabs(got.second.data[k] - want.data[k]));
      scale = std::max(scale, std::fabs(want.data[k]));
    }
    const double err = diff / std::max(scale, 1e-12);
    st.mean += err / trials;
    st.max = std::max(st.max, err);
  }
  return st;
}

template EquivarianceStats activation_equivariance_error<float>(const ActivationProbe&, int, std::uint64_t);
template EquivarianceStats activation_equivariance_error<double>(const ActivationProbe&, int, std::uint64_t);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'S', 'E', '2', 'C', 'K', 'P', 'T', '1'};
}

ModelConfig Checkpoint::config() const {
  if (!header.contains("config")) throw ArtifactMismatch("checkpoint header has no model config");
  return ModelConfig::from_json(header.at("config"));
}

void save_checkpoint(const std::filesystem::path& path, const json& header,
                     const eng::ParamSet<double>& params) {
  binio::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  const std::string h = header.dump();
  w.u32(static_cast<std::uint32_t>(h.size()));
  w.str(h);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.value) w.f32(static_cast<float>(v));
  }
  w.save(path);
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const json& extra) {
  json header = extra.is_object() ? extra : json::object();
  header["schema_version"] = 1;
  if (!header.contains("kind")) header["kind"] = "model";
  header["config"] = model.config().to_json();
  eng::ParamSet<double> p;
  for (const auto& e : model.params()) p.add(e.name, e.shape, std::vector<double>(e.value.begin(), e.value.end()));
  save_checkpoint(path, header, p);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic)) throw CorruptFile(path.string() + ": not a checkpoint (bad magic)");
  Checkpoint c;
  const std::uint32_t hlen = r.u32();
  try {
    c.header = json::parse(r.str(hlen));
  } catch (const json::parse_error& e) {
    throw CorruptFile(path.string() + ": malformed header: " + e.what());
  }
  if (!c.header.is_object()) throw CorruptFile(path.string() + ": header is not an object");
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CorruptFile(path.string() + ": implausible rank for " + name);
    eng::Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = eng::numel(shape);
    r.check(4 * n);
    std::vector<double> v(n);
    for (double& x : v) x = r.f32();
    try {
      c.params.add(name, shape, std::move(v));
    } catch (const Error& e) {
      throw CorruptFile(path.string() + ": " + e.what());
    }
  }
  if (!r.at_end()) throw CorruptFile(path.string() + ": trailing bytes");
  return c;
}

template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind() != "model") throw ArtifactMismatch("checkpoint kind '" + ckpt.kind() + "' holds no model");
  ModelConfig cfg;
  try {
    cfg = ckpt.config();
  } catch (const InvalidConfig& e) {
    throw ArtifactMismatch(std::string("checkpoint config: ") + e.what());
  }
  Model<T> m = Model<T>::build(cfg);
  m.load_values(ckpt.params);
  return m;
}

template class Model<float>;
template class Model<double>;
template void Model<float>::load_values(const eng::ParamSet<float>&);
template void Model<float>::load_values(const eng::ParamSet<double>&);
template void Model<double>::load_values(const eng::ParamSet<float>&);
template void Model<double>::load_values(const eng::ParamSet<double>&);
template EquivarianceStats equivariance_error(const Model<float>&, const geom::Graph2D&,
                                              const NodeInputs&, int, std::uint64_t);
template EquivarianceStats equivariance_error(const Model<double>&, const geom::Graph2D&,
                                              const NodeInputs&, int, std::uint64_t);
template void save_checkpoint(const std::filesystem::path&, const Model<float>&, const json&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&, const json&);
template Model<float> model_from_checkpoint(const Checkpoint&);
template Model<double> model_from_checkpoint(const Checkpoint&);

}  // namespace se2gnn::model
