#include "se2gnn/layers.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include "se2gnn/errors.hpp"

namespace se2gnn::layers {

namespace eng = se2gnn::engine;

namespace {
std::atomic<std::uint64_t> g_rotations{0};
}

std::uint64_t rotation_count() { return g_rotations.load(); }
void reset_rotation_count() { g_rotations.store(0); }

template <class T>
Rotations<T> Rotations<T>::from_angles(std::span<const double> theta) {
  Rotations r;
  r.cos.reserve(theta.size());
  r.sin.reserve(theta.size());
  for (double t : theta) {
    r.cos.push_back(static_cast<T>(std::cos(t)));
    r.sin.push_back(static_cast<T>(std::sin(t)));
  }
  return r;
}

template <class T>
Rotations<T> Rotations<T>::inverse() const {
  Rotations r{cos, sin};
  for (T& s : r.sin) s = -s;
  return r;
}

template <class T>
Rotations<T> Rotations<T>::gather(std::span<const std::uint32_t> index) const {
  Rotations r;
  r.cos.reserve(index.size());
  r.sin.reserve(index.size());
  for (std::uint32_t k : index) {
    r.cos.push_back(cos.at(k));
    r.sin.push_back(sin.at(k));
  }
  return r;
}

template <class T>
Tensor<T> rotate(const Tensor<T>& rot, const Rotations<T>& r) {
  if (rot.cols() == 0) return rot;
  g_rotations.fetch_add(1, std::memory_order_relaxed);
  return eng::rotate_pairs<T>(rot, r.cos, r.sin);
}

// ---------------------------------------------------------------------------
// Parameters and MLPs
// ---------------------------------------------------------------------------

template <class T>
ParamId ParamFactory<T>::dense(const std::string& name, std::size_t in, std::size_t out) {
  const double bound = in > 0 ? std::sqrt(1.0 / static_cast<double>(in)) : 0.0;
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(in * out);
  for (T& x : v) x = static_cast<T>(bound > 0.0 ? dist(rng_) : 0.0);
  return set_->add(name, {in, out}, std::move(v));
}

template <class T>
ParamId ParamFactory<T>::filled(const std::string& name, eng::Shape shape, double value) {
  const std::size_t n = eng::numel(shape);
  return set_->add(name, std::move(shape), std::vector<T>(n, static_cast<T>(value)));
}

template <class T>
Mlp make_mlp(ParamFactory<T>& f, const std::string& name, std::vector<std::size_t> dims) {
  if (dims.size() < 2) throw InvalidConfig("mlp " + name + ": needs at least input and output dims");
  Mlp m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::string base = name + "." + std::to_string(l);
    m.weight.push_back(f.dense(base + ".w", dims[l], dims[l + 1]));
    m.bias.push_back(f.filled(base + ".b", {1, dims[l + 1]}, 0.0));
  }
  m.dims = std::move(dims);
  return m;
}

template <class T>
Tensor<T> linear(Session<T>& s, ParamId w, ParamId b, const Tensor<T>& x) {
  return eng::add(eng::matmul(x, s.param(w)), s.param(b));
}

template <class T>
Tensor<T> apply_mlp(Session<T>& s, const Mlp& mlp, Tensor<T> x) {
  if (x.cols() != mlp.in()) {
    throw ShapeMismatch("mlp: expected " + std::to_string(mlp.in()) + " input columns, got " +
                        std::to_string(x.cols()));
  }
  for (std::size_t l = 0; l < mlp.weight.size(); ++l) {
    x = linear(s, mlp.weight[l], mlp.bias[l], x);
    if (l + 1 < mlp.weight.size()) x = eng::leaky_relu(x, static_cast<T>(kLeakySlope));
  }
  return x;
}

namespace {

template <class T>
Tensor<T> empty_cols(Tape<T>& tape, std::size_t rows) {
  return tape.constant({rows, 0}, {});
}

template <class T>
Tensor<T> cat2(const Tensor<T>& a, const Tensor<T>& b) {
  return eng::concat<T>({a, b});
}

// Splits y into scalar [0, s) and rotational [s, s + 2r) parts; rotates the latter by `back`.
template <class T>
FeaturePair<T> split_back(const Tensor<T>& y, std::size_t s, std::size_t r,
                          const Rotations<T>& back) {
  FeaturePair<T> out;
  out.scalar = eng::slice_cols(y, 0, s);
  out.rot = rotate(eng::slice_cols(y, s, s + 2 * r), back);
  return out;
}

template <class T>
Tensor<T> plain_layer_norm(Session<T>& s, const Tensor<T>& z, ParamId g, ParamId b) {
  const Tensor<T> zc = eng::sub(z, eng::row_mean(z));
  const Tensor<T> var = eng::row_mean(eng::square(zc));
  const Tensor<T> zn = eng::div(zc, eng::sqrt(eng::add_scalar(var, static_cast<T>(kNormEps))));
  return eng::add(eng::mul(zn, s.param(g)), s.param(b));
}

}  // namespace

// ---------------------------------------------------------------------------
// SO2-MLP
// ---------------------------------------------------------------------------

template <class T>
So2MlpWeights make_so2_mlp(ParamFactory<T>& f, const std::string& name, std::size_t in_scalar,
                           std::size_t in_rot, std::vector<std::size_t> hidden,
                           std::size_t out_scalar, std::size_t out_rot_width) {
  if (out_rot_width % 2 != 0) {
    throw InvalidConfig("so2 mlp " + name + ": rotational output width " +
                        std::to_string(out_rot_width) + " is not a multiple of two");
  }
  std::vector<std::size_t> dims{in_scalar + 2 * in_rot};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out_scalar + out_rot_width);
  So2MlpWeights w;
  w.mlp = make_mlp(f, name, std::move(dims));
  w.in_scalar = in_scalar;
  w.in_rot = in_rot;
  w.out_scalar = out_scalar;
  w.out_rot = out_rot_width / 2;
  return w;
}

template <class T>
FeaturePair<T> so2_mlp(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                       const So2MlpWeights& w) {
  if (x.n_scalar() != w.in_scalar || x.rot.cols() != 2 * w.in_rot) {
    throw ShapeMismatch("so2_mlp: features " + std::to_string(x.n_scalar()) + "+" +
                        std::to_string(x.rot.cols()) + " do not match weights " +
                        std::to_string(w.in_scalar) + "+" + std::to_string(2 * w.in_rot));
  }
  const Tensor<T> h = cat2(x.scalar, rotate(x.rot, alpha));
  return split_back(apply_mlp(s, w.mlp, h), w.out_scalar, w.out_rot, alpha.inverse());
}

// ---------------------------------------------------------------------------
// Message passing
// ---------------------------------------------------------------------------

template <class T>
MessageContext<T> make_context(const geom::Graph2D& graph, const geom::RadialBasisConfig& basis) {
  MessageContext<T> ctx;
  ctx.n_nodes = graph.num_nodes();
  ctx.n_base = static_cast<std::size_t>(basis.n_base);
  const auto geo = geom::edge_geometry(graph.positions, graph.edges);
  const std::size_t e = geo.size();
  ctx.src.reserve(e);
  ctx.dst.reserve(e);
  ctx.basis.reserve(e * ctx.n_base);
  ctx.rel_vec.reserve(2 * e);
  ctx.theta.reserve(e);
  for (std::size_t k = 0; k < e; ++k) {
    ctx.dst.push_back(graph.edges[k].i);
    ctx.src.push_back(graph.edges[k].j);
    for (double b : geom::bessel_basis(geo[k].dist, basis)) ctx.basis.push_back(static_cast<T>(b));
    ctx.rel_vec.push_back(static_cast<T>(geo[k].rel_vec.x));
    ctx.rel_vec.push_back(static_cast<T>(geo[k].rel_vec.y));
    ctx.theta.push_back(geo[k].theta);
  }
  ctx.edge_rot = Rotations<T>::from_angles(ctx.theta);
  ctx.node_rot = Rotations<T>::from_angles(graph.global_angles);
  return ctx;
}

template <class T>
ConvWeights make_conv(ParamFactory<T>& f, const std::string& name, ConvKind kind,
                      std::size_t scalar, std::size_t rot, std::size_t n_base,
                      bool with_rel_vec) {
  ConvWeights w;
  w.kind = kind;
  w.scalar = scalar;
  w.rot = rot;
  w.n_base = n_base;
  w.with_rel_vec = with_rel_vec;
  const std::size_t width = scalar + 2 * rot;
  const std::size_t m = 2 * width + n_base + (with_rel_vec ? 2 : 0);
  if (kind == ConvKind::kMlp) {
    w.message = make_mlp(f, name + ".msg", {m, 3 * width, width});
  } else {
    w.d = 3 * width;
    w.z_w = f.dense(name + ".z.w", m, w.d);
    w.z_b = f.filled(name + ".z.b", {1, w.d}, 0.0);
    w.ln_g = f.filled(name + ".ln.g", {1, w.d}, 1.0);
    w.ln_b = f.filled(name + ".ln.b", {1, w.d}, 0.0);
    w.att_w = f.dense(name + ".att.w", w.d, 1);
    w.att_b = f.filled(name + ".att.b", {1, 1}, 0.0);
    w.msg_w = f.dense(name + ".msg.w", w.d, width);
    w.msg_b = f.filled(name + ".msg.b", {1, width}, 0.0);
  }
  return w;
}

template <class T>
Tensor<T> edge_inputs(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                      bool with_rel_vec) {
  if (x.n_nodes() != ctx.n_nodes) {
    throw ShapeMismatch("message passing: " + std::to_string(x.n_nodes()) +
                        " feature rows for a graph of " + std::to_string(ctx.n_nodes) + " nodes");
  }
  const std::size_t e = ctx.n_edges();
  std::vector<Tensor<T>> parts;
  parts.push_back(eng::gather_rows<T>(x.scalar, ctx.dst));
  parts.push_back(eng::gather_rows<T>(x.scalar, ctx.src));
  parts.push_back(s.constant({e, ctx.n_base}, ctx.basis));
  if (with_rel_vec) parts.push_back(s.constant({e, 2}, ctx.rel_vec));
  parts.push_back(rotate(eng::gather_rows<T>(x.rot, ctx.dst), ctx.edge_rot));
  parts.push_back(rotate(eng::gather_rows<T>(x.rot, ctx.src), ctx.edge_rot));
  return eng::concat<T>(std::span<const Tensor<T>>(parts));
}

namespace {

template <class T>
FeaturePair<T> aggregate(const Tensor<T>& msg, const MessageContext<T>& ctx, std::size_t scalar,
                         std::size_t rot) {
  FeaturePair<T> m = split_back(msg, scalar, rot, ctx.edge_rot.inverse());
  return {eng::scatter_add_rows<T>(m.scalar, ctx.dst, ctx.n_nodes),
          eng::scatter_add_rows<T>(m.rot, ctx.dst, ctx.n_nodes)};
}

template <class T>
void check_conv(const FeaturePair<T>& x, const ConvWeights& w) {
  if (x.n_scalar() != w.scalar || x.n_rot() != w.rot) {
    throw ShapeMismatch("message passing: features " + std::to_string(x.n_scalar()) + "/" +
                        std::to_string(x.n_rot()) + " do not match layer " +
                        std::to_string(w.scalar) + "/" + std::to_string(w.rot));
  }
}

}  // namespace

template <class T>
FeaturePair<T> se2conv_mlp(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                           const ConvWeights& w) {
  check_conv(x, w);
  const Tensor<T> m = edge_inputs(s, x, ctx, w.with_rel_vec);
  return aggregate(apply_mlp(s, w.message, m), ctx, w.scalar, w.rot);
}

template <class T>
Tensor<T> attention_weights(Session<T>& s, const FeaturePair<T>& x, const MessageContext<T>& ctx,
                            const ConvWeights& w) {
  check_conv(x, w);
  const Tensor<T> m = edge_inputs(s, x, ctx, w.with_rel_vec);
  const Tensor<T> z = linear(s, w.z_w, w.z_b, m);
  const T slope = static_cast<T>(kLeakySlope);
  Tensor<T> logit =
      linear(s, w.att_w, w.att_b, eng::leaky_relu(plain_layer_norm(s, z, w.ln_g, w.ln_b), slope));
  logit = eng::div_scalar(logit, static_cast<T>(std::sqrt(static_cast<double>(w.d))));
  return eng::segment_softmax<T>(logit, ctx.dst, ctx.n_nodes);
}

template <class T>
FeaturePair<T> se2conv_trans(Session<T>& s, const FeaturePair<T>& x,
                             const MessageContext<T>& ctx, const ConvWeights& w) {
  check_conv(x, w);
  const Tensor<T> m = edge_inputs(s, x, ctx, w.with_rel_vec);
  const Tensor<T> z = linear(s, w.z_w, w.z_b, m);
  const T slope = static_cast<T>(kLeakySlope);
  Tensor<T> logit =
      linear(s, w.att_w, w.att_b, eng::leaky_relu(plain_layer_norm(s, z, w.ln_g, w.ln_b), slope));
  logit = eng::div_scalar(logit, static_cast<T>(std::sqrt(static_cast<double>(w.d))));
  const Tensor<T> att = eng::segment_softmax<T>(logit, ctx.dst, ctx.n_nodes);
  const Tensor<T> msg = eng::mul(linear(s, w.msg_w, w.msg_b, eng::leaky_relu(z, slope)), att);
  return aggregate(msg, ctx, w.scalar, w.rot);
}

template <class T>
FeaturePair<T> message_passing(Session<T>& s, const FeaturePair<T>& x,
                               const MessageContext<T>& ctx, const ConvWeights& w) {
  return w.kind == ConvKind::kMlp ? se2conv_mlp(s, x, ctx, w) : se2conv_trans(s, x, ctx, w);
}

// ---------------------------------------------------------------------------
// Norm, feed-forward, embeddings, heads
// ---------------------------------------------------------------------------

template <class T>
LayerNormParams make_layer_norm(ParamFactory<T>& f, const std::string& name, std::size_t scalar,
                                std::size_t rot) {
  LayerNormParams p;
  p.scalar = scalar;
  p.rot = rot;
  p.gamma_s = f.filled(name + ".gs", {1, scalar}, 1.0);
  p.gamma_r = f.filled(name + ".gr", {1, rot}, 1.0);
  return p;
}

template <class T>
FeaturePair<T> separable_layer_norm(Session<T>& s, const FeaturePair<T>& x,
                                    const LayerNormParams& p) {
  if (x.n_scalar() != p.scalar || x.n_rot() != p.rot) {
    throw ShapeMismatch("separable_layer_norm: features " + std::to_string(x.n_scalar()) + "/" +
                        std::to_string(x.n_rot()) + " vs params " + std::to_string(p.scalar) +
                        "/" + std::to_string(p.rot));
  }
  const T eps = static_cast<T>(kNormEps);
  FeaturePair<T> out = x;
  if (p.scalar > 0) {
    const Tensor<T> xc = eng::sub(x.scalar, eng::row_mean(x.scalar));
    const Tensor<T> sd = eng::sqrt(eng::add_scalar(eng::row_mean(eng::square(xc)), eps));
    out.scalar = eng::mul(eng::div(xc, sd), s.param(p.gamma_s));
  }
  if (p.rot > 0) {
    // mean over channels of |x_n|^2 / 2 is the mean of all squared components
    const Tensor<T> sr = eng::sqrt(eng::add_scalar(eng::row_mean(eng::square(x.rot)), eps));
    std::vector<T> expand(p.rot * 2 * p.rot, T(0));
    for (std::size_t n = 0; n < p.rot; ++n) {
      expand[n * 2 * p.rot + 2 * n] = T(1);
      expand[n * 2 * p.rot + 2 * n + 1] = T(1);
    }
    const Tensor<T> g = eng::matmul(s.param(p.gamma_r), s.constant({p.rot, 2 * p.rot}, expand));
    out.rot = eng::mul(eng::div(x.rot, sr), g);
  }
  return out;
}

template <class T>
FeaturePair<T> feed_forward(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                            const So2MlpWeights& w, const LayerNormParams* pre_norm) {
  if (w.in_scalar != w.out_scalar || w.in_rot != w.out_rot) {
    throw InvalidConfig("feed_forward: input and output dims differ");
  }
  const FeaturePair<T> h = pre_norm ? separable_layer_norm(s, x, *pre_norm) : x;
  const FeaturePair<T> d = so2_mlp(s, h, alpha, w);
  return {eng::add(x.scalar, d.scalar), eng::add(x.rot, d.rot)};
}

template <class T>
FeaturePair<T> embed_nodes(Session<T>& s, const Tensor<T>& raw_scalar, const Tensor<T>& raw_rot,
                           const MessageContext<T>& ctx, const EmbedWeights& w) {
  const std::size_t n = raw_scalar.rows();
  FeaturePair<T> out;
  out.scalar = apply_mlp(s, w.scalar, raw_scalar);
  if (w.rotational && w.rot.out_rot > 0) {
    const FeaturePair<T> in{empty_cols(s.tape(), n), raw_rot};
    out.rot = so2_mlp(s, in, ctx.node_rot, w.rot).rot;
  } else {
    out.rot = empty_cols(s.tape(), n);
  }
  return out;
}

template <class T>
FeaturePair<T> embed_relative(Session<T>& s, const MessageContext<T>& ctx,
                              const So2MlpWeights& w, bool rotational) {
  const std::size_t e = ctx.n_edges();
  const Tensor<T> rel = s.constant({e, 2}, ctx.rel_vec);
  const FeaturePair<T> in = rotational ? FeaturePair<T>{empty_cols(s.tape(), e), rel}
                                       : FeaturePair<T>{rel, empty_cols(s.tape(), e)};
  const FeaturePair<T> m = so2_mlp(s, in, ctx.edge_rot, w);
  return {eng::scatter_add_rows<T>(m.scalar, ctx.dst, ctx.n_nodes),
          eng::scatter_add_rows<T>(m.rot, ctx.dst, ctx.n_nodes)};
}

template <class T>
std::pair<FeaturePair<T>, MessageContext<T>> embed_inputs(
    Session<T>& s, const geom::Graph2D& graph, const Tensor<T>& raw_scalar,
    const Tensor<T>& raw_rot, const geom::RadialBasisConfig& basis, const EmbedWeights& w) {
  MessageContext<T> ctx = make_context<T>(graph, basis);
  FeaturePair<T> x = embed_nodes(s, raw_scalar, raw_rot, ctx, w);
  return {std::move(x), std::move(ctx)};
}

template <class T>
Tensor<T> output_scalar(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                        const Mlp& w) {
  return apply_mlp(s, w, cat2(x.scalar, rotate(x.rot, alpha)));
}

template <class T>
Tensor<T> output_rot(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                     const Mlp& w) {
  if (w.out() % 2 != 0) {
    throw InvalidConfig("output_rot: width " + std::to_string(w.out()) +
                        " is not a multiple of two");
  }
  return rotate(apply_mlp(s, w, cat2(x.scalar, rotate(x.rot, alpha))), alpha.inverse());
}

// ---------------------------------------------------------------------------
// Comparison layers
// ---------------------------------------------------------------------------

template <class T>
Pointwise<T> leaky_relu_fn(double slope) {
  return [slope](const Tensor<T>& t) { return eng::leaky_relu(t, static_cast<T>(slope)); };
}

template <class T>
FeaturePair<T> se2_activation(const FeaturePair<T>& x, const Rotations<T>& alpha,
                              const Pointwise<T>& fn) {
  const Tensor<T> y = fn(cat2(x.scalar, rotate(x.rot, alpha)));
  return split_back(y, x.n_scalar(), x.n_rot(), alpha.inverse());
}

template <class T>
LinearWeights make_so2_linear(ParamFactory<T>& f, const std::string& name, std::size_t in_scalar,
                              std::size_t in_rot, std::size_t out_scalar, std::size_t out_rot) {
  LinearWeights w;
  w.out_scalar = out_scalar;
  w.out_rot = out_rot;
  w.w = f.dense(name + ".w", in_scalar + 2 * in_rot, out_scalar + 2 * out_rot);
  w.b = f.filled(name + ".b", {1, out_scalar + 2 * out_rot}, 0.0);
  return w;
}

template <class T>
FeaturePair<T> so2_linear(Session<T>& s, const FeaturePair<T>& x, const Rotations<T>& alpha,
                          const LinearWeights& w) {
  const Tensor<T> y = linear(s, w.w, w.b, cat2(x.scalar, rotate(x.rot, alpha)));
  return split_back(y, w.out_scalar, w.out_rot, alpha.inverse());
}

template <class T>
RotmatWeights make_rotmat_linear(ParamFactory<T>& f, const std::string& name, std::size_t in_rot,
                                 std::size_t out_rot, std::size_t cond_scalar) {
  RotmatWeights w;
  w.in_rot = in_rot;
  w.out_rot = out_rot;
  w.conditioned = cond_scalar > 0;
  if (w.conditioned) {
    const std::size_t out = 2 * in_rot * out_rot;
    w.cond = make_mlp(f, name + ".cond", {cond_scalar, 3 * out, out});
  } else {
    w.w1 = f.dense(name + ".w1", in_rot, out_rot);
    w.w2 = f.dense(name + ".w2", in_rot, out_rot);
  }
  return w;
}

template <class T>
Tensor<T> rotmat_linear(Session<T>& s, const Tensor<T>& rot, const Tensor<T>* scalars,
                        const RotmatWeights& w) {
  const std::size_t ni = w.in_rot, no = w.out_rot;
  if (rot.cols() != 2 * ni) {
    throw ShapeMismatch("rotmat_linear: " + std::to_string(rot.cols()) +
                        " rotational columns, expected " + std::to_string(2 * ni));
  }
  std::vector<T> px(2 * ni * ni, T(0)), py(2 * ni * ni, T(0));
  for (std::size_t j = 0; j < ni; ++j) {
    px[(2 * j) * ni + j] = T(1);
    py[(2 * j + 1) * ni + j] = T(1);
  }
  const Tensor<T> xx = eng::matmul(rot, s.constant({2 * ni, ni}, px));
  const Tensor<T> xy = eng::matmul(rot, s.constant({2 * ni, ni}, py));
  Tensor<T> ox, oy;
  if (!w.conditioned) {
    const Tensor<T> w1 = s.param(w.w1), w2 = s.param(w.w2);
    ox = eng::sub(eng::matmul(xx, w1), eng::matmul(xy, w2));
    oy = eng::add(eng::matmul(xx, w2), eng::matmul(xy, w1));
  } else {
    if (!scalars) throw InvalidArgument("rotmat_linear: conditioned weights need scalar features");
    const Tensor<T> c = apply_mlp(s, w.cond, *scalars);
    const Tensor<T> w1 = eng::slice_cols(c, 0, no * ni);
    const Tensor<T> w2 = eng::slice_cols(c, no * ni, 2 * no * ni);
    // column o * ni + j holds the (o, j) coefficient
    std::vector<T> rep(ni * no * ni, T(0)), red(no * ni * no, T(0));
    for (std::size_t o = 0; o < no; ++o) {
      for (std::size_t j = 0; j < ni; ++j) {
        rep[j * (no * ni) + o * ni + j] = T(1);
        red[(o * ni + j) * no + o] = T(1);
      }
    }
    const Tensor<T> rep_t = s.constant({ni, no * ni}, rep);
    const Tensor<T> red_t = s.constant({no * ni, no}, red);
    const Tensor<T> xr = eng::matmul(xx, rep_t), yr = eng::matmul(xy, rep_t);
    ox = eng::matmul(eng::sub(eng::mul(xr, w1), eng::mul(yr, w2)), red_t);
    oy = eng::matmul(eng::add(eng::mul(xr, w2), eng::mul(yr, w1)), red_t);
  }
  std::vector<T> qx(no * 2 * no, T(0)), qy(no * 2 * no, T(0));
  for (std::size_t o = 0; o < no; ++o) {
    qx[o * 2 * no + 2 * o] = T(1);
    qy[o * 2 * no + 2 * o + 1] = T(1);
  }
  return eng::add(eng::matmul(ox, s.constant({no, 2 * no}, qx)),
                  eng::matmul(oy, s.constant({no, 2 * no}, qy)));
}

namespace {

// Direction matrix (2 x n) and its scaled transpose (n x 2).
template <class T>
std::pair<std::vector<T>, std::vector<T>> fourier_directions(int n) {
  std::vector<T> d(2 * n), dinv(2 * n);
  for (int k = 0; k < n; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / n;
    d[k] = static_cast<T>(std::cos(phi));
    d[n + k] = static_cast<T>(std::sin(phi));
    dinv[2 * k] = static_cast<T>(2.0 / n * std::cos(phi));
    dinv[2 * k + 1] = static_cast<T>(2.0 / n * std::sin(phi));
  }
  return {d, dinv};
}

void check_samples(int n) {
  // n = 2 gives two antipodal directions, which cannot reconstruct a 2-vector.
  if (n < 3) throw InvalidArgument("fourier_pointwise_nonlin: n_samples must be >= 3");
}

}  // namespace

template <class T>
Tensor<T> fourier_pointwise_nonlin(const Tensor<T>& rot, int n_samples, const Pointwise<T>& fn) {
  check_samples(n_samples);
  if (rot.cols() % 2 != 0) throw ShapeMismatch("fourier_pointwise_nonlin: odd rotational width");
  const std::size_t n = static_cast<std::size_t>(n_samples);
  if (rot.numel() == 0) return rot;
  Tape<T>& tape = rot.tape();
  const auto [d, dinv] = fourier_directions<T>(n_samples);
  const Tensor<T> v = eng::reshape(rot, {rot.numel() / 2, 2});
  const Tensor<T> samples = eng::matmul(v, tape.constant({2, n}, d));
  const Tensor<T> back = eng::matmul(fn(samples), tape.constant({n, 2}, dinv));
  return eng::reshape(back, {rot.rows(), rot.cols()});
}

template <class T>
FeaturePair<T> fourier_pointwise_nonlin(const FeaturePair<T>& x, int n_samples,
                                        const Pointwise<T>& fn, bool scalar_offset) {
  check_samples(n_samples);
  const std::size_t rows = x.n_nodes();
  const std::size_t paired = scalar_offset ? std::min(x.n_scalar(), x.n_rot()) : 0;
  if (paired == 0) return {fn(x.scalar), fourier_pointwise_nonlin(x.rot, n_samples, fn)};

  Tape<T>& tape = x.scalar.tape();
  const std::size_t n = static_cast<std::size_t>(n_samples);
  const auto [d, dinv] = fourier_directions<T>(n_samples);
  // Channel k < paired is the function c_k + v_k . d(phi) on the circle.
  const Tensor<T> c = eng::reshape(eng::slice_cols(x.scalar, 0, paired), {rows * paired, 1});
  const Tensor<T> v = eng::reshape(eng::slice_cols(x.rot, 0, 2 * paired), {rows * paired, 2});
  const Tensor<T> f = fn(eng::add(eng::matmul(v, tape.constant({2, n}, d)), c));
  const Tensor<T> c_out = eng::reshape(eng::row_mean(f), {rows, paired});
  const Tensor<T> v_out =
      eng::reshape(eng::matmul(f, tape.constant({n, 2}, dinv)), {rows, 2 * paired});

  FeaturePair<T> out;
  out.scalar = cat2(c_out, fn(eng::slice_cols(x.scalar, paired, x.n_scalar())));
  out.rot = cat2(v_out, fourier_pointwise_nonlin(eng::slice_cols(x.rot, 2 * paired, x.rot.cols()),
                                                  n_samples, fn));
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define SE2GNN_LAYERS(T)                                                                         \
  template struct Rotations<T>;                                                                  \
  template class ParamFactory<T>;                                                                \
  template Tensor<T> rotate(const Tensor<T>&, const Rotations<T>&);                              \
  template Mlp make_mlp(ParamFactory<T>&, const std::string&, std::vector<std::size_t>);         \
  template Tensor<T> linear(Session<T>&, ParamId, ParamId, const Tensor<T>&);                    \
  template Tensor<T> apply_mlp(Session<T>&, const Mlp&, Tensor<T>);                              \
  template So2MlpWeights make_so2_mlp(ParamFactory<T>&, const std::string&, std::size_t,         \
                                      std::size_t, std::vector<std::size_t>, std::size_t,        \
                                      std::size_t);                                              \
  template FeaturePair<T> so2_mlp(Session<T>&, const FeaturePair<T>&, const Rotations<T>&,       \
                                  const So2MlpWeights&);                                         \
  template MessageContext<T> make_context(const geom::Graph2D&, const geom::RadialBasisConfig&); \
  template ConvWeights make_conv(ParamFactory<T>&, const std::string&, ConvKind, std::size_t,    \
                                 std::size_t, std::size_t, bool);                                \
  template Tensor<T> edge_inputs(Session<T>&, const FeaturePair<T>&, const MessageContext<T>&,   \
                                 bool);                                                          \
  template FeaturePair<T> se2conv_mlp(Session<T>&, const FeaturePair<T>&,                        \
                                      const MessageContext<T>&, const ConvWeights&);             \
  template FeaturePair<T> se2conv_trans(Session<T>&, const FeaturePair<T>&,                      \
                                        const MessageContext<T>&, const ConvWeights&);           \
  template FeaturePair<T> message_passing(Session<T>&, const FeaturePair<T>&,                    \
                                          const MessageContext<T>&, const ConvWeights&);         \
  template Tensor<T> attention_weights(Session<T>&, const FeaturePair<T>&,                       \
                                       const MessageContext<T>&, const ConvWeights&);            \
  template LayerNormParams make_layer_norm(ParamFactory<T>&, const std::string&, std::size_t,    \
                                           std::size_t);                                         \
  template FeaturePair<T> separable_layer_norm(Session<T>&, const FeaturePair<T>&,               \
                                               const LayerNormParams&);                          \
  template FeaturePair<T> feed_forward(Session<T>&, const FeaturePair<T>&, const Rotations<T>&,  \
                                       const So2MlpWeights&, const LayerNormParams*);            \
  template FeaturePair<T> embed_nodes(Session<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                      const MessageContext<T>&, const EmbedWeights&);            \
  template FeaturePair<T> embed_relative(Session<T>&, const MessageContext<T>&,                  \
                                         const So2MlpWeights&, bool);                            \
  template std::pair<FeaturePair<T>, MessageContext<T>> embed_inputs(                            \
      Session<T>&, const geom::Graph2D&, const Tensor<T>&, const Tensor<T>&,                     \
      const geom::RadialBasisConfig&, const EmbedWeights&);                                      \
  template Tensor<T> output_scalar(Session<T>&, const FeaturePair<T>&, const Rotations<T>&,      \
                                   const Mlp&);                                                  \
  template Tensor<T> output_rot(Session<T>&, const FeaturePair<T>&, const Rotations<T>&,         \
                                const Mlp&);                                                     \
  template Pointwise<T> leaky_relu_fn<T>(double);                                                \
  template FeaturePair<T> se2_activation(const FeaturePair<T>&, const Rotations<T>&,             \
                                         const Pointwise<T>&);                                   \
  template LinearWeights make_so2_linear(ParamFactory<T>&, const std::string&, std::size_t,      \
                                         std::size_t, std::size_t, std::size_t);                 \
  template FeaturePair<T> so2_linear(Session<T>&, const FeaturePair<T>&, const Rotations<T>&,    \
                                     const LinearWeights&);                                      \
  template RotmatWeights make_rotmat_linear(ParamFactory<T>&, const std::string&, std::size_t,   \
                                            std::size_t, std::size_t);                           \
  template Tensor<T> rotmat_linear(Session<T>&, const Tensor<T>&, const Tensor<T>*,              \
                                   const RotmatWeights&);                                        \
  template Tensor<T> fourier_pointwise_nonlin(const Tensor<T>&, int, const Pointwise<T>&);       \
  template FeaturePair<T> fourier_pointwise_nonlin(const FeaturePair<T>&, int,                   \
                                                   const Pointwise<T>&, bool);

SE2GNN_LAYERS(float)
SE2GNN_LAYERS(double)

#undef SE2GNN_LAYERS

}  // namespace se2gnn::layers
