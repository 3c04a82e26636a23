#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "se2gnn/errors.hpp"
#include "se2gnn/layers.hpp"
#include "se2gnn/model.hpp"

using namespace se2gnn;
using namespace se2gnn::layers;
using engine::Array;
using geom::Vec2;
using std::numbers::pi;

namespace {

using Vec = std::vector<double>;

Vec randn(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  Vec v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

geom::Graph2D random_graph(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<Vec2> p(n);
  for (auto& v : p) v = {u(rng), u(rng)};
  return geom::Graph2D::build(p, geom::delaunay(p));
}

// Rotates every (x, y) pair by beta.
Vec rotated(const Vec& v, double beta) {
  const double c = std::cos(beta), s = std::sin(beta);
  Vec out(v.size());
  for (std::size_t k = 0; k + 1 < v.size(); k += 2) {
    out[k] = c * v[k] - s * v[k + 1];
    out[k + 1] = s * v[k] + c * v[k + 1];
  }
  return out;
}

Vec values(const Tensor<double>& t) { return {t.value().begin(), t.value().end()}; }

double max_abs_diff(const Vec& a, const Vec& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Vec& a) {
  double m = 1e-12;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

void zero_params(ParamSet<double>& ps) {
  for (auto& e : ps) std::fill(e.value.begin(), e.value.end(), 0.0);
}

void set_identity(ParamSet<double>& ps, ParamId w) {
  auto& e = ps[w];
  std::fill(e.value.begin(), e.value.end(), 0.0);
  for (std::size_t i = 0; i < std::min(e.shape[0], e.shape[1]); ++i) e.value[i * e.shape[1] + i] = 1.0;
}

// Plain-loop reference for a dense stack with LeakyReLU between layers.
Vec mlp_ref(const ParamSet<double>& ps, const Mlp& m, const Vec& in) {
  Vec h = in;
  for (std::size_t l = 0; l < m.weight.size(); ++l) {
    const auto& w = ps[m.weight[l]];
    const auto& b = ps[m.bias[l]];
    const std::size_t ni = w.shape[0], no = w.shape[1];
    Vec o(no);
    for (std::size_t j = 0; j < no; ++j) {
      double acc = b.value[j];
      for (std::size_t i = 0; i < ni; ++i) acc += h[i] * w.value[i * no + j];
      o[j] = (l + 1 < m.weight.size() && acc < 0) ? 0.01 * acc : acc;
    }
    h = o;
  }
  return h;
}

FeaturePair<double> pair_of(Session<double>& s, std::size_t n, const Vec& sc, const Vec& rot) {
  return {s.constant({n, sc.size() / n}, sc), s.constant({n, rot.size() / n}, rot)};
}

Rotations<double> angles(const std::vector<double>& a) { return Rotations<double>::from_angles(a); }

// Central-difference check of Session gradients w.r.t. every parameter.
template <class F>
double param_grad_error(ParamSet<double>& ps, F loss) {
  Session<double> s(ps);
  const auto l = loss(s);
  s.backward(l);
  const auto g = s.gradients();
  double worst = 0;
  const double h = 1e-6;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    for (std::size_t k = 0; k < ps[p].value.size(); ++k) {
      const double keep = ps[p].value[k];
      ps[p].value[k] = keep + h;
      Session<double> sp(ps, false);
      const double fp = loss(sp).item();
      ps[p].value[k] = keep - h;
      Session<double> sm(ps, false);
      const double fm = loss(sm).item();
      ps[p].value[k] = keep;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(g[p][k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("rotate counts only non-empty inputs") {
  Tape<double> t;
  const auto r = angles({0.3, 0.4});
  const auto before = rotation_count();
  rotate(t.constant({2, 0}, {}), r);
  CHECK(rotation_count() == before);
  const auto y = rotate(t.constant({2, 2}, {1, 0, 0, 1}), r);
  CHECK(rotation_count() == before + 1);
  CHECK(values(y)[0] == doctest::Approx(std::cos(0.3)));
  CHECK(values(y)[3] == doctest::Approx(std::cos(0.4)));
}

TEST_CASE("so2_mlp") {
  std::mt19937_64 rng(1);
  SUBCASE("identity weights and zero angle pass input through") {
    ParamSet<double> ps;
    ParamFactory<double> f(ps, 0);
    const auto w = make_so2_mlp(f, "m", 2, 2, {}, 2, 4);
    set_identity(ps, w.mlp.weight[0]);
    Session<double> s(ps, false);
    const Vec sc = randn(6, rng), rot = randn(12, rng);
    const auto y = so2_mlp(s, pair_of(s, 3, sc, rot), angles({0, 0, 0}), w);
    CHECK(values(y.scalar) == sc);
    CHECK(values(y.rot) == rot);
  }
  SUBCASE("matches a rotate, MLP, unrotate oracle") {
    ParamSet<double> ps;
    ParamFactory<double> f(ps, 7);
    const auto w = make_so2_mlp(f, "m", 4, 3, {10}, 5, 6);
    for (auto& e : ps) e.value = randn(e.value.size(), rng);
    const std::size_t n = 7;
    const Vec sc = randn(n * 4, rng), rot = randn(n * 6, rng), a = randn(n, rng);
    Session<double> s(ps, false);
    const auto y = so2_mlp(s, pair_of(s, n, sc, rot), angles(a), w);
    for (std::size_t i = 0; i < n; ++i) {
      Vec in(sc.begin() + i * 4, sc.begin() + i * 4 + 4);
      const Vec r = rotated(Vec(rot.begin() + i * 6, rot.begin() + i * 6 + 6), a[i]);
      in.insert(in.end(), r.begin(), r.end());
      const Vec o = mlp_ref(ps, w.mlp, in);
      const Vec back = rotated(Vec(o.begin() + 5, o.end()), -a[i]);
      for (std::size_t c = 0; c < 5; ++c) CHECK(std::abs(values(y.scalar)[i * 5 + c] - o[c]) < 1e-12);
      for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(values(y.rot)[i * 6 + c] - back[c]) < 1e-12);
    }
  }
  SUBCASE("consistent rotation of features and frames") {
    ParamSet<double> ps;
    ParamFactory<double> f(ps, 3);
    const auto w = make_so2_mlp(f, "m", 3, 2, {8}, 3, 4);
    const std::size_t n = 5;
    const Vec sc = randn(n * 3, rng), rot = randn(n * 4, rng), a = randn(n, rng);
    Session<double> s(ps, false);
    const auto y = so2_mlp(s, pair_of(s, n, sc, rot), angles(a), w);
    for (double beta : {0.3, 1.9, -2.5}) {
      Vec a2 = a;
      for (auto& v : a2) v -= beta;
      const auto z = so2_mlp(s, pair_of(s, n, sc, rotated(rot, beta)), angles(a2), w);
      CHECK(max_abs_diff(values(z.scalar), values(y.scalar)) < 1e-10);
      CHECK(max_abs_diff(values(z.rot), rotated(values(y.rot), beta)) < 1e-10);
    }
  }
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 3);
  CHECK_THROWS_AS(make_so2_mlp(f, "bad", 1, 1, {}, 1, 3), InvalidConfig);
}

namespace {

struct Fixture {
  geom::Graph2D graph;
  Vec sc, rot;
  std::size_t n_s, n_r;
};

Fixture fixture(std::size_t n, std::size_t n_s, std::size_t n_r, std::mt19937_64& rng) {
  Fixture fx{random_graph(n, rng), {}, {}, n_s, n_r};
  fx.sc = randn(n * n_s, rng);
  fx.rot = randn(n * 2 * n_r, rng);
  return fx;
}

// Applies `layer` on the fixture and on 20 rigidly moved copies; returns the worst
// relative error of (scalar, rot).
template <class Layer>
std::pair<double, double> sweep(const Fixture& fx, const ParamSet<double>& ps, Layer layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ang(0, 2 * pi), tr(-10, 10);
  const std::size_t n = fx.graph.num_nodes();
  Session<double> s(ps, false);
  const auto ctx = make_context<double>(fx.graph, {4, 3.0});
  const auto ref = layer(s, pair_of(s, n, fx.sc, fx.rot), ctx);
  const Vec ref_s = values(ref.scalar), ref_r = values(ref.rot);
  double es = 0, er = 0;
  for (int t = 0; t < 20; ++t) {
    const double beta = ang(rng);
    const auto g2 = fx.graph.transformed(geom::rotation_matrix(beta), {tr(rng), tr(rng)});
    const auto ctx2 = make_context<double>(g2, {4, 3.0});
    Session<double> s2(ps, false);
    const auto y = layer(s2, pair_of(s2, n, fx.sc, rotated(fx.rot, beta)), ctx2);
    es = std::max(es, max_abs_diff(values(y.scalar), ref_s) / max_abs(ref_s));
    if (!ref_r.empty()) er = std::max(er, max_abs_diff(values(y.rot), rotated(ref_r, beta)) / max_abs(ref_r));
  }
  return {es, er};
}

}  // namespace

TEST_CASE("embedding") {
  std::mt19937_64 rng(2);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 5);
  EmbedWeights w;
  w.scalar = make_mlp(f, "es", {3, 8, 6});
  w.rot = make_so2_mlp(f, "er", 0, 2, {8}, 0, 8);
  auto fx = fixture(10, 3, 2, rng);
  const std::size_t n = 10;

  SUBCASE("zero raw features and zero biases give zeros") {
    Session<double> s(ps, false);
    const auto [x, ctx] = embed_inputs(s, fx.graph, s.constant({n, 3}, Vec(n * 3, 0.0)),
                                       s.constant({n, 4}, Vec(n * 4, 0.0)), {4, 3.0}, w);
    CHECK(max_abs_diff(values(x.scalar), Vec(n * 6, 0.0)) == 0.0);
    CHECK(max_abs_diff(values(x.rot), Vec(n * 8, 0.0)) == 0.0);
  }
  SUBCASE("two nodes on the x axis") {
    const std::vector<Vec2> p{{0, 0}, {2, 0}};
    const auto g = geom::Graph2D::build(p, std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}});
    const auto ctx = make_context<double>(g, {4, 3.0});
    REQUIRE(ctx.theta.size() == 2);
    const double lo = std::min(std::abs(ctx.theta[0]), std::abs(ctx.theta[1]));
    const double hi = std::max(std::abs(ctx.theta[0]), std::abs(ctx.theta[1]));
    CHECK(lo == doctest::Approx(0.0));
    CHECK(hi == doctest::Approx(pi));
  }
  SUBCASE("rigid motions") {
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return embed_nodes(s, x.scalar, x.rot, ctx, w);
                                },
                                11);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("relative embedding") {
    ParamSet<double> ps2;
    ParamFactory<double> f2(ps2, 9);
    const auto rw = make_so2_mlp(f2, "rel", 0, 1, {8}, 5, 6);
    const auto [es, er] = sweep(fx, ps2,
                                [&](Session<double>& s, const FeaturePair<double>&, const MessageContext<double>& ctx) {
                                  return embed_relative(s, ctx, rw, true);
                                },
                                12);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
}

TEST_CASE("se2conv_mlp") {
  std::mt19937_64 rng(3);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 6);
  const auto w = make_conv(f, "c", ConvKind::kMlp, 3, 2, 4, false);
  for (auto& e : ps) e.value = randn(e.value.size(), rng);

  SUBCASE("no edges") {
    const std::vector<Vec2> p{{0, 0}, {1, 0}, {0, 1}};
    const auto g = geom::Graph2D::build(p, std::vector<std::pair<std::uint32_t, std::uint32_t>>{});
    const auto ctx = make_context<double>(g, {4, 3.0});
    Session<double> s(ps, false);
    const auto y = se2conv_mlp(s, pair_of(s, 3, randn(9, rng), randn(12, rng)), ctx, w);
    CHECK(values(y.scalar) == Vec(9, 0.0));
    CHECK(values(y.rot) == Vec(12, 0.0));
  }
  SUBCASE("hand-unrolled two-node graph") {
    const std::vector<Vec2> p{{0.3, -0.2}, {1.4, 0.9}};
    const auto g = geom::Graph2D::build(p, std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}});
    const auto ctx = make_context<double>(g, {4, 3.0});
    const Vec sc = randn(6, rng), rot = randn(8, rng);
    Session<double> s(ps, false);
    const auto y = se2conv_mlp(s, pair_of(s, 2, sc, rot), ctx, w);
    for (int i = 0; i < 2; ++i) {
      const int j = 1 - i;
      const double dx = p[j].x - p[i].x, dy = p[j].y - p[i].y;
      const double d = std::hypot(dx, dy), theta = -std::atan2(dy, dx);
      Vec in(sc.begin() + 3 * i, sc.begin() + 3 * i + 3);
      in.insert(in.end(), sc.begin() + 3 * j, sc.begin() + 3 * j + 3);
      for (int k = 1; k <= 4; ++k) in.push_back(std::sqrt(2.0 / 3.0) * std::sin(k * pi * d / 3.0) / d);
      const Vec ri = rotated(Vec(rot.begin() + 4 * i, rot.begin() + 4 * i + 4), theta);
      const Vec rj = rotated(Vec(rot.begin() + 4 * j, rot.begin() + 4 * j + 4), theta);
      in.insert(in.end(), ri.begin(), ri.end());
      in.insert(in.end(), rj.begin(), rj.end());
      const Vec m = mlp_ref(ps, w.message, in);
      const Vec back = rotated(Vec(m.begin() + 3, m.end()), -theta);
      for (int c = 0; c < 3; ++c) CHECK(std::abs(values(y.scalar)[3 * i + c] - m[c]) < 1e-12);
      for (int c = 0; c < 4; ++c) CHECK(std::abs(values(y.rot)[4 * i + c] - back[c]) < 1e-12);
    }
  }
  SUBCASE("rigid motions") {
    const auto fx = fixture(16, 3, 2, rng);
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return se2conv_mlp(s, x, ctx, w);
                                },
                                13);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
}

TEST_CASE("se2conv_trans") {
  std::mt19937_64 rng(4);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 8);
  const auto w = make_conv(f, "c", ConvKind::kTrans, 3, 2, 4, false);
  CHECK(w.d == 3 * (3 + 4));

  SUBCASE("single in-edge gets weight one") {
    const std::vector<Vec2> p{{0, 0}, {1, 0.5}};
    const auto g = geom::Graph2D::build(p, std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}});
    const auto ctx = make_context<double>(g, {4, 3.0});
    Session<double> s(ps, false);
    const auto a = attention_weights(s, pair_of(s, 2, randn(6, rng), randn(8, rng)), ctx, w);
    CHECK(values(a) == Vec{1.0, 1.0});
  }
  SUBCASE("identical in-edges share the weight") {
    const std::vector<Vec2> p{{0, 0}, {1, 0}, {-1, 0}};
    const auto g = geom::Graph2D::build(p, std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}, {0, 2}});
    const auto ctx = make_context<double>(g, {4, 3.0});
    Vec sc = randn(9, rng);
    for (int c = 0; c < 3; ++c) sc[6 + c] = sc[3 + c];
    Session<double> s(ps, false);
    const auto a = values(attention_weights(s, pair_of(s, 3, sc, Vec(12, 0.0)), ctx, w));
    for (std::size_t k = 0; k < g.edges.size(); ++k) {
      if (g.edges[k].i == 0) CHECK(a[k] == doctest::Approx(0.5).epsilon(1e-12));
    }
  }
  SUBCASE("rigid motions") {
    const auto fx = fixture(16, 3, 2, rng);
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return se2conv_trans(s, x, ctx, w);
                                },
                                14);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("parameter gradients") {
    const auto fx = fixture(6, 3, 2, rng);
    const auto ctx = make_context<double>(fx.graph, {4, 3.0});
    const double err = param_grad_error(ps, [&](Session<double>& s) {
      const auto y = se2conv_trans(s, pair_of(s, 6, fx.sc, fx.rot), ctx, w);
      return engine::add(engine::sum(engine::square(y.scalar)), engine::sum(engine::square(y.rot)));
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("feed_forward") {
  std::mt19937_64 rng(5);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 9);
  const auto w = make_so2_mlp(f, "ff", 3, 2, {12}, 3, 4);
  const auto ln = make_layer_norm(f, "ln", 3, 2);
  const auto fx = fixture(8, 3, 2, rng);

  SUBCASE("zero weights leave the residual") {
    ParamSet<double> z = ps;
    zero_params(z);
    Session<double> s(z, false);
    const auto ctx = make_context<double>(fx.graph, {4, 3.0});
    const auto y = feed_forward(s, pair_of(s, 8, fx.sc, fx.rot), ctx.node_rot, w, &ln);
    CHECK(values(y.scalar) == fx.sc);
    CHECK(values(y.rot) == fx.rot);
  }
  SUBCASE("rigid motions") {
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return feed_forward(s, x, ctx.node_rot, w, &ln);
                                },
                                15);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("parameter gradients") {
    const auto ctx = make_context<double>(fx.graph, {4, 3.0});
    const double err = param_grad_error(ps, [&](Session<double>& s) {
      const auto y = feed_forward(s, pair_of(s, 8, fx.sc, fx.rot), ctx.node_rot, w, &ln);
      return engine::add(engine::sum(engine::square(y.scalar)), engine::sum(engine::square(y.rot)));
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("separable_layer_norm") {
  std::mt19937_64 rng(6);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 1);
  SUBCASE("constant scalar row") {
    const auto p = make_layer_norm(f, "ln", 4, 0);
    Session<double> s(ps, false);
    const auto y = separable_layer_norm(s, pair_of(s, 1, Vec(4, 2.5), Vec{}), p);
    CHECK(values(y.scalar) == Vec(4, 0.0));
  }
  SUBCASE("single vector channel") {
    const auto p = make_layer_norm(f, "ln", 0, 1);
    Session<double> s(ps, false);
    const auto y = values(separable_layer_norm(s, pair_of(s, 1, Vec{}, Vec{3, 4}), p).rot);
    const double sigma = std::sqrt((9.0 + 16.0) / 2.0 + 1e-5);
    CHECK(y[0] == doctest::Approx(3 / sigma).epsilon(1e-14));
    CHECK(y[1] == doctest::Approx(4 / sigma).epsilon(1e-14));
  }
  SUBCASE("commutes with rotation") {
    const auto p = make_layer_norm(f, "ln", 2, 3);
    for (auto& e : ps) e.value = randn(e.value.size(), rng);
    const Vec sc = randn(10, rng), rot = randn(30, rng);
    Session<double> s(ps, false);
    const auto a = separable_layer_norm(s, pair_of(s, 5, sc, rot), p);
    const auto b = separable_layer_norm(s, pair_of(s, 5, sc, rotated(rot, 1.234)), p);
    CHECK(max_abs_diff(values(b.rot), rotated(values(a.rot), 1.234)) < 1e-12);
    CHECK(max_abs_diff(values(b.scalar), values(a.scalar)) < 1e-12);
  }
}

TEST_CASE("output heads") {
  std::mt19937_64 rng(7);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 2);
  const auto hs = make_mlp(f, "hs", {3 + 4, 9, 2});
  const auto hr = make_mlp(f, "hr", {3 + 4, 9, 6});
  for (auto& e : ps) e.value = randn(e.value.size(), rng);
  const auto fx = fixture(9, 3, 2, rng);
  const std::size_t n = 9;

  SUBCASE("invariance and equivariance") {
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return FeaturePair<double>{output_scalar(s, x, ctx.node_rot, hs),
                                                             output_rot(s, x, ctx.node_rot, hr)};
                                },
                                16);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("oracle") {
    const Vec a = randn(n, rng);
    Session<double> s(ps, false);
    const auto x = pair_of(s, n, fx.sc, fx.rot);
    const Vec ys = values(output_scalar(s, x, angles(a), hs));
    const Vec yr = values(output_rot(s, x, angles(a), hr));
    for (std::size_t i = 0; i < n; ++i) {
      Vec in(fx.sc.begin() + 3 * i, fx.sc.begin() + 3 * i + 3);
      const Vec r = rotated(Vec(fx.rot.begin() + 4 * i, fx.rot.begin() + 4 * i + 4), a[i]);
      in.insert(in.end(), r.begin(), r.end());
      const Vec os = mlp_ref(ps, hs, in);
      const Vec orr = rotated(mlp_ref(ps, hr, in), -a[i]);
      for (int c = 0; c < 2; ++c) CHECK(std::abs(ys[2 * i + c] - os[c]) < 1e-12);
      for (int c = 0; c < 6; ++c) CHECK(std::abs(yr[6 * i + c] - orr[c]) < 1e-12);
    }
  }
  SUBCASE("zero features and zero bias") {
    ParamSet<double> z = ps;
    for (auto id : hs.bias) std::fill(z[id].value.begin(), z[id].value.end(), 0.0);
    Session<double> s(z, false);
    const auto y = output_scalar(s, pair_of(s, n, Vec(n * 3, 0.0), Vec(n * 4, 0.0)), angles(Vec(n, 0.3)), hs);
    CHECK(values(y) == Vec(n * 2, 0.0));
  }
  SUBCASE("identity weights pass aligned features") {
    ParamSet<double> ps2;
    ParamFactory<double> f2(ps2, 0);
    const auto id = make_mlp(f2, "id", {2 + 4, 4});
    auto& e = ps2[id.weight[0]];
    std::fill(e.value.begin(), e.value.end(), 0.0);
    for (std::size_t k = 0; k < 4; ++k) e.value[(2 + k) * 4 + k] = 1.0;
    Session<double> s(ps2, false);
    const Vec rot = randn(12, rng);
    const auto y = output_rot(s, pair_of(s, 3, randn(6, rng), rot), angles({0, 0, 0}), id);
    CHECK(values(y) == rot);
  }
}

TEST_CASE("se2_activation") {
  std::mt19937_64 rng(8);
  const auto fx = fixture(12, 4, 3, rng);
  ParamSet<double> none;
  SUBCASE("identity function") {
    Session<double> s(none, false);
    const auto y = se2_activation<double>(pair_of(s, 12, fx.sc, fx.rot), angles(randn(12, rng)),
                                          [](const Tensor<double>& t) { return t; });
    CHECK(values(y.scalar) == fx.sc);
    CHECK(max_abs_diff(values(y.rot), fx.rot) < 1e-15);
  }
  SUBCASE("LeakyReLU sweep") {
    const auto [es, er] = sweep(fx, none,
                                [&](Session<double>&, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return se2_activation(x, ctx.node_rot, leaky_relu_fn<double>());
                                },
                                17);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("32-bit error over 50 passes") {
    const auto st = model::activation_equivariance_error<float>(model::ActivationProbe{}, 50, 3);
    CHECK(st.mean < 1e-5);
  }
}

TEST_CASE("so2_linear") {
  std::mt19937_64 rng(9);
  ParamSet<double> ps;
  ParamFactory<double> f(ps, 4);
  const auto w = make_so2_linear(f, "l", 3, 2, 4, 3);
  for (auto& e : ps) e.value = randn(e.value.size(), rng);
  const auto fx = fixture(10, 3, 2, rng);
  SUBCASE("zero weights") {
    ParamSet<double> z = ps;
    zero_params(z);
    Session<double> s(z, false);
    const auto y = so2_linear(s, pair_of(s, 10, fx.sc, fx.rot), angles(randn(10, rng)), w);
    CHECK(values(y.scalar) == Vec(40, 0.0));
    CHECK(max_abs_diff(values(y.rot), Vec(60, 0.0)) == 0.0);
  }
  SUBCASE("rigid motions") {
    const auto [es, er] = sweep(fx, ps,
                                [&](Session<double>& s, const FeaturePair<double>& x, const MessageContext<double>& ctx) {
                                  return so2_linear(s, x, ctx.node_rot, w);
                                },
                                18);
    CHECK(es < 1e-10);
    CHECK(er < 1e-10);
  }
  SUBCASE("oracle") {
    const Vec a = randn(10, rng);
    Session<double> s(ps, false);
    const auto y = so2_linear(s, pair_of(s, 10, fx.sc, fx.rot), angles(a), w);
    Mlp as_mlp{{w.w}, {w.b}, {7, 10}};
    for (std::size_t i = 0; i < 10; ++i) {
      Vec in(fx.sc.begin() + 3 * i, fx.sc.begin() + 3 * i + 3);
      const Vec r = rotated(Vec(fx.rot.begin() + 4 * i, fx.rot.begin() + 4 * i + 4), a[i]);
      in.insert(in.end(), r.begin(), r.end());
      const Vec o = mlp_ref(ps, as_mlp, in);
      const Vec back = rotated(Vec(o.begin() + 4, o.end()), -a[i]);
      for (int c = 0; c < 4; ++c) CHECK(std::abs(values(y.scalar)[4 * i + c] - o[c]) < 1e-12);
      for (int c = 0; c < 6; ++c) CHECK(std::abs(values(y.rot)[6 * i + c] - back[c]) < 1e-12);
    }
  }
}

TEST_CASE("rotmat_linear") {
  std::mt19937_64 rng(10);
  SUBCASE("passthrough and quarter turn") {
    ParamSet<double> ps;
    ParamFactory<double> f(ps, 1);
    const auto w = make_rotmat_linear(f, "r", 3, 3);
    set_identity(ps, w.w1);
    zero_params(ps);
    set_identity(ps, w.w1);
    const Vec rot = randn(24, rng);
    Session<double> s(ps, false);
    CHECK(values(rotmat_linear(s, s.constant({4, 6}, rot), static_cast<const Tensor<double>*>(nullptr), w)) == rot);

    ParamSet<double> q;
    ParamFactory<double> fq(q, 1);
    const auto w1 = make_rotmat_linear(fq, "r", 1, 1);
    q[w1.w1].value = {0.0};
    q[w1.w2].value = {1.0};
    Session<double> s2(q, false);
    CHECK(values(rotmat_linear(s2, s2.constant({1, 2}, {2.0, 0.5}), static_cast<const Tensor<double>*>(nullptr), w1)) == Vec{-0.5, 2.0});
  }
  SUBCASE("rotation sweep with scalar conditioning") {
    ParamSet<double> ps;
    ParamFactory<double> f(ps, 2);
    const auto w = make_rotmat_linear(f, "r", 3, 2, 4);
    const Vec sc = randn(20, rng), rot = randn(30, rng);
    Session<double> s(ps, false);
    const auto scal = s.constant({5, 4}, sc);
    const Vec y = values(rotmat_linear(s, s.constant({5, 6}, rot), &scal, w));
    for (double beta : {0.1, 2.0, 4.4}) {
      const Vec z = values(rotmat_linear(s, s.constant({5, 6}, rotated(rot, beta)), &scal, w));
      CHECK(max_abs_diff(z, rotated(y, beta)) / max_abs(y) < 1e-10);
    }
    CHECK_THROWS_AS(rotmat_linear(s, s.constant({5, 6}, rot), static_cast<const Tensor<double>*>(nullptr), w), InvalidArgument);
  }
}

TEST_CASE("fourier_pointwise_nonlin") {
  std::mt19937_64 rng(11);
  ParamSet<double> none;
  Session<double> s(none, false);
  const Vec rot = randn(40, rng);
  for (int n : {3, 4, 7, 16}) {
    const auto y = fourier_pointwise_nonlin<double>(s.constant({5, 8}, rot), n,
                                                    [](const Tensor<double>& t) { return t; });
    CHECK(max_abs_diff(values(y), rot) < 1e-12);
  }
  CHECK_THROWS_AS(fourier_pointwise_nonlin<double>(s.constant({5, 8}, rot), 2, leaky_relu_fn<double>()),
                  InvalidArgument);

  // Error shrinks with the sample count.
  std::vector<double> err;
  for (int n : {4, 8, 16, 32}) {
    model::ActivationProbe p;
    p.kind = model::ActivationKind::kFourier;
    p.n_samples = n;
    p.scalar_offset = true;
    err.push_back(model::activation_equivariance_error<double>(p, 50, 5).mean);
  }
  for (std::size_t k = 1; k < err.size(); ++k) CHECK(err[k] <= err[k - 1]);
  CHECK(err.back() < 0.1 * err.front());
}
