#include "se2gnn/geom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "se2gnn/errors.hpp"

namespace se2gnn::geom {

namespace {

// -atan2 folded into (-pi, pi].
double negated_angle(double y, double x) {
  double theta = -std::atan2(y, x);
  if (theta <= -std::numbers::pi) theta = std::numbers::pi;
  return theta;
}

}  // namespace

double norm(Vec2 v) { return std::hypot(v.x, v.y); }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

Rot2 rotation_matrix(double theta) {
  if (!std::isfinite(theta)) throw InvalidArgument("rotation_matrix: non-finite angle");
  return {std::cos(theta), std::sin(theta)};
}

std::vector<EdgeGeometry> edge_geometry(std::span<const Vec2> positions,
                                        std::span<const Edge> edges) {
  std::vector<EdgeGeometry> out;
  out.reserve(edges.size());
  const std::size_t n = positions.size();
  for (const Edge& e : edges) {
    if (e.i >= n || e.j >= n) {
      throw InvalidArgument("edge_geometry: edge (" + std::to_string(e.i) + ", " +
                            std::to_string(e.j) + ") references a node >= " +
                            std::to_string(n));
    }
    EdgeGeometry g;
    g.rel_vec = positions[e.j] - positions[e.i];
    g.dist = norm(g.rel_vec);
    if (g.dist < 1e-12) throw DegenerateEdge(e.i, e.j);
    g.unit_vec = (1.0 / g.dist) * g.rel_vec;
    g.theta = negated_angle(g.unit_vec.y, g.unit_vec.x);
    out.push_back(g);
  }
  return out;
}

std::vector<double> global_angles(std::span<const Vec2> centered_positions) {
  std::vector<double> out(centered_positions.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec2 r = centered_positions[i];
    if (norm(r) >= 1e-9) out[i] = negated_angle(r.y, r.x);
  }
  return out;
}

std::vector<Vec2> center_of_mass_zero(std::span<const Vec2> positions) {
  Vec2 mean;
  for (const Vec2& p : positions) mean = mean + p;
  if (!positions.empty()) mean = (1.0 / static_cast<double>(positions.size())) * mean;
  std::vector<Vec2> out;
  out.reserve(positions.size());
  for (const Vec2& p : positions) out.push_back(p - mean);
  return out;
}

std::vector<double> bessel_basis(double dist, const RadialBasisConfig& cfg) {
  if (cfg.n_base < 1 || !(cfg.cutoff > 0.0)) {
    throw InvalidArgument("bessel_basis: n_base must be >= 1 and cutoff > 0");
  }
  const double r = std::max(dist, 1e-6);
  const double pref = std::sqrt(2.0 / cfg.cutoff);
  std::vector<double> out(static_cast<std::size_t>(cfg.n_base));
  for (int n = 1; n <= cfg.n_base; ++n) {
    out[n - 1] = pref * std::sin(n * std::numbers::pi * r / cfg.cutoff) / r;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bowyer-Watson
// ---------------------------------------------------------------------------

namespace {

using Real = long double;

struct P {
  Real x, y;
};

Real orient(const P& a, const P& b, const P& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// > 0 when d lies inside the circumcircle of counter-clockwise (a, b, c).
Real incircle(const P& a, const P& b, const P& c, const P& d) {
  const Real adx = a.x - d.x, ady = a.y - d.y;
  const Real bdx = b.x - d.x, bdy = b.y - d.y;
  const Real cdx = c.x - d.x, cdy = c.y - d.y;
  const Real alift = adx * adx + ady * ady;
  const Real blift = bdx * bdx + bdy * bdy;
  const Real clift = cdx * cdx + cdy * cdy;
  return alift * (bdx * cdy - bdy * cdx) + blift * (cdx * ady - cdy * adx) +
         clift * (adx * bdy - ady * bdx);
}

constexpr Real kSuperScale = 1e5L;

std::vector<std::array<std::uint32_t, 3>> bowyer_watson(std::span<const Vec2> points) {
  const std::size_t n = points.size();
  if (n < 3) throw TriangulationFailed("delaunay: need at least 3 points");

  double minx = std::numeric_limits<double>::infinity(), miny = minx;
  double maxx = -minx, maxy = -minx;
  for (const Vec2& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw TriangulationFailed("delaunay: non-finite point");
    }
    minx = std::min(minx, p.x);
    maxx = std::max(maxx, p.x);
    miny = std::min(miny, p.y);
    maxy = std::max(maxy, p.y);
  }
  const double extent = std::max(maxx - minx, maxy - miny);
  if (!(extent > 0.0)) throw TriangulationFailed("delaunay: all points coincide");

  // Insertion happens in lexicographic order so the result only depends on the point set.
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (points[a].x != points[b].x) return points[a].x < points[b].x;
    return points[a].y < points[b].y;
  });

  std::vector<P> pts(n + 3);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec2& p = points[order[k]];
    // Translation only: lattice inputs stay exactly representable.
    pts[k] = {static_cast<Real>(p.x) - minx, static_cast<Real>(p.y) - miny};
    if (k > 0 && pts[k].x == pts[k - 1].x && pts[k].y == pts[k - 1].y) {
      throw TriangulationFailed("delaunay: duplicate points");
    }
  }
  bool any_turn = false;
  for (std::size_t k = 2; k < n && !any_turn; ++k) {
    any_turn = orient(pts[0], pts[1], pts[k]) != 0.0L;
  }
  if (!any_turn) throw TriangulationFailed("delaunay: all points are collinear");

  const auto s0 = static_cast<std::uint32_t>(n);
  const Real big = kSuperScale * extent;
  pts[n] = {-big, -big};
  pts[n + 1] = {big, -big};
  pts[n + 2] = {0.5L * extent, big};

  using Tri = std::array<std::uint32_t, 3>;
  std::vector<Tri> tris{{s0, s0 + 1, s0 + 2}};
  std::vector<std::array<std::uint32_t, 2>> boundary;
  std::vector<std::array<std::uint32_t, 2>> cavity_edges;

  for (std::uint32_t k = 0; k < n; ++k) {
    const P& p = pts[k];
    cavity_edges.clear();
    for (std::size_t t = 0; t < tris.size();) {
      const Tri& tri = tris[t];
      if (incircle(pts[tri[0]], pts[tri[1]], pts[tri[2]], p) > 0.0L) {
        cavity_edges.push_back({tri[0], tri[1]});
        cavity_edges.push_back({tri[1], tri[2]});
        cavity_edges.push_back({tri[2], tri[0]});
        tris[t] = tris.back();
        tris.pop_back();
      } else {
        ++t;
      }
    }
    boundary.clear();
    for (const auto& e : cavity_edges) {
      const bool shared = std::any_of(cavity_edges.begin(), cavity_edges.end(),
                                      [&](const auto& o) { return o[0] == e[1] && o[1] == e[0]; });
      if (!shared) boundary.push_back(e);
    }
    for (const auto& e : boundary) tris.push_back({e[0], e[1], k});
  }

  std::vector<Tri> out;
  out.reserve(tris.size());
  for (const Tri& t : tris) {
    if (t[0] >= s0 || t[1] >= s0 || t[2] >= s0) continue;
    Tri mapped{order[t[0]], order[t[1]], order[t[2]]};
    // Canonical rotation: smallest index first, orientation kept.
    const auto m = std::min_element(mapped.begin(), mapped.end()) - mapped.begin();
    std::rotate(mapped.begin(), mapped.begin() + m, mapped.end());
    out.push_back(mapped);
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw TriangulationFailed("delaunay: no triangles produced");
  return out;
}

}  // namespace

std::vector<std::array<std::uint32_t, 3>> delaunay_triangles(std::span<const Vec2> points) {
  return bowyer_watson(points);
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> delaunay(std::span<const Vec2> points) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  for (const auto& t : bowyer_watson(points)) {
    for (int a = 0; a < 3; ++a) {
      std::uint32_t u = t[a], v = t[(a + 1) % 3];
      if (u > v) std::swap(u, v);
      edges.emplace_back(u, v);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<std::uint32_t> furthest_point_sampling(std::span<const Vec2> points, std::size_t k,
                                                   std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k < 1 || k > n) {
    throw InvalidArgument("furthest_point_sampling: k=" + std::to_string(k) +
                          " outside [1, " + std::to_string(n) + "]");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> chosen;
  chosen.reserve(k);
  chosen.push_back(static_cast<std::uint32_t>(rng() % n));
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const Vec2 last = points[chosen.back()];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2 d = points[i] - last;
      mind[i] = std::min(mind[i], dot(d, d));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    chosen.push_back(static_cast<std::uint32_t>(best));
  }
  return chosen;
}

Graph2D Graph2D::build(std::span<const Vec2> positions,
                       std::span<const std::pair<std::uint32_t, std::uint32_t>> undirected,
                       std::span<const Vec2> normals) {
  Graph2D g;
  g.positions = center_of_mass_zero(positions);
  const std::size_t n = positions.size();
  g.edges.reserve(undirected.size() * 2);
  for (const auto& [a, b] : undirected) {
    if (a >= n || b >= n) throw InvalidArgument("Graph2D: edge index out of range");
    if (a == b) throw InvalidArgument("Graph2D: self loop");
    g.edges.push_back({a, b});
    g.edges.push_back({b, a});
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  g.global_angles = geom::global_angles(g.positions);
  if (normals.empty()) {
    g.boundary_normals.assign(n, Vec2{});
  } else {
    if (normals.size() != n) throw InvalidArgument("Graph2D: normals size mismatch");
    g.boundary_normals.assign(normals.begin(), normals.end());
  }
  return g;
}

Graph2D Graph2D::complete(std::span<const Vec2> positions) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> und;
  for (std::uint32_t a = 0; a < positions.size(); ++a) {
    for (std::uint32_t b = a + 1; b < positions.size(); ++b) und.emplace_back(a, b);
  }
  return build(positions, und);
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> Graph2D::undirected_edges() const {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (const Edge& e : edges) {
    if (e.i < e.j) out.emplace_back(e.i, e.j);
  }
  return out;
}

Graph2D Graph2D::transformed(Rot2 rot, Vec2 translation) const {
  const auto moved = transform_points(positions, rot, translation);
  std::vector<Vec2> normals;
  normals.reserve(boundary_normals.size());
  for (const Vec2& n : boundary_normals) normals.push_back(rot.apply(n));
  return build(moved, undirected_edges(), normals);
}

std::vector<Vec2> transform_points(std::span<const Vec2> points, Rot2 rot, Vec2 translation) {
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const Vec2& p : points) out.push_back(rot.apply(p) + translation);
  return out;
}

}  // namespace se2gnn::geom
