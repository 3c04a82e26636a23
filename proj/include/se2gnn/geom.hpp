#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace se2gnn::geom {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

double norm(Vec2 v);
double dot(Vec2 a, Vec2 b);

/// Planar rotation stored as (cos, sin).
struct Rot2 {
  double cos = 1.0;
  double sin = 0.0;

  Vec2 apply(Vec2 v) const { return {cos * v.x - sin * v.y, sin * v.x + cos * v.y}; }
  Vec2 apply_inverse(Vec2 v) const { return {cos * v.x + sin * v.y, -sin * v.x + cos * v.y}; }
  Rot2 inverse() const { return {cos, -sin}; }
  /// (*this) after `other`.
  Rot2 compose(Rot2 other) const {
    return {cos * other.cos - sin * other.sin, sin * other.cos + cos * other.sin};
  }
};

/// Throws InvalidArgument for non-finite angles.
Rot2 rotation_matrix(double theta);

/// Directed edge. Messages flow from `j` (source) into `i` (receiver).
struct Edge {
  std::uint32_t i = 0;
  std::uint32_t j = 0;
  friend bool operator==(Edge a, Edge b) = default;
  friend auto operator<=>(Edge a, Edge b) = default;
};

struct EdgeGeometry {
  Vec2 rel_vec;      ///< r_j - r_i
  double dist = 0.0;
  Vec2 unit_vec;
  double theta = 0.0;  ///< -atan2(unit_vec.y, unit_vec.x), aligns unit_vec with +x
};

/// Per-edge relative geometry. Throws DegenerateEdge when the two nodes coincide
/// and InvalidArgument for out-of-range indices.
std::vector<EdgeGeometry> edge_geometry(std::span<const Vec2> positions,
                                        std::span<const Edge> edges);

/// Angle that rotates each centered position onto the +x axis; 0 for nodes at the origin.
std::vector<double> global_angles(std::span<const Vec2> centered_positions);

std::vector<Vec2> center_of_mass_zero(std::span<const Vec2> positions);

struct RadialBasisConfig {
  int n_base = 8;
  double cutoff = 1.0;
};

/// b_n(r) = sqrt(2/c) sin(n pi r / c) / r, n = 1..n_base, with r clamped to >= 1e-6.
std::vector<double> bessel_basis(double dist, const RadialBasisConfig& cfg);

/// Bowyer-Watson Delaunay triangulation. Returns the deduplicated undirected
/// edge list with first < second.
std::vector<std::pair<std::uint32_t, std::uint32_t>> delaunay(std::span<const Vec2> points);

/// Same triangulation as `delaunay`, returned as counter-clockwise triangles.
std::vector<std::array<std::uint32_t, 3>> delaunay_triangles(std::span<const Vec2> points);

std::vector<std::uint32_t> furthest_point_sampling(std::span<const Vec2> points, std::size_t k,
                                                   std::uint64_t seed);

/// Irregular computational domain. Positions are stored centered.
struct Graph2D {
  std::vector<Vec2> positions;
  std::vector<Edge> edges;
  std::vector<double> global_angles;
  std::vector<Vec2> boundary_normals;

  std::size_t num_nodes() const { return positions.size(); }

  /// Centers `positions`, expands `undirected` into both directions (sorted) and
  /// computes the per-node global angles. `normals` may be empty (all zero).
  static Graph2D build(std::span<const Vec2> positions,
                       std::span<const std::pair<std::uint32_t, std::uint32_t>> undirected,
                       std::span<const Vec2> normals = {});

  /// Complete directed graph on the given points.
  static Graph2D complete(std::span<const Vec2> positions);

  /// Each undirected edge once, as (i, j) with i < j.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> undirected_edges() const;

  /// Same connectivity with positions mapped by x -> R x + t (then re-centered)
  /// and boundary normals rotated.
  Graph2D transformed(Rot2 rot, Vec2 translation) const;
};

/// Rotates every position by `rot` and then translates it.
std::vector<Vec2> transform_points(std::span<const Vec2> points, Rot2 rot, Vec2 translation);

}  // namespace se2gnn::geom
