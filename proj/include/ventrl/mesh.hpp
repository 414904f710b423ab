#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ventrl/io.hpp"

namespace ventrl {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Structured triangulation of the rectangular room [0,lx] x [0,ly]:
/// nx-by-ny rectangles, each split into two triangles.
struct MeshSpec {
  double lx = 8.0;  // room length, m
  double ly = 4.0;  // room height, m
  int nx = 80;      // rectangles in x
  int ny = 40;      // rectangles in y

  void validate() const {
    if (!(lx > 0.0) || !(ly > 0.0)) {
      throw std::invalid_argument("mesh: room dimensions must be positive");
    }
    if (nx < 1 || ny < 1) {
      throw std::invalid_argument("mesh: nx and ny must be at least 1");
    }
  }

  int vertex_count() const { return (nx + 1) * (ny + 1); }
  int cell_count() const { return 2 * nx * ny; }
};

/// Immutable after construction; safe to share read-only across threads.
struct Mesh {
  MeshSpec spec;
  std::vector<Vec2> vertices;                // row-major from (0,0)
  std::vector<std::array<int, 3>> cells;     // CCW vertex triples
  std::vector<std::uint8_t> boundary_vertex; // 1 if on a wall

  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int cell_count() const { return static_cast<int>(cells.size()); }

  double signed_cell_area(int c) const {
    const Vec2& a = vertices[cells[c][0]];
    const Vec2& b = vertices[cells[c][1]];
    const Vec2& d = vertices[cells[c][2]];
    return 0.5 * ((b.x - a.x) * (d.y - a.y) - (d.x - a.x) * (b.y - a.y));
  }
};

/// Row-major vertex numbering: index(i, j) = j*(nx+1) + i. Each rectangle is
/// split along its lower-left -> upper-right diagonal so assembly is
/// deterministic.
inline Mesh build_mesh(const MeshSpec& spec) {
  spec.validate();
  Mesh mesh;
  mesh.spec = spec;
  const int nvx = spec.nx + 1;
  const int nvy = spec.ny + 1;
  mesh.vertices.reserve(static_cast<std::size_t>(nvx) * nvy);
  mesh.boundary_vertex.reserve(static_cast<std::size_t>(nvx) * nvy);
  for (int j = 0; j < nvy; ++j) {
    for (int i = 0; i < nvx; ++i) {
      // Division keeps the last row/column exactly on the room boundary.
      mesh.vertices.push_back(
          {spec.lx * static_cast<double>(i) / spec.nx,
           spec.ly * static_cast<double>(j) / spec.ny});
      const bool edge = (i == 0 || i == spec.nx || j == 0 || j == spec.ny);
      mesh.boundary_vertex.push_back(edge ? 1 : 0);
    }
  }
  mesh.cells.reserve(static_cast<std::size_t>(spec.cell_count()));
  for (int j = 0; j < spec.ny; ++j) {
    for (int i = 0; i < spec.nx; ++i) {
      const int v00 = j * nvx + i;
      const int v10 = v00 + 1;
      const int v01 = v00 + nvx;
      const int v11 = v01 + 1;
      mesh.cells.push_back({v00, v10, v11});
      mesh.cells.push_back({v00, v11, v01});
    }
  }
  return mesh;
}

/// Axis-aligned region of interest. Half-planes use infinite limits; the
/// effective region is always the intersection with the room.
struct Region {
  double x_min = -std::numeric_limits<double>::infinity();
  double x_max = std::numeric_limits<double>::infinity();
  double y_min = -std::numeric_limits<double>::infinity();
  double y_max = std::numeric_limits<double>::infinity();

  static Region box(double x0, double x1, double y0, double y1) {
    return Region{x0, x1, y0, y1};
  }
  static Region x_at_most(double x) {
    Region r;
    r.x_max = x;
    return r;
  }
  static Region entire_room() { return Region{}; }

  bool contains(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }

  /// Analytic area of the region clipped to the room.
  double area_in(const MeshSpec& spec) const {
    const double w = std::max(0.0, std::min(x_max, spec.lx) - std::max(x_min, 0.0));
    const double h = std::max(0.0, std::min(y_max, spec.ly) - std::max(y_min, 0.0));
    return w * h;
  }
};

namespace detail {

// Convex polygon with small fixed capacity (triangle clipped by 4 planes).
struct ClipPoly {
  std::array<Vec2, 8> pts;
  int n = 0;
  void push(Vec2 p) { pts[n++] = p; }
};

// Clip against half-plane keep(p) >= 0 where keep is affine.
template <typename F>
inline ClipPoly clip_halfplane(const ClipPoly& in, F&& keep) {
  ClipPoly out;
  for (int i = 0; i < in.n; ++i) {
    const Vec2 a = in.pts[i];
    const Vec2 b = in.pts[(i + 1) % in.n];
    const double fa = keep(a);
    const double fb = keep(b);
    if (fa >= 0.0) {
      out.push(a);
      if (fb < 0.0) {
        const double t = fa / (fa - fb);
        out.push({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
      }
    } else if (fb >= 0.0) {
      const double t = fa / (fa - fb);
      out.push({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
  }
  return out;
}

inline ClipPoly clip_to_region(const ClipPoly& tri, const Region& r) {
  ClipPoly p = tri;
  if (std::isfinite(r.x_min)) p = clip_halfplane(p, [&](Vec2 q) { return q.x - r.x_min; });
  if (p.n == 0) return p;
  if (std::isfinite(r.x_max)) p = clip_halfplane(p, [&](Vec2 q) { return r.x_max - q.x; });
  if (p.n == 0) return p;
  if (std::isfinite(r.y_min)) p = clip_halfplane(p, [&](Vec2 q) { return q.y - r.y_min; });
  if (p.n == 0) return p;
  if (std::isfinite(r.y_max)) p = clip_halfplane(p, [&](Vec2 q) { return r.y_max - q.y; });
  return p;
}

struct AreaCentroid {
  double area = 0.0;
  Vec2 centroid{0.0, 0.0};
};

inline AreaCentroid polygon_area_centroid(const ClipPoly& p) {
  if (p.n < 3) return {};
  double a2 = 0.0, cx = 0.0, cy = 0.0;
  for (int i = 0; i < p.n; ++i) {
    const Vec2& u = p.pts[i];
    const Vec2& v = p.pts[(i + 1) % p.n];
    const double cross = u.x * v.y - v.x * u.y;
    a2 += cross;
    cx += (u.x + v.x) * cross;
    cy += (u.y + v.y) * cross;
  }
  AreaCentroid out;
  out.area = 0.5 * a2;
  if (std::abs(a2) > 1e-300) {
    out.centroid = {cx / (3.0 * a2), cy / (3.0 * a2)};
  }
  return out;
}

// Barycentric coordinates of point q in triangle (a, b, c).
inline std::array<double, 3> barycentric(const Vec2& a, const Vec2& b,
                                         const Vec2& c, const Vec2& q) {
  const double det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
  const double l1 = ((q.x - a.x) * (c.y - a.y) - (c.x - a.x) * (q.y - a.y)) / det;
  const double l2 = ((b.x - a.x) * (q.y - a.y) - (q.x - a.x) * (b.y - a.y)) / det;
  return {1.0 - l1 - l2, l1, l2};
}

}  // namespace detail

/// Exact integration data for one region: per-cell clipped areas plus nodal
/// weights w such that w . c equals the integral of a P1 field over the
/// region (clipping removes mesh-resolution bias at region boundaries).
struct RegionMask {
  std::vector<double> cell_weights;  // area of cell intersected with region
  Eigen::VectorXd vertex_weights;    // P1 integration weights
  double total_weight = 0.0;         // sum of cell weights
};

inline RegionMask region_mask(const Mesh& mesh, const Region& region) {
  RegionMask mask;
  mask.cell_weights.assign(mesh.cells.size(), 0.0);
  mask.vertex_weights = Eigen::VectorXd::Zero(mesh.vertex_count());
  KahanSum total;
  for (int c = 0; c < mesh.cell_count(); ++c) {
    const auto& cell = mesh.cells[c];
    const Vec2& a = mesh.vertices[cell[0]];
    const Vec2& b = mesh.vertices[cell[1]];
    const Vec2& d = mesh.vertices[cell[2]];
    detail::ClipPoly tri;
    tri.push(a);
    tri.push(b);
    tri.push(d);
    const detail::ClipPoly clipped = detail::clip_to_region(tri, region);
    const auto ac = detail::polygon_area_centroid(clipped);
    if (ac.area <= 0.0) continue;
    mask.cell_weights[c] = ac.area;
    total.add(ac.area);
    // Integral of linear c over the clipped polygon = area * c(centroid).
    const auto lambda = detail::barycentric(a, b, d, ac.centroid);
    for (int k = 0; k < 3; ++k) {
      mask.vertex_weights[cell[k]] += ac.area * lambda[k];
    }
  }
  mask.total_weight = total.value();
  return mask;
}

/// Mesh dump for plotting: vertex table (id,x,y,boundary) and cell table
/// (id,v0,v1,v2).
inline void dump_mesh_csv(const Mesh& mesh,
                          const std::filesystem::path& vertex_path,
                          const std::filesystem::path& cell_path) {
  CsvFile vfile(vertex_path);
  vfile.row({"id", "x", "y", "boundary"});
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    vfile.row({cell(i), cell(mesh.vertices[i].x), cell(mesh.vertices[i].y),
               cell(static_cast<int>(mesh.boundary_vertex[i]))});
  }
  vfile.close();
  CsvFile cfile(cell_path);
  cfile.row({"id", "v0", "v1", "v2"});
  for (int i = 0; i < mesh.cell_count(); ++i) {
    cfile.row({cell(i), cell(mesh.cells[i][0]), cell(mesh.cells[i][1]),
               cell(mesh.cells[i][2])});
  }
  cfile.close();
}

}  // namespace ventrl
