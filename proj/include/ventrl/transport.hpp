#pragma once

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <list>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ventrl/flowfields.hpp"
#include "ventrl/mesh.hpp"

namespace ventrl {

using SpMat = Eigen::SparseMatrix<double>;
using SourceFn = std::function<double(double, double)>;

struct TransportParams {
  double diffusivity = 0.022;      // pathogen, m^2/s
  double diffusivity_hp = 0.022;   // disinfectant, m^2/s
  double removal_rate = 0.0085;    // HVAC air exchange, pathogen, 1/s
  double removal_rate_hp = 0.0085; // HVAC air exchange, disinfectant, 1/s
  double neutralization = 0.2;     // pathogen sink coefficient, m^2/(particle s)
  double consumption = 0.2;        // disinfectant sink coefficient, m^2/(particle s)
  double dt = 1.0;                 // s
  bool streamline_stabilization = false;  // SUPG for strongly advective runs

  enum class Solver { Auto, Direct, Iterative };
  Solver solver = Solver::Auto;

  void validate() const {
    if (!(diffusivity > 0.0) || !(diffusivity_hp > 0.0)) {
      throw std::invalid_argument("transport: diffusivities must be positive");
    }
    if (removal_rate < 0.0 || removal_rate_hp < 0.0) {
      throw std::invalid_argument("transport: removal rates must be >= 0");
    }
    if (!(dt > 0.0)) throw std::invalid_argument("transport: dt must be positive");
  }
};

/// Nodal values of a P1 function on the mesh (concentration surrogate).
struct ScalarField {
  const Mesh* mesh = nullptr;
  Eigen::VectorXd values;

  static ScalarField zero(const Mesh& m) {
    return {&m, Eigen::VectorXd::Zero(m.vertex_count())};
  }
};

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PicardError : std::runtime_error {
  PicardError(int iters, double change)
      : std::runtime_error("coupled step: Picard iteration did not converge (" +
                           std::to_string(iters) + " iterations, last change " +
                           std::to_string(change) + ")"),
        iterations(iters),
        last_change(change) {}
  int iterations;
  double last_change;
};

namespace fem {

// Gradients of the barycentric basis on one triangle, and its area.
struct CellGeometry {
  double area;
  std::array<Vec2, 3> grad;     // grad of each nodal basis function
  std::array<Vec2, 3> quad;     // edge midpoints m01, m12, m20
  double longest_edge;
};

inline CellGeometry cell_geometry(const Mesh& mesh, int c) {
  const auto& cell = mesh.cells[c];
  const Vec2 p0 = mesh.vertices[cell[0]];
  const Vec2 p1 = mesh.vertices[cell[1]];
  const Vec2 p2 = mesh.vertices[cell[2]];
  CellGeometry g;
  const double det = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
  g.area = 0.5 * det;
  g.grad[0] = {(p1.y - p2.y) / det, (p2.x - p1.x) / det};
  g.grad[1] = {(p2.y - p0.y) / det, (p0.x - p2.x) / det};
  g.grad[2] = {(p0.y - p1.y) / det, (p1.x - p0.x) / det};
  g.quad[0] = {0.5 * (p0.x + p1.x), 0.5 * (p0.y + p1.y)};
  g.quad[1] = {0.5 * (p1.x + p2.x), 0.5 * (p1.y + p2.y)};
  g.quad[2] = {0.5 * (p2.x + p0.x), 0.5 * (p2.y + p0.y)};
  auto len = [](Vec2 a, Vec2 b) { return std::hypot(b.x - a.x, b.y - a.y); };
  g.longest_edge = std::max({len(p0, p1), len(p1, p2), len(p2, p0)});
  return g;
}

// Basis values at the three edge-midpoint quadrature points (row: point,
// column: local vertex). The rule is exact for quadratics, hence for every
// P1 x P1 product in the forms below.
inline constexpr double kPhi[3][3] = {
    {0.5, 0.5, 0.0},
    {0.0, 0.5, 0.5},
    {0.5, 0.0, 0.5},
};

/// Load vector (f, phi_i) by the midpoint-edge rule.
inline Eigen::VectorXd load_vector(const Mesh& mesh, const SourceFn& f) {
  Eigen::VectorXd load = Eigen::VectorXd::Zero(mesh.vertex_count());
  for (int c = 0; c < mesh.cell_count(); ++c) {
    const auto g = cell_geometry(mesh, c);
    const auto& cell = mesh.cells[c];
    const double w = g.area / 3.0;
    for (int q = 0; q < 3; ++q) {
      const double fq = w * f(g.quad[q].x, g.quad[q].y);
      for (int k = 0; k < 3; ++k) {
        if (kPhi[q][k] != 0.0) load[cell[k]] += fq * kPhi[q][k];
      }
    }
  }
  return load;
}

/// Velocity-independent and velocity-dependent Galerkin blocks.
///
/// The advection block uses the integrated-by-parts form
///   -(c v, grad w) + <c w, v.n>_walls,
/// equal to (v.grad c, w) for the continuous problem. Its column sums vanish
/// identically at the quadrature level, which makes the discrete mass budget
/// of a step close exactly whenever the wall flux is zero.
struct Blocks {
  SpMat mass;
  SpMat stiffness;
  SpMat advection;
  double max_speed = 0.0;
};

inline Blocks assemble_blocks(const Mesh& mesh, const VelocityField& field) {
  const int nv = mesh.vertex_count();
  std::vector<Eigen::Triplet<double>> tm, ts, ta;
  tm.reserve(mesh.cells.size() * 9);
  ts.reserve(mesh.cells.size() * 9);
  ta.reserve(mesh.cells.size() * 9 + 6 * (mesh.spec.nx + mesh.spec.ny));
  double max_speed = 0.0;

  for (int c = 0; c < mesh.cell_count(); ++c) {
    const auto g = cell_geometry(mesh, c);
    const auto& cell = mesh.cells[c];
    std::array<Vec2, 3> vq;
    for (int q = 0; q < 3; ++q) {
      vq[q] = field.at(g.quad[q].x, g.quad[q].y);
      max_speed = std::max(max_speed, std::hypot(vq[q].x, vq[q].y));
    }
    const double w = g.area / 3.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double mij = g.area / 12.0 * (i == j ? 2.0 : 1.0);
        tm.emplace_back(cell[i], cell[j], mij);
        const double sij = g.area * (g.grad[i].x * g.grad[j].x +
                                     g.grad[i].y * g.grad[j].y);
        ts.emplace_back(cell[i], cell[j], sij);
        double aij = 0.0;
        for (int q = 0; q < 3; ++q) {
          aij -= w * kPhi[q][j] *
                 (vq[q].x * g.grad[i].x + vq[q].y * g.grad[i].y);
        }
        ta.emplace_back(cell[i], cell[j], aij);
      }
    }
  }

  // Wall flux <c w, v.n>. Boundary edges are the cell edges seen only once.
  struct EdgeInfo {
    int a, b;
    int count;
  };
  std::unordered_map<std::uint64_t, EdgeInfo> edges;
  edges.reserve(mesh.cells.size() * 2);
  for (const auto& cell : mesh.cells) {
    for (int e = 0; e < 3; ++e) {
      const int a = cell[e];
      const int b = cell[(e + 1) % 3];
      const std::uint64_t key =
          (static_cast<std::uint64_t>(std::min(a, b)) << 32) |
          static_cast<std::uint32_t>(std::max(a, b));
      auto [it, inserted] = edges.try_emplace(key, EdgeInfo{a, b, 0});
      it->second.count += 1;
      if (inserted) it->second = EdgeInfo{a, b, 1};
    }
  }
  // Two-point Gauss rule on each wall edge, exact for the cubic c*w*(v.n)
  // when v.n is linear along the edge.
  const double gauss = 0.5 / std::sqrt(3.0);
  for (const auto& [key, e] : edges) {
    if (e.count != 1) continue;
    const Vec2 pa = mesh.vertices[e.a];
    const Vec2 pb = mesh.vertices[e.b];
    const double ex = pb.x - pa.x;
    const double ey = pb.y - pa.y;
    const double len = std::hypot(ex, ey);
    // CCW cells: outward normal is the right-hand perpendicular.
    const Vec2 n{ey / len, -ex / len};
    for (const double t : {0.5 - gauss, 0.5 + gauss}) {
      const Vec2 p{pa.x + t * ex, pa.y + t * ey};
      const Vec2 v = field.at(p.x, p.y);
      const double vn = v.x * n.x + v.y * n.y;
      if (vn == 0.0) continue;
      const double w = 0.5 * len * vn;
      const double phi[2] = {1.0 - t, t};
      const int idx[2] = {e.a, e.b};
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          ta.emplace_back(idx[i], idx[j], w * phi[i] * phi[j]);
        }
      }
    }
  }

  Blocks blocks;
  blocks.mass.resize(nv, nv);
  blocks.mass.setFromTriplets(tm.begin(), tm.end());
  blocks.stiffness.resize(nv, nv);
  blocks.stiffness.setFromTriplets(ts.begin(), ts.end());
  blocks.advection.resize(nv, nv);
  blocks.advection.setFromTriplets(ta.begin(), ta.end());
  blocks.max_speed = max_speed;
  return blocks;
}

/// Fills a weighted mass matrix W(g)_ij = (g phi_i phi_j) into a matrix with
/// the mass pattern, reusing precomputed scatter offsets.
class WeightedMassAssembler {
 public:
  WeightedMassAssembler(const Mesh& mesh, const SpMat& mass_pattern)
      : mesh_(&mesh), w_(mass_pattern) {
    offsets_.resize(mesh.cells.size() * 9);
    std::size_t k = 0;
    for (const auto& cell : mesh.cells) {
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          offsets_[k++] = storage_offset(w_, cell[i], cell[j]);
        }
      }
    }
  }

  /// g given by nodal values; evaluated at edge midpoints.
  const SpMat& fill(const Eigen::VectorXd& g) {
    std::fill(w_.valuePtr(), w_.valuePtr() + w_.nonZeros(), 0.0);
    std::size_t k = 0;
    for (int c = 0; c < mesh_->cell_count(); ++c) {
      const auto geom = cell_geometry(*mesh_, c);
      const auto& cell = mesh_->cells[c];
      const double w = geom.area / 3.0;
      const double gq[3] = {0.5 * (g[cell[0]] + g[cell[1]]),
                            0.5 * (g[cell[1]] + g[cell[2]]),
                            0.5 * (g[cell[2]] + g[cell[0]])};
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          double acc = 0.0;
          for (int q = 0; q < 3; ++q) acc += gq[q] * kPhi[q][i] * kPhi[q][j];
          w_.valuePtr()[offsets_[k++]] += w * acc;
        }
      }
    }
    return w_;
  }

  static Eigen::Index storage_offset(const SpMat& m, int row, int col) {
    for (Eigen::Index p = m.outerIndexPtr()[col]; p < m.outerIndexPtr()[col + 1];
         ++p) {
      if (m.innerIndexPtr()[p] == row) return p;
    }
    throw std::logic_error("weighted mass: entry missing from mass pattern");
  }

 private:
  const Mesh* mesh_;
  SpMat w_;
  std::vector<Eigen::Index> offsets_;
};

}  // namespace fem

namespace detail {

inline std::uint64_t double_bits(double v) {
  std::uint64_t b;
  std::memcpy(&b, &v, sizeof(b));
  return b;
}

inline void warn_peclet_once(double peclet) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    std::fprintf(stderr,
                 "ventrl: warning: cell Peclet number %.2f exceeds 5; plain "
                 "Galerkin transport may oscillate (enable "
                 "streamline_stabilization to damp)\n",
                 peclet);
  }
}

}  // namespace detail

/// Cache key for one single-species step operator.
inline std::uint64_t step_operator_fingerprint(const MeshSpec& spec,
                                               const VelocityField& field,
                                               double diffusivity,
                                               double removal_rate, double dt,
                                               bool supg) {
  std::uint64_t h = field.fingerprint();
  for (double v :
       {diffusivity, removal_rate, dt, spec.lx, spec.ly,
        static_cast<double>(spec.nx), static_cast<double>(spec.ny),
        supg ? 1.0 : 0.0}) {
    h = RandomStream::mix(h, detail::double_bits(v));
  }
  return h;
}

/// One implicit-Euler step operator for a single species:
///   (M/dt + Adv + k*Stiff + removal*M) c_next = M c_prev / dt + load.
/// Immutable once built; reusable while its fingerprint matches the inputs.
class AssembledOperator {
 public:
  AssembledOperator(const Mesh& mesh, const VelocityField& field,
                    double diffusivity, double removal_rate,
                    const TransportParams& params)
      : mesh_(&mesh),
        field_(field),
        diffusivity_(diffusivity),
        removal_rate_(removal_rate),
        dt_(params.dt),
        supg_(params.streamline_stabilization) {
    params.validate();
    if (std::abs(field.room_lx() - mesh.spec.lx) > 1e-12 ||
        std::abs(field.room_ly() - mesh.spec.ly) > 1e-12) {
      throw std::invalid_argument(
          "assemble: velocity field and mesh disagree on room dimensions");
    }
    fem::Blocks blocks = fem::assemble_blocks(mesh, field);
    mass_ = std::move(blocks.mass);
    system_ = mass_ * (1.0 / dt_ + removal_rate_) + blocks.advection +
              diffusivity_ * blocks.stiffness;
    rhs_mass_ = mass_ * (1.0 / dt_);

    const double h = std::max(mesh.spec.lx / mesh.spec.nx,
                              mesh.spec.ly / mesh.spec.ny);
    peclet_ = blocks.max_speed * h / (2.0 * diffusivity_);
    if (peclet_ > 5.0 && !supg_) detail::warn_peclet_once(peclet_);
    if (supg_) add_supg_terms();

    lumped_mass_ = mass_ * Eigen::VectorXd::Ones(mass_.rows());

    fingerprint_ = step_operator_fingerprint(mesh.spec, field, diffusivity_,
                                             removal_rate_, dt_, supg_);

    use_direct_ = params.solver == TransportParams::Solver::Direct ||
                  (params.solver == TransportParams::Solver::Auto &&
                   mesh.vertex_count() <= 200000);
    if (use_direct_) {
      lu_ = std::make_unique<Eigen::SparseLU<SpMat>>();
      lu_->compute(system_);
      if (lu_->info() != Eigen::Success) {
        throw SolverError("assemble: singular step operator (fingerprint " +
                          std::to_string(fingerprint_) + ")");
      }
    } else {
      krylov_ = std::make_unique<
          Eigen::BiCGSTAB<SpMat, Eigen::IncompleteLUT<double>>>();
      krylov_->setTolerance(1e-12);
      krylov_->compute(system_);
      if (krylov_->info() != Eigen::Success) {
        throw SolverError("assemble: Krylov setup failed (fingerprint " +
                          std::to_string(fingerprint_) + ")");
      }
    }
  }

  const Mesh& mesh() const { return *mesh_; }
  const VelocityField& field() const { return field_; }
  const SpMat& system() const { return system_; }
  const SpMat& mass() const { return mass_; }
  double dt() const { return dt_; }
  double removal_rate() const { return removal_rate_; }
  double cell_peclet() const { return peclet_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

  /// Integral of a P1 field over the room (exact row-sum weights).
  double integral(const ScalarField& c) const {
    return lumped_mass_.dot(c.values);
  }
  const Eigen::VectorXd& lumped_mass() const { return lumped_mass_; }

  Eigen::VectorXd rhs(const ScalarField& c_prev,
                      const Eigen::VectorXd& load) const {
    Eigen::VectorXd b = rhs_mass_ * c_prev.values + load;
    return b;
  }

  /// Source load including any stabilization contribution.
  Eigen::VectorXd load(const SourceFn& f) const {
    Eigen::VectorXd l = fem::load_vector(*mesh_, f);
    if (supg_) l += supg_load(f);
    return l;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x;
    if (use_direct_) {
      x = lu_->solve(b);
    } else {
      x = krylov_->solve(b);
    }
    const double bn = b.norm();
    const double resid = (system_ * x - b).norm();
    if (!x.allFinite() || resid > 1e-10 * std::max(bn, 1e-300)) {
      throw SolverError("transport solve: residual " + std::to_string(resid) +
                        " exceeds tolerance (fingerprint " +
                        std::to_string(fingerprint_) + ")");
    }
    return x;
  }

 private:
  // SUPG streamline stabilization: tau (v.grad w) tested against the
  // discrete residual (diffusion term vanishes for P1).
  void add_supg_terms() {
    std::vector<Eigen::Triplet<double>> tsys;
    tsys.reserve(mesh_->cells.size() * 9);
    std::vector<Eigen::Triplet<double>> trhs;
    trhs.reserve(mesh_->cells.size() * 9);
    supg_cell_tau_.assign(mesh_->cells.size(), 0.0);
    for (int c = 0; c < mesh_->cell_count(); ++c) {
      const auto g = fem::cell_geometry(*mesh_, c);
      const auto& cell = mesh_->cells[c];
      std::array<Vec2, 3> vq;
      double speed = 0.0;
      for (int q = 0; q < 3; ++q) {
        vq[q] = field_.at(g.quad[q].x, g.quad[q].y);
        speed += std::hypot(vq[q].x, vq[q].y) / 3.0;
      }
      const double h = g.longest_edge;
      const double pe = speed * h / (2.0 * diffusivity_);
      double xi;  // coth(pe) - 1/pe, series-expanded near zero
      if (pe < 1e-4) {
        xi = pe / 3.0;
      } else {
        xi = 1.0 / std::tanh(pe) - 1.0 / pe;
      }
      const double tau = speed > 0.0 ? h / (2.0 * speed) * xi : 0.0;
      supg_cell_tau_[c] = tau;
      if (tau == 0.0) continue;
      const double w = g.area / 3.0;
      for (int q = 0; q < 3; ++q) {
        std::array<double, 3> stream;  // v.grad(phi_i) at this point
        for (int i = 0; i < 3; ++i) {
          stream[i] = vq[q].x * g.grad[i].x + vq[q].y * g.grad[i].y;
        }
        for (int i = 0; i < 3; ++i) {
          const double ti = tau * w * stream[i];
          for (int j = 0; j < 3; ++j) {
            // Residual part on the new level: c/dt + v.grad c + removal*c.
            const double r =
                fem::kPhi[q][j] * (1.0 / dt_ + removal_rate_) + stream[j];
            tsys.emplace_back(cell[i], cell[j], ti * r);
            // Old level and source enter the right-hand side with weight
            // 1/dt on the mass-like part.
            trhs.emplace_back(cell[i], cell[j], ti * fem::kPhi[q][j] / dt_);
          }
        }
      }
    }
    SpMat sys_extra(mesh_->vertex_count(), mesh_->vertex_count());
    sys_extra.setFromTriplets(tsys.begin(), tsys.end());
    system_ += sys_extra;
    SpMat rhs_extra(mesh_->vertex_count(), mesh_->vertex_count());
    rhs_extra.setFromTriplets(trhs.begin(), trhs.end());
    rhs_mass_ += rhs_extra;
  }

  Eigen::VectorXd supg_load(const SourceFn& f) const {
    Eigen::VectorXd l = Eigen::VectorXd::Zero(mesh_->vertex_count());
    for (int c = 0; c < mesh_->cell_count(); ++c) {
      const double tau = supg_cell_tau_[c];
      if (tau == 0.0) continue;
      const auto g = fem::cell_geometry(*mesh_, c);
      const auto& cell = mesh_->cells[c];
      const double w = g.area / 3.0;
      for (int q = 0; q < 3; ++q) {
        const Vec2 v = field_.at(g.quad[q].x, g.quad[q].y);
        const double fq = f(g.quad[q].x, g.quad[q].y);
        for (int i = 0; i < 3; ++i) {
          const double stream = v.x * g.grad[i].x + v.y * g.grad[i].y;
          l[cell[i]] += tau * w * stream * fq;
        }
      }
    }
    return l;
  }

  const Mesh* mesh_;
  VelocityField field_;
  double diffusivity_;
  double removal_rate_;
  double dt_;
  bool supg_;
  double peclet_ = 0.0;
  SpMat system_;
  SpMat mass_;
  SpMat rhs_mass_;
  Eigen::VectorXd lumped_mass_;
  std::vector<double> supg_cell_tau_;
  std::uint64_t fingerprint_ = 0;
  bool use_direct_ = true;
  std::unique_ptr<Eigen::SparseLU<SpMat>> lu_;
  std::unique_ptr<Eigen::BiCGSTAB<SpMat, Eigen::IncompleteLUT<double>>> krylov_;
};

/// Pathogen-species step operator per the transport parameters.
inline AssembledOperator assemble_step_operator(const Mesh& mesh,
                                                const VelocityField& field,
                                                const TransportParams& params) {
  return AssembledOperator(mesh, field, params.diffusivity,
                           params.removal_rate, params);
}

/// One implicit-Euler step for a single species.
inline ScalarField step_single(const AssembledOperator& op,
                               const ScalarField& c_prev,
                               const Eigen::VectorXd& load) {
  if (c_prev.values.size() != op.mesh().vertex_count()) {
    throw std::invalid_argument("step: field size does not match mesh");
  }
  ScalarField next{&op.mesh(), op.solve(op.rhs(c_prev, load))};
  return next;
}

inline ScalarField step_single(const AssembledOperator& op,
                               const ScalarField& c_prev, const SourceFn& f) {
  return step_single(op, c_prev, op.load(f));
}

}  // namespace ventrl
