#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "ventrl/transport.hpp"

namespace ventrl {

/// Implicit-Euler stepping of the coupled pathogen/disinfectant system.
///
/// Both species share the velocity field; the bilinear interaction acts as a
/// sink on each (disinfection consumes pathogen and disinfectant alike). The
/// implicit nonlinearity is resolved by Picard iteration with the partner
/// species lagged one iterate, so identical parameters keep the two fields
/// bit-identical.
class CoupledStepper {
 public:
  static constexpr double kPicardTolerance = 1e-10;
  static constexpr int kMaxPicardIterations = 25;

  CoupledStepper(const Mesh& mesh, const VelocityField& field,
                 const TransportParams& params)
      : mesh_(&mesh), field_(field), params_(params) {
    params.validate();
    if (params.streamline_stabilization) {
      throw std::invalid_argument(
          "coupled step: streamline stabilization only supports the "
          "single-species path");
    }
    fem::Blocks blocks = fem::assemble_blocks(mesh, field);
    mass_ = std::move(blocks.mass);
    const SpMat shared = blocks.advection;
    base_c_ = mass_ * (1.0 / params.dt + params.removal_rate) + shared +
              params.diffusivity * blocks.stiffness;
    base_hp_ = mass_ * (1.0 / params.dt + params.removal_rate_hp) + shared +
               params.diffusivity_hp * blocks.stiffness;
    lumped_mass_ = mass_ * Eigen::VectorXd::Ones(mass_.rows());

    weighted_ = std::make_unique<fem::WeightedMassAssembler>(mesh, mass_);
    // The interaction matrix has the mass pattern, a subset of the system
    // pattern; precompute scatter offsets so each Picard iterate only
    // copies values and refactorizes.
    const SpMat& w = weighted_->fill(Eigen::VectorXd::Zero(mesh.vertex_count()));
    w_to_sys_.reserve(w.nonZeros());
    for (int col = 0; col < w.outerSize(); ++col) {
      for (SpMat::InnerIterator it(w, col); it; ++it) {
        w_to_sys_.push_back(fem::WeightedMassAssembler::storage_offset(
            base_c_, static_cast<int>(it.row()), col));
      }
    }
    sys_c_ = base_c_;
    sys_hp_ = base_hp_;
    lu_c_.analyzePattern(sys_c_);
    lu_hp_.analyzePattern(sys_hp_);

    fingerprint_ = RandomStream::mix(
        step_operator_fingerprint(mesh.spec, field, params.diffusivity,
                                  params.removal_rate, params.dt, false),
        step_operator_fingerprint(mesh.spec, field, params.diffusivity_hp,
                                  params.removal_rate_hp, params.dt, false));
    fingerprint_ = RandomStream::mix(
        fingerprint_, detail::double_bits(params.neutralization));
    fingerprint_ = RandomStream::mix(fingerprint_,
                                     detail::double_bits(params.consumption));
  }

  struct Result {
    ScalarField c;
    ScalarField c_hp;
    int picard_iterations = 0;
    double last_change = 0.0;
  };

  Result step(const ScalarField& c_prev, const ScalarField& chp_prev,
              const SourceFn& src_c, const SourceFn& src_hp) {
    return step(c_prev, chp_prev, fem::load_vector(*mesh_, src_c),
                fem::load_vector(*mesh_, src_hp));
  }

  Result step(const ScalarField& c_prev, const ScalarField& chp_prev,
              const Eigen::VectorXd& load_c, const Eigen::VectorXd& load_hp) {
    const int nv = mesh_->vertex_count();
    if (c_prev.values.size() != nv || chp_prev.values.size() != nv) {
      throw std::invalid_argument("coupled step: field size does not match mesh");
    }
    const double inv_dt = 1.0 / params_.dt;
    const Eigen::VectorXd rhs_c = mass_ * (inv_dt * c_prev.values) + load_c;
    const Eigen::VectorXd rhs_hp = mass_ * (inv_dt * chp_prev.values) + load_hp;

    Result out;
    out.c.mesh = mesh_;
    out.c_hp.mesh = mesh_;

    const bool interaction_off =
        params_.neutralization == 0.0 && params_.consumption == 0.0;
    const bool hp_inert = (chp_prev.values.array() == 0.0).all() &&
                          (load_hp.array() == 0.0).all();
    if (interaction_off || hp_inert) {
      // The systems decouple (or the disinfectant stays identically zero);
      // solve with the cached base factorizations.
      ensure_base_factorizations();
      out.c.values = checked_solve(*base_lu_c_, base_c_, rhs_c);
      if (hp_inert && !interaction_off) {
        out.c_hp.values = Eigen::VectorXd::Zero(nv);
      } else {
        out.c_hp.values = checked_solve(*base_lu_hp_, base_hp_, rhs_hp);
      }
      out.picard_iterations = 0;
      return out;
    }

    Eigen::VectorXd c_k = c_prev.values;
    Eigen::VectorXd chp_k = chp_prev.values;
    double change = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= kMaxPicardIterations; ++it) {
      // Pathogen equation with the disinfectant iterate lagged, and vice
      // versa (Jacobi-style lagging preserves the symmetry of the system).
      fill_system(sys_c_, base_c_, params_.neutralization, chp_k);
      lu_c_.factorize(sys_c_);
      if (lu_c_.info() != Eigen::Success) {
        throw SolverError("coupled step: pathogen system factorization failed");
      }
      Eigen::VectorXd c_next = checked_solve(lu_c_, sys_c_, rhs_c);

      fill_system(sys_hp_, base_hp_, params_.consumption, c_k);
      lu_hp_.factorize(sys_hp_);
      if (lu_hp_.info() != Eigen::Success) {
        throw SolverError("coupled step: disinfectant system factorization failed");
      }
      Eigen::VectorXd chp_next = checked_solve(lu_hp_, sys_hp_, rhs_hp);

      change = std::max((c_next - c_k).norm(), (chp_next - chp_k).norm());
      c_k = std::move(c_next);
      chp_k = std::move(chp_next);
      if (change < kPicardTolerance) {
        out.c.values = std::move(c_k);
        out.c_hp.values = std::move(chp_k);
        out.picard_iterations = it;
        out.last_change = change;
        return out;
      }
    }
    throw PicardError(kMaxPicardIterations, change);
  }

  std::uint64_t fingerprint() const { return fingerprint_; }
  const Mesh& mesh() const { return *mesh_; }
  const SpMat& mass() const { return mass_; }
  double integral(const ScalarField& c) const { return lumped_mass_.dot(c.values); }

 private:
  void fill_system(SpMat& sys, const SpMat& base, double coeff,
                   const Eigen::VectorXd& partner) {
    sys = base;
    const SpMat& w = weighted_->fill(partner);
    const double* wv = w.valuePtr();
    double* sv = sys.valuePtr();
    for (std::size_t k = 0; k < w_to_sys_.size(); ++k) {
      sv[w_to_sys_[k]] += coeff * wv[k];
    }
  }

  void ensure_base_factorizations() {
    if (!base_lu_c_) {
      base_lu_c_ = std::make_unique<Eigen::SparseLU<SpMat>>();
      base_lu_c_->compute(base_c_);
      if (base_lu_c_->info() != Eigen::Success) {
        throw SolverError("coupled step: singular pathogen base operator");
      }
    }
    if (!base_lu_hp_) {
      base_lu_hp_ = std::make_unique<Eigen::SparseLU<SpMat>>();
      base_lu_hp_->compute(base_hp_);
      if (base_lu_hp_->info() != Eigen::Success) {
        throw SolverError("coupled step: singular disinfectant base operator");
      }
    }
  }

  static Eigen::VectorXd checked_solve(const Eigen::SparseLU<SpMat>& lu,
                                       const SpMat& a,
                                       const Eigen::VectorXd& b) {
    Eigen::VectorXd x = lu.solve(b);
    const double resid = (a * x - b).norm();
    if (!x.allFinite() || resid > 1e-10 * std::max(b.norm(), 1e-300)) {
      throw SolverError("coupled step: solve residual " +
                        std::to_string(resid) + " exceeds tolerance");
    }
    return x;
  }

  const Mesh* mesh_;
  VelocityField field_;
  TransportParams params_;
  SpMat mass_, base_c_, base_hp_, sys_c_, sys_hp_;
  Eigen::VectorXd lumped_mass_;
  std::unique_ptr<fem::WeightedMassAssembler> weighted_;
  std::vector<Eigen::Index> w_to_sys_;
  Eigen::SparseLU<SpMat> lu_c_, lu_hp_;
  std::unique_ptr<Eigen::SparseLU<SpMat>> base_lu_c_, base_lu_hp_;
  std::uint64_t fingerprint_ = 0;
};

/// One coupled implicit step (convenience wrapper; episode loops keep a
/// CoupledStepper so the assembly is reused across steps).
inline std::pair<ScalarField, ScalarField> step_coupled(
    const Mesh& mesh, const VelocityField& field, const TransportParams& params,
    const ScalarField& c_prev, const ScalarField& chp_prev,
    const SourceFn& src_c, const SourceFn& src_hp) {
  CoupledStepper stepper(mesh, field, params);
  auto result = stepper.step(c_prev, chp_prev, src_c, src_hp);
  return {std::move(result.c), std::move(result.c_hp)};
}

}  // namespace ventrl
