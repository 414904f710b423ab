#pragma once

#include <functional>
#include <list>
#include <memory>
#include <optional>
#include <unordered_map>

#include "ventrl/coupled.hpp"
#include "ventrl/transport.hpp"

namespace ventrl {

/// LRU cache of step operators keyed by fingerprint. An operator is reused
/// only while mesh, velocity parameters, and physics all match.
class OperatorCache {
 public:
  explicit OperatorCache(std::size_t capacity = 8)
      : capacity_(std::max<std::size_t>(1, capacity)) {}

  std::shared_ptr<const AssembledOperator> get(const Mesh& mesh,
                                               const VelocityField& field,
                                               const TransportParams& params) {
    const std::uint64_t key = step_operator_fingerprint(
        mesh.spec, field, params.diffusivity, params.removal_rate, params.dt,
        params.streamline_stabilization);
    if (!force_reassembly_) {
      auto it = entries_.find(key);
      if (it != entries_.end()) {
        order_.splice(order_.begin(), order_, it->second.position);
        return it->second.op;
      }
    }
    ++assemblies_;
    auto op = std::make_shared<const AssembledOperator>(
        mesh, field, params.diffusivity, params.removal_rate, params);
    if (force_reassembly_) return op;
    order_.push_front(key);
    entries_[key] = Entry{op, order_.begin()};
    if (entries_.size() > capacity_) {
      entries_.erase(order_.back());
      order_.pop_back();
    }
    return op;
  }

  int assembly_count() const { return assemblies_; }
  void set_force_reassembly(bool force) { force_reassembly_ = force; }

 private:
  struct Entry {
    std::shared_ptr<const AssembledOperator> op;
    std::list<std::uint64_t>::iterator position;
  };
  std::size_t capacity_;
  bool force_reassembly_ = false;
  int assemblies_ = 0;
  std::list<std::uint64_t> order_;
  std::unordered_map<std::uint64_t, Entry> entries_;
};

struct DynamicsOptions {
  bool force_reassembly = false;  // benchmark mode: assemble every step
  std::size_t cache_capacity = 8;
};

struct EpisodeResult {
  std::vector<ScalarField> states;     // pathogen field after each step
  std::vector<ScalarField> states_hp;  // disinfectant (coupled runs only)
  int assemblies = 0;
  int total_picard_iterations = 0;
};

/// Advances the transport dynamics from a clean room for total_time seconds,
/// one implicit step per dt, reassembling the operator only when the step's
/// velocity parameters change. Passing a disinfectant source switches to the
/// coupled system.
inline EpisodeResult run_episode_dynamics(
    const Mesh& mesh, const std::function<VelocityField(int)>& field_schedule,
    const TransportParams& params, const SourceSpec& pathogen_src,
    const std::optional<SourceSpec>& hp_src, double total_time,
    const DynamicsOptions& opts = {}) {
  params.validate();
  pathogen_src.validate(mesh.spec);
  if (hp_src) hp_src->validate(mesh.spec);
  const double steps_real = total_time / params.dt;
  const long steps = std::lround(steps_real);
  if (steps < 1 || std::abs(steps_real - static_cast<double>(steps)) >
                       1e-9 * std::max(1.0, steps_real)) {
    throw std::invalid_argument(
        "episode: total_time must be a positive multiple of dt");
  }

  EpisodeResult result;
  result.states.reserve(steps);
  ScalarField c = ScalarField::zero(mesh);

  if (!hp_src) {
    OperatorCache cache(opts.cache_capacity);
    cache.set_force_reassembly(opts.force_reassembly);
    std::shared_ptr<const AssembledOperator> op;
    Eigen::VectorXd load;
    for (long s = 0; s < steps; ++s) {
      auto next_op = cache.get(mesh, field_schedule(static_cast<int>(s)), params);
      if (next_op != op) {
        op = next_op;
        load = op->load(pathogen_src);
      }
      c = step_single(*op, c, load);
      result.states.push_back(c);
    }
    result.assemblies = cache.assembly_count();
    return result;
  }

  result.states_hp.reserve(steps);
  ScalarField chp = ScalarField::zero(mesh);
  std::unique_ptr<CoupledStepper> stepper;
  std::uint64_t field_fp = 0;
  Eigen::VectorXd load_c, load_hp;
  for (long s = 0; s < steps; ++s) {
    const VelocityField field = field_schedule(static_cast<int>(s));
    if (!stepper || field.fingerprint() != field_fp || opts.force_reassembly) {
      stepper = std::make_unique<CoupledStepper>(mesh, field, params);
      field_fp = field.fingerprint();
      load_c = fem::load_vector(mesh, pathogen_src);
      load_hp = fem::load_vector(mesh, *hp_src);
      ++result.assemblies;
    }
    auto out = stepper->step(c, chp, load_c, load_hp);
    c = std::move(out.c);
    chp = std::move(out.c_hp);
    result.total_picard_iterations += out.picard_iterations;
    result.states.push_back(c);
    result.states_hp.push_back(chp);
  }
  return result;
}

/// Single-species overload with a constant field.
inline EpisodeResult run_episode_dynamics(const Mesh& mesh,
                                          const VelocityField& field,
                                          const TransportParams& params,
                                          const SourceSpec& pathogen_src,
                                          double total_time,
                                          const DynamicsOptions& opts = {}) {
  return run_episode_dynamics(
      mesh, [&field](int) { return field; }, params, pathogen_src,
      std::nullopt, total_time, opts);
}

}  // namespace ventrl
