#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ventrl/mesh.hpp"
#include "ventrl/rng.hpp"

namespace ventrl {

/// Time-invariant Gaussian release: rate/(pi*spread) * exp(-|x-center|^2/spread).
/// Its integral over the plane equals `rate`.
struct SourceSpec {
  double center_x = 0.0;  // m
  double center_y = 0.0;  // m
  double rate = 0.0;      // particle/s
  double spread = 0.1;    // m^2

  void validate(const MeshSpec& room) const {
    if (rate < 0.0) throw std::invalid_argument("source: rate must be >= 0");
    if (!(spread > 0.0)) throw std::invalid_argument("source: spread must be > 0");
    if (center_x < 0.0 || center_x > room.lx || center_y < 0.0 ||
        center_y > room.ly) {
      throw std::invalid_argument("source: center outside the room");
    }
  }

  double operator()(double x, double y) const {
    const double dx = x - center_x;
    const double dy = y - center_y;
    return rate / (std::numbers::pi * spread) *
           std::exp(-(dx * dx + dy * dy) / spread);
  }
};

/// Parameterized room airflow. Two families:
///  - DoubleVortex: two counter-rotating recirculation cells split at x = l,
///    with vertical strengths derived from the horizontal ones so the field
///    is divergence-free. The normal component vanishes on all four walls.
///  - Uniform: constant (vx, vy).
class VelocityField {
 public:
  enum class Kind { DoubleVortex, Uniform };

  /// Derives wy_left = wx_left*ly/l and wy_right = wx_right*ly/(lx-l), the
  /// unique strengths that make the vortex pair incompressible.
  static VelocityField double_vortex(double l, double wx_left, double wx_right,
                                     double lx, double ly) {
    if (!(l > 0.0) || !(l < lx)) {
      throw std::invalid_argument(
          "double_vortex: split length must lie strictly inside (0, lx)");
    }
    VelocityField f;
    f.kind_ = Kind::DoubleVortex;
    f.lx_ = lx;
    f.ly_ = ly;
    f.l_ = l;
    f.wx_left_ = wx_left;
    f.wx_right_ = wx_right;
    f.wy_left_ = wx_left * ly / l;
    f.wy_right_ = wx_right * ly / (lx - l);
    return f;
  }

  /// Arbitrary vertical strengths; used as a negative control for the
  /// divergence test. Not incompressible unless the strengths satisfy the
  /// coupling above.
  static VelocityField double_vortex_raw(double l, double wx_left,
                                         double wx_right, double wy_left,
                                         double wy_right, double lx,
                                         double ly) {
    VelocityField f = double_vortex(l, wx_left, wx_right, lx, ly);
    f.wy_left_ = wy_left;
    f.wy_right_ = wy_right;
    return f;
  }

  static VelocityField uniform(double vx, double vy, double lx, double ly) {
    VelocityField f;
    f.kind_ = Kind::Uniform;
    f.lx_ = lx;
    f.ly_ = ly;
    f.ux_ = vx;
    f.uy_ = vy;
    return f;
  }

  static VelocityField zero(double lx, double ly) {
    return uniform(0.0, 0.0, lx, ly);
  }

  Kind kind() const { return kind_; }
  double room_lx() const { return lx_; }
  double room_ly() const { return ly_; }
  double split_length() const { return l_; }
  double wy_left() const { return wy_left_; }
  double wy_right() const { return wy_right_; }

  /// Velocity at a point of the closed room. Points on the vortex interface
  /// x = l evaluate with the left-cell formula.
  Vec2 at(double x, double y) const {
    check_inside(x, y);
    if (kind_ == Kind::Uniform) return {ux_, uy_};
    const double pi = std::numbers::pi;
    const double cy = std::cos(pi * y / ly_);
    const double sy = std::sin(pi * y / ly_);
    if (x <= l_) {
      const double ax = pi * x / l_;
      return {wx_left_ * std::sin(ax) * cy, -wy_left_ * std::cos(ax) * sy};
    }
    const double ax = pi * (x - l_) / (lx_ - l_);
    return {wx_right_ * std::sin(ax) * cy, -wy_right_ * std::cos(ax) * sy};
  }

  /// Analytic divergence; identically zero for Uniform and for DoubleVortex
  /// fields built with the derived strengths.
  double divergence_at(double x, double y) const {
    check_inside(x, y);
    if (kind_ == Kind::Uniform) return 0.0;
    const double pi = std::numbers::pi;
    const double cy = std::cos(pi * y / ly_);
    if (x <= l_) {
      const double cx = std::cos(pi * x / l_);
      return pi * cx * cy * (wx_left_ / l_ - wy_left_ / ly_);
    }
    const double cx = std::cos(pi * (x - l_) / (lx_ - l_));
    return pi * cx * cy * (wx_right_ / (lx_ - l_) - wy_right_ / ly_);
  }

  /// Largest velocity-component magnitude; used for the cell Peclet number.
  double max_component() const {
    if (kind_ == Kind::Uniform) return std::max(std::abs(ux_), std::abs(uy_));
    return std::max(std::max(std::abs(wx_left_), std::abs(wx_right_)),
                    std::max(std::abs(wy_left_), std::abs(wy_right_)));
  }

  /// Stable hash of the field parameters, for operator reuse checks.
  std::uint64_t fingerprint() const {
    std::uint64_t h = RandomStream::mix(0x5eed, static_cast<std::uint64_t>(kind_));
    auto fold = [&h](double v) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = RandomStream::mix(h, bits);
    };
    fold(lx_);
    fold(ly_);
    if (kind_ == Kind::Uniform) {
      fold(ux_);
      fold(uy_);
    } else {
      fold(l_);
      fold(wx_left_);
      fold(wx_right_);
      fold(wy_left_);
      fold(wy_right_);
    }
    return h;
  }

 private:
  void check_inside(double x, double y) const {
    if (x < 0.0 || x > lx_ || y < 0.0 || y > ly_) {
      throw std::domain_error("velocity field evaluated outside the room");
    }
  }

  Kind kind_ = Kind::Uniform;
  double lx_ = 0.0, ly_ = 0.0;
  // DoubleVortex parameters.
  double l_ = 0.0, wx_left_ = 0.0, wx_right_ = 0.0, wy_left_ = 0.0,
         wy_right_ = 0.0;
  // Uniform parameters.
  double ux_ = 0.0, uy_ = 0.0;
};

/// Vortex pair with the standard unit horizontal strengths.
inline VelocityField make_double_vortex(double l, double lx, double ly,
                                        double wx = 1.0) {
  return VelocityField::double_vortex(l, wx, wx, lx, ly);
}

}  // namespace ventrl
