#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "crossway/errors.hpp"

namespace crossway {

/// Discrete-time matrices of the double integrator over one sampling interval.
struct DiscreteModel {
  Eigen::Matrix2d A = Eigen::Matrix2d::Identity();
  Eigen::Vector2d B = Eigen::Vector2d::Zero();
};

/// Exact zero-order-hold discretization of the double integrator
/// { p' = v, v' = u }: A = [1 Ts; 0 1], B = [Ts^2/2; Ts].
inline DiscreteModel discretize_zoh(double sampling_time) {
  if (!(sampling_time > 0.0)) {
    throw invalid_parameter("discretize_zoh: sampling time must be positive");
  }
  DiscreteModel m;
  m.A << 1.0, sampling_time, 0.0, 1.0;
  m.B << 0.5 * sampling_time * sampling_time, sampling_time;
  return m;
}

/// Everything that defines one vehicle's subproblem: dynamics, cost weights,
/// input bounds, intersection geometry and the prediction horizon.
struct VehicleParams {
  double sampling_time = 0.1;  ///< s
  int horizon = 1;             ///< number of stages N
  double u_min = -1.0;         ///< m/s^2
  double u_max = 1.0;          ///< m/s^2
  double Q = 1.0;              ///< speed-tracking weight, s^2/m^2
  double R = 1.0;              ///< control weight, s^4/m^2
  std::vector<double> v_desired;  ///< m/s, one entry per stage 0..N
  Eigen::Vector2d initial_state = Eigen::Vector2d::Zero();  ///< (p0 m, v0 m/s)
  double p_in = 0.0;   ///< m, intersection entry
  double p_out = 1.0;  ///< m, intersection exit
  DiscreteModel model;

  static VehicleParams make(double sampling_time, int horizon, double Q,
                            double R, double v_desired, double p0, double v0,
                            double u_min, double u_max, double p_in,
                            double p_out) {
    VehicleParams p;
    p.sampling_time = sampling_time;
    p.horizon = horizon;
    p.Q = Q;
    p.R = R;
    p.v_desired.assign(static_cast<std::size_t>(horizon) + 1, v_desired);
    p.initial_state << p0, v0;
    p.u_min = u_min;
    p.u_max = u_max;
    p.p_in = p_in;
    p.p_out = p_out;
    p.model = discretize_zoh(sampling_time);
    p.validate();
    return p;
  }

  double horizon_length() const { return horizon * sampling_time; }

  void validate() const {
    if (!(sampling_time > 0.0)) throw invalid_parameter("sampling_time <= 0");
    if (horizon < 1) throw invalid_parameter("horizon < 1");
    if (!(u_min < u_max)) throw invalid_parameter("u_min >= u_max");
    if (!(p_in < p_out)) throw invalid_parameter("p_in >= p_out");
    if (!(initial_state(0) < p_in))
      throw invalid_parameter("vehicle must start before the entry position");
    if (initial_state(1) < 0.0)
      throw invalid_parameter("initial velocity must be nonnegative");
    if (Q < 0.0) throw invalid_parameter("Q < 0");
    if (!(R > 0.0)) throw invalid_parameter("R <= 0");
    if (v_desired.size() != static_cast<std::size_t>(horizon) + 1) {
      throw invalid_parameter("v_desired must have horizon+1 entries");
    }
    const DiscreteModel ref = discretize_zoh(sampling_time);
    if ((model.A - ref.A).cwiseAbs().maxCoeff() > 1e-12 ||
        (model.B - ref.B).cwiseAbs().maxCoeff() > 1e-12) {
      throw invalid_parameter("model does not match ZOH discretization");
    }
  }
};

/// A discrete state/control trajectory with the exact ZOH interpolant in
/// between samples. Position is quadratic on each stage and C^1 overall;
/// with nonnegative velocities it is monotone in t, so crossing times of a
/// given position are well defined.
class StateTrajectory {
 public:
  StateTrajectory() = default;
  StateTrajectory(std::vector<Eigen::Vector2d> states,
                  std::vector<double> controls, double sampling_time)
      : states_(std::move(states)),
        controls_(std::move(controls)),
        sampling_time_(sampling_time) {
    if (!(sampling_time_ > 0.0)) {
      throw invalid_parameter("StateTrajectory: sampling time must be positive");
    }
    if (states_.empty() || states_.size() != controls_.size() + 1) {
      throw invalid_parameter("StateTrajectory: need N+1 states and N controls");
    }
  }

  int stages() const { return static_cast<int>(controls_.size()); }
  double sampling_time() const { return sampling_time_; }
  double duration() const { return stages() * sampling_time_; }
  const Eigen::Vector2d& state(int k) const { return states_.at(k); }
  double control(int k) const { return controls_.at(k); }
  const std::vector<Eigen::Vector2d>& states() const { return states_; }
  const std::vector<double>& controls() const { return controls_; }

  double min_velocity() const {
    double v = states_.front()(1);
    for (const auto& x : states_) v = std::min(v, x(1));
    return v;
  }

  bool dynamics_consistent(const DiscreteModel& m, double tol = 1e-9) const {
    for (int k = 0; k < stages(); ++k) {
      Eigen::Vector2d pred = m.A * states_[k] + m.B * controls_[k];
      if ((pred - states_[k + 1]).cwiseAbs().maxCoeff() > tol) return false;
    }
    return true;
  }

  /// Position at continuous time t: within stage k, p_k + v_k tau + u_k tau^2/2.
  double position_at(double t) const {
    auto [k, tau] = locate(t);
    if (k == stages()) return states_.back()(0);
    const Eigen::Vector2d& x = states_[k];
    return x(0) + x(1) * tau + 0.5 * controls_[k] * tau * tau;
  }

  /// Time derivative of position_at: v_k + u_k tau.
  double velocity_at(double t) const {
    auto [k, tau] = locate(t);
    if (k == stages()) return states_.back()(1);
    return states_[k](1) + controls_[k] * tau;
  }

  /// The unique t with position_at(t) == p_target for a monotone trajectory.
  /// Brackets the stage, then takes the smaller admissible root of the
  /// per-stage quadratic.
  double crossing_time(double p_target) const {
    if (min_velocity() < -kVelocityTol) {
      throw invariant_violation("crossing_time: trajectory is not monotone");
    }
    const double p0 = states_.front()(0);
    const double pN = states_.back()(0);
    const double scale = std::max({1.0, std::abs(p0), std::abs(pN)});
    if (p_target < p0 - kPositionTol * scale ||
        p_target > pN + kPositionTol * scale) {
      throw unreachable("crossing_time: target position outside trajectory range");
    }
    for (int k = 0; k < stages(); ++k) {
      if (states_[k + 1](0) < p_target - kPositionTol * scale) continue;
      const double d = p_target - states_[k](0);
      if (d <= kPositionTol * scale) return k * sampling_time_;
      const double tau = stage_crossing(states_[k](1), controls_[k], d);
      return k * sampling_time_ + std::min(tau, sampling_time_);
    }
    return duration();  // p_target == pN up to tolerance
  }

 private:
  static constexpr double kVelocityTol = 1e-9;
  static constexpr double kPositionTol = 1e-9;

  // Smaller nonnegative root of (u/2) tau^2 + v tau - d = 0, in the
  // cancellation-free form 2d / (v + sqrt(v^2 + 2 u d)).
  double stage_crossing(double v, double u, double d) const {
    double disc = v * v + 2.0 * u * d;
    disc = std::max(disc, 0.0);
    const double denom = v + std::sqrt(disc);
    if (denom > 1e-300) return 2.0 * d / denom;
    // v == 0: needs u > 0 to make progress within the stage.
    if (u > 0.0) return std::sqrt(2.0 * d / u);
    throw invariant_violation("crossing_time: stalled stage brackets target");
  }

  // Stage index and in-stage offset for t, with tolerance at the ends.
  std::pair<int, double> locate(double t) const {
    if (states_.empty()) {
      throw invariant_violation("StateTrajectory: empty trajectory");
    }
    const double T = duration();
    const double tol = 1e-9 * std::max(1.0, T);
    if (t < -tol || t > T + tol) {
      throw out_of_horizon("time outside [0, N*Ts]");
    }
    t = std::clamp(t, 0.0, T);
    int k = static_cast<int>(std::floor(t / sampling_time_));
    if (k >= stages()) return {stages(), 0.0};
    return {k, t - k * sampling_time_};
  }

  std::vector<Eigen::Vector2d> states_;
  std::vector<double> controls_;
  double sampling_time_ = 0.0;
};

}  // namespace crossway
