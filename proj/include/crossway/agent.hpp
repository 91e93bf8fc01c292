#pragma once

// Per-vehicle local problems.  For a fixed pair of boundary-crossing times
// (t_in, t_out) the agent solves a tracking quadratic program over its state
// and input trajectory, subject to entering the shared zone exactly at t_in
// and leaving it exactly at t_out.  The optimal cost V(t_in, t_out), its
// gradient, and curvature estimates are what the central coordinator
// consumes; reachability windows for the crossing times come from auxiliary
// linear programs over the same dynamics.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>

#include "crossway/dynamics.hpp"
#include "crossway/errors.hpp"
#include "crossway/qp.hpp"

namespace crossway {

struct TimePair {
  double in = 0.0;
  double out = 0.0;
};

enum class LocalMode : std::uint8_t {
  exact,    // boundary rows are hard equalities
  relaxed,  // exit row carries an L1 slack pair with penalty weight rho
};

struct TimeBounds {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double t, double tol = 0.0) const {
    return t >= lo - tol && t <= hi + tol;
  }
  double clamp(double t) const { return std::clamp(t, lo, hi); }

  // Window pulled in from both edges.  The value function is only piecewise
  // smooth, and its kinks sit exactly on the reachability walls; callers that
  // need clean gradients work against the shrunk window instead.  The inset
  // is capped so narrow windows never collapse past their midpoint.
  TimeBounds shrunk(double inset) const {
    const double m = std::min(inset, 0.25 * (hi - lo));
    return {lo + m, std::max(lo + m, hi - m)};
  }
};

// Exit window for a fixed entry time together with its sensitivity to the
// entry time (forward differences; backward near the upper entry bound).
struct ExitSensitivity {
  TimeBounds bounds;
  double slope_lo = 0.0;
  double slope_hi = 0.0;
};

struct LocalEvaluation {
  double value = 0.0;
  Eigen::Vector2d gradient = Eigen::Vector2d::Zero();  // d V / d (t_in, t_out)
  double multiplier_in = 0.0;   // equality multiplier of the entry row
  double multiplier_out = 0.0;  // equality multiplier of the exit row
  double slack_shortfall = 0.0;  // relaxed mode: exit crossed late / not at all
  double slack_overshoot = 0.0;  // relaxed mode: exit position overshot
  StateTrajectory trajectory;
  int solver_iterations = 0;

  double max_abs_multiplier() const {
    return std::max(std::abs(multiplier_in), std::abs(multiplier_out));
  }
};

class LocalAgent {
 public:
  LocalAgent(VehicleParams params, LocalMode mode,
             double relaxation_weight = 0.0)
      : params_(std::move(params)),
        mode_(mode),
        rho_(relaxation_weight) {
    params_.validate();
    if (mode_ == LocalMode::relaxed && !(rho_ > 0.0))
      throw invalid_parameter("relaxed mode needs a positive penalty weight");
    build_base();
  }

  const VehicleParams& params() const { return params_; }
  LocalMode mode() const { return mode_; }
  double relaxation_weight() const { return rho_; }
  double horizon_length() const { return params_.horizon_length(); }

  // Trajectory decision vector: states and inputs interleaved as
  // (p_0, v_0, u_0, p_1, v_1, u_1, ..., p_N, v_N), plus two trailing slack
  // variables in relaxed mode.
  int num_stage_variables() const { return 3 * params_.horizon + 2; }
  int num_variables() const {
    return num_stage_variables() + (mode_ == LocalMode::relaxed ? 2 : 0);
  }

  // Full program for a crossing-time pair; exposed so tests can inspect the
  // constraint structure.
  ConvexProgram build_problem(const TimePair& times) const {
    ConvexProgram prog = base_;
    const int n = num_variables();
    const int me = static_cast<int>(base_.b_eq.size());
    prog.A_eq.conservativeResize(me + 2, n);
    prog.b_eq.conservativeResize(me + 2);
    prog.A_eq.row(me) = position_row(times.in);
    prog.b_eq(me) = params_.p_in;
    Eigen::RowVectorXd out_row = position_row(times.out);
    if (mode_ == LocalMode::relaxed) {
      out_row(n - 2) = 1.0;   // shortfall slack raises the reached position
      out_row(n - 1) = -1.0;  // overshoot slack lowers it
    }
    prog.A_eq.row(me + 1) = out_row;
    prog.b_eq(me + 1) = params_.p_out;
    return prog;
  }

  // Optimal local cost and sensitivities at the given crossing times.
  LocalEvaluation evaluate(const TimePair& times) const {
    ConvexProgram prog = build_problem(times);
    SolveResult sol = crossway::solve(prog);
    if (sol.status == SolveStatus::infeasible)
      throw linearization_infeasible(
          "local problem infeasible at the requested crossing times");
    if (!sol.optimal() && sol.kkt_residual > 1e-5)
      throw invariant_violation("local solver failed to converge");

    LocalEvaluation ev;
    ev.value = sol.objective;
    ev.trajectory = extract_trajectory(sol.x);
    const int me = static_cast<int>(base_.b_eq.size());
    ev.multiplier_in = sol.lambda_eq(me);
    ev.multiplier_out = sol.lambda_eq(me + 1);
    // Envelope theorem: only the boundary rows depend on the crossing times,
    // through the interpolated position p(t, w).
    ev.gradient(0) = -ev.multiplier_in * ev.trajectory.velocity_at(times.in);
    ev.gradient(1) = -ev.multiplier_out * ev.trajectory.velocity_at(times.out);
    if (mode_ == LocalMode::relaxed) {
      ev.slack_shortfall = sol.x(num_variables() - 2);
      ev.slack_overshoot = sol.x(num_variables() - 1);
    }
    ev.solver_iterations = sol.iterations;
    return ev;
  }

  // Achievable entry-time window [earliest, latest].  Constant per vehicle;
  // computed once from the extremal-progress linear programs.
  TimeBounds entry_bounds() const {
    if (!entry_bounds_) {
      StateTrajectory fastest = extremal_trajectory(true, std::nullopt);
      StateTrajectory slowest = extremal_trajectory(false, std::nullopt);
      TimeBounds b;
      if (fastest.states().back()(0) < params_.p_in)
        throw unreachable("entry position is beyond the horizon's reach");
      b.lo = fastest.crossing_time(params_.p_in);
      b.hi = slowest.states().back()(0) < params_.p_in
                 ? horizon_length()
                 : slowest.crossing_time(params_.p_in);
      entry_bounds_ = b;
    }
    return *entry_bounds_;
  }

  // Achievable exit-time window for a fixed entry time.  Throws
  // linearization_infeasible when t_in itself is not achievable.
  TimeBounds exit_bounds(double t_in) const {
    StateTrajectory fastest = extremal_trajectory(true, t_in);
    StateTrajectory slowest = extremal_trajectory(false, t_in);
    TimeBounds b;
    b.lo = fastest.states().back()(0) < params_.p_out
               ? horizon_length()
               : fastest.crossing_time(params_.p_out);
    b.hi = slowest.states().back()(0) < params_.p_out
               ? horizon_length()
               : slowest.crossing_time(params_.p_out);
    return b;
  }

  // Exit window plus its slopes with respect to the entry time.  The default
  // step keeps the difference quotient well above the solver's noise floor.
  ExitSensitivity exit_sensitivity(double t_in, double step = 1e-3) const {
    ExitSensitivity s;
    s.bounds = exit_bounds(t_in);
    double direction = 1.0;
    TimeBounds shifted;
    try {
      shifted = exit_bounds(t_in + step);
    } catch (const linearization_infeasible&) {
      shifted = exit_bounds(t_in - step);
      direction = -1.0;
    }
    s.slope_lo = direction * (shifted.lo - s.bounds.lo) / step;
    s.slope_hi = direction * (shifted.hi - s.bounds.hi) / step;
    return s;
  }

  // Clamps a candidate pair into the achievable set: the entry time into its
  // window, then the exit time into the window induced by the entry time.
  // A positive `interior` backs the result off the window edges, keeping the
  // evaluation clear of the value function's boundary kinks.  A relaxed agent
  // only clamps the entry time and the horizon: the slack pair absorbs any
  // exit demand, and exit demands must stay free for the relaxation to mean
  // anything.
  TimePair project(const TimePair& times, double interior = 0.0) const {
    return project_impl(times, interior, mode_ == LocalMode::exact);
  }

  // Clamps into the fully reachable set regardless of mode.  Relaxed runs
  // seed from this so their slacks start at zero; iterates that begin in the
  // penalised region have to cross the L1 crease on the way out, and the
  // crease is exactly where gradients and curvature stop meaning anything.
  TimePair project_feasible(const TimePair& times,
                            double interior = 0.0) const {
    return project_impl(times, interior, true);
  }

  // Crossing times of the unconstrained (no boundary rows) optimal
  // trajectory; the natural starting point for negotiating crossing slots.
  TimePair free_flow_times() const {
    ConvexProgram prog = base_;
    SolveResult sol = crossway::solve(prog);
    if (!sol.optimal())
      throw invariant_violation("free-flow tracking problem did not solve");
    StateTrajectory traj = extract_trajectory(sol.x);
    if (traj.states().back()(0) < params_.p_out)
      throw unreachable("free-flow trajectory never clears the zone");
    return {traj.crossing_time(params_.p_in),
            traj.crossing_time(params_.p_out)};
  }

  // Conservative relaxation weight: the largest boundary-row multiplier seen
  // on a coarse grid of achievable crossing pairs, times a safety factor.
  // Any weight above the true multiplier scale makes the L1 penalty exact.
  double estimate_penalty_weight(int grid = 3, double safety = 10.0) const {
    if (grid < 2 || safety <= 0.0)
      throw invalid_parameter("penalty estimation needs grid >= 2, safety > 0");
    const TimeBounds eb = entry_bounds();
    double worst = 1.0;
    for (int i = 0; i < grid; ++i) {
      const double f = (i + 0.5) / grid;
      const double t_in = eb.lo + f * (eb.hi - eb.lo);
      const TimeBounds xb = exit_bounds(t_in);
      for (int j = 0; j < grid; ++j) {
        const double g = (j + 0.5) / grid;
        const TimePair tp{t_in, xb.lo + g * (xb.hi - xb.lo)};
        try {
          worst = std::max(worst, evaluate(tp).max_abs_multiplier());
        } catch (const linearization_infeasible&) {
          // Grid point marginally outside the achievable set; skip it.
        }
      }
    }
    return safety * worst;
  }

  // Builds a relaxed agent whose penalty weight is estimated from an exact
  // probe of the same vehicle, so the relaxation is exact near the optimum.
  static LocalAgent make_relaxed(const VehicleParams& params, int grid = 3,
                                 double safety = 10.0) {
    LocalAgent probe(params, LocalMode::exact);
    return LocalAgent(params, LocalMode::relaxed,
                      probe.estimate_penalty_weight(grid, safety));
  }

  // Central finite-difference Hessian of V, from gradient evaluations on a
  // cross stencil.  Near the boundary of the achievable set the stencil is
  // shrunk once; if it still straddles the boundary the block is reported as
  // unavailable so the caller can substitute a conservative model.
  Eigen::Matrix2d hessian_block(const TimePair& times,
                                double step = 1e-4) const {
    for (double h : {step, 0.1 * step}) {
      Eigen::Matrix2d B;
      if (try_hessian(times, h, B)) return B;
    }
    throw boundary_hessian(
        "curvature stencil leaves the achievable crossing-time set");
  }

 private:
  void build_base() {
    const int N = params_.horizon;
    const int ns = num_stage_variables();
    const int n = num_variables();
    const bool relaxed = mode_ == LocalMode::relaxed;
    const double Ts = params_.sampling_time;

    base_.H = Eigen::MatrixXd::Zero(n, n);
    base_.g = Eigen::VectorXd::Zero(n);
    base_.offset = 0.0;
    for (int k = 0; k <= N; ++k) {
      const double vd = params_.v_desired[static_cast<std::size_t>(k)];
      base_.H(3 * k + 1, 3 * k + 1) = 2.0 * params_.Q;
      base_.g(3 * k + 1) = -2.0 * params_.Q * vd;
      base_.offset += params_.Q * vd * vd;
    }
    for (int k = 0; k < N; ++k) base_.H(3 * k + 2, 3 * k + 2) = 2.0 * params_.R;
    if (relaxed) {
      base_.g(ns) = rho_;
      base_.g(ns + 1) = rho_;
    }

    // Equalities: initial state, then the two dynamics rows per stage.
    const int me = 2 + 2 * N;
    base_.A_eq = Eigen::MatrixXd::Zero(me, n);
    base_.b_eq = Eigen::VectorXd::Zero(me);
    base_.A_eq(0, 0) = 1.0;
    base_.b_eq(0) = params_.initial_state(0);
    base_.A_eq(1, 1) = 1.0;
    base_.b_eq(1) = params_.initial_state(1);
    for (int k = 0; k < N; ++k) {
      const int r = 2 + 2 * k;
      base_.A_eq(r, 3 * (k + 1)) = 1.0;  // p_{k+1}
      base_.A_eq(r, 3 * k) = -1.0;
      base_.A_eq(r, 3 * k + 1) = -Ts;
      base_.A_eq(r, 3 * k + 2) = -0.5 * Ts * Ts;
      base_.A_eq(r + 1, 3 * (k + 1) + 1) = 1.0;  // v_{k+1}
      base_.A_eq(r + 1, 3 * k + 1) = -1.0;
      base_.A_eq(r + 1, 3 * k + 2) = -Ts;
    }

    // Inequalities: input bounds, nonnegative velocity, nonnegative slacks.
    const int mi = 2 * N + (N + 1) + (relaxed ? 2 : 0);
    base_.A_in = Eigen::MatrixXd::Zero(mi, n);
    base_.b_in = Eigen::VectorXd::Zero(mi);
    for (int k = 0; k < N; ++k) {
      base_.A_in(2 * k, 3 * k + 2) = 1.0;  // u_k >= u_min
      base_.b_in(2 * k) = params_.u_min;
      base_.A_in(2 * k + 1, 3 * k + 2) = -1.0;  // u_k <= u_max
      base_.b_in(2 * k + 1) = -params_.u_max;
    }
    for (int k = 0; k <= N; ++k) {
      base_.A_in(2 * N + k, 3 * k + 1) = 1.0;  // v_k >= 0
    }
    if (relaxed) {
      base_.A_in(mi - 2, ns) = 1.0;
      base_.A_in(mi - 1, ns + 1) = 1.0;
    }
  }

  // Row of the interpolated position p(t, w) as a linear form in w.
  Eigen::RowVectorXd position_row(double t) const {
    const int N = params_.horizon;
    const double Ts = params_.sampling_time;
    const double T = horizon_length();
    const double tol = 1e-9 * std::max(1.0, T);
    if (t < -tol || t > T + tol)
      throw out_of_horizon("crossing time outside [0, N*Ts]");
    t = std::clamp(t, 0.0, T);
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(num_variables());
    const int k = std::min(static_cast<int>(std::floor(t / Ts)), N - 1);
    const double tau = t - k * Ts;
    row(3 * k) = 1.0;
    row(3 * k + 1) = tau;
    row(3 * k + 2) = 0.5 * tau * tau;
    return row;
  }

  StateTrajectory extract_trajectory(const Eigen::VectorXd& x) const {
    const int N = params_.horizon;
    std::vector<Eigen::Vector2d> states;
    std::vector<double> controls;
    states.reserve(static_cast<std::size_t>(N) + 1);
    controls.reserve(static_cast<std::size_t>(N));
    for (int k = 0; k <= N; ++k) {
      double v = x(3 * k + 1);
      if (v < 0.0 && v > -1e-5) v = 0.0;  // snap solver-level noise
      states.emplace_back(x(3 * k), v);
      if (k < N) controls.push_back(x(3 * k + 2));
    }
    return StateTrajectory(states, controls, params_.sampling_time);
  }

  // Extremal-progress trajectory: maximize (or minimize) the final position
  // subject to the dynamics and input/velocity bounds, optionally pinning the
  // entry crossing.  Slack variables never participate.
  StateTrajectory extremal_trajectory(bool maximize,
                                      std::optional<double> t_in) const {
    const int ns = num_stage_variables();
    ConvexProgram lp;
    lp.H = Eigen::MatrixXd::Zero(ns, ns);
    lp.g = Eigen::VectorXd::Zero(ns);
    lp.g(ns - 2) = maximize ? -1.0 : 1.0;  // final position p_N
    lp.A_eq = base_.A_eq.leftCols(ns);
    lp.b_eq = base_.b_eq;
    const int mi = 2 * params_.horizon + params_.horizon + 1;
    lp.A_in = base_.A_in.topLeftCorner(mi, ns);
    lp.b_in = base_.b_in.head(mi);
    if (t_in) {
      const int me = static_cast<int>(lp.b_eq.size());
      lp.A_eq.conservativeResize(me + 1, ns);
      lp.b_eq.conservativeResize(me + 1);
      lp.A_eq.row(me) = position_row(*t_in).head(ns);
      lp.b_eq(me) = params_.p_in;
    }
    SolveResult sol = crossway::solve(lp);
    if (sol.status == SolveStatus::infeasible)
      throw linearization_infeasible("entry time outside the reachable window");
    if (!sol.optimal() && sol.kkt_residual > 1e-5)
      throw invariant_violation("reachability program failed to converge");
    return extract_trajectory(sol.x);
  }

  TimePair project_impl(const TimePair& times, double interior,
                        bool hard_exit) const {
    TimePair p;
    p.in = entry_bounds().shrunk(interior).clamp(times.in);
    if (hard_exit) {
      p.out = exit_bounds(p.in).shrunk(interior).clamp(times.out);
    } else {
      p.out =
          TimeBounds{p.in, horizon_length()}.shrunk(interior).clamp(times.out);
    }
    return p;
  }

  bool try_hessian(const TimePair& times, double h, Eigen::Matrix2d& B) const {
    // Validate the stencil geometrically before differencing.  Legs that are
    // only marginally outside the achievable set would otherwise "solve" to
    // within tolerance with enormous boundary multipliers, and those leak
    // straight into the difference quotient as fake curvature.  The margin
    // keeps every leg clear of that gray zone.  Only hard rows can fail this
    // way: relaxed agents validate just the entry window and the horizon.
    const double margin = std::max(0.1 * h, 1e-5);
    const TimeBounds eb = entry_bounds();
    const auto inside = [margin](double t, const TimeBounds& b) {
      return t >= b.lo + margin && t <= b.hi - margin;
    };
    if (!inside(times.in + h, eb) || !inside(times.in - h, eb)) return false;
    if (mode_ == LocalMode::exact) {
      const auto leg_ok = [&](double t_in, double t_out) {
        try {
          return inside(t_out, exit_bounds(t_in));
        } catch (const linearization_infeasible&) {
          return false;
        }
      };
      if (!leg_ok(times.in + h, times.out)) return false;
      if (!leg_ok(times.in - h, times.out)) return false;
      const TimeBounds xb = exit_bounds(times.in);
      if (!inside(times.out + h, xb) || !inside(times.out - h, xb))
        return false;
    } else if (times.out - h < 0.0 || times.out + h > horizon_length()) {
      return false;
    }

    // Each leg carries its slack activation pattern alongside the gradient.
    // The relaxed value function is quadratic only within one such pattern:
    // where a slack switches on lies an L1 crease, and a stencil straddling
    // it reports the slope jump divided by h as curvature.
    struct Leg {
      Eigen::Vector2d g;
      bool shortfall = false;
      bool overshoot = false;
    };
    const auto eval_leg = [&](double t_in, double t_out, Leg& leg) -> bool {
      try {
        const LocalEvaluation ev = evaluate({t_in, t_out});
        leg.g = ev.gradient;
        leg.shortfall = ev.slack_shortfall > 1e-7;
        leg.overshoot = ev.slack_overshoot > 1e-7;
        return true;
      } catch (const linearization_infeasible&) {
        return false;
      } catch (const out_of_horizon&) {
        return false;
      } catch (const invariant_violation&) {
        // A probe hugging the boundary can leave the solver unable to decide
        // between optimal and infeasible; treat it as a failed stencil leg.
        return false;
      }
    };
    Leg gi_p, gi_m, go_p, go_m;
    if (!eval_leg(times.in + h, times.out, gi_p)) return false;
    if (!eval_leg(times.in - h, times.out, gi_m)) return false;
    if (!eval_leg(times.in, times.out + h, go_p)) return false;
    if (!eval_leg(times.in, times.out - h, go_m)) return false;
    if (mode_ == LocalMode::relaxed) {
      Leg center;
      if (!eval_leg(times.in, times.out, center)) return false;
      for (const Leg* leg : {&gi_p, &gi_m, &go_p, &go_m})
        if (leg->shortfall != center.shortfall ||
            leg->overshoot != center.overshoot)
          return false;
    }
    B.col(0) = (gi_p.g - gi_m.g) / (2.0 * h);
    B.col(1) = (go_p.g - go_m.g) / (2.0 * h);
    B = 0.5 * (B + B.transpose()).eval();
    return true;
  }

  VehicleParams params_;
  LocalMode mode_;
  double rho_ = 0.0;
  ConvexProgram base_;
  mutable std::optional<TimeBounds> entry_bounds_;
};

}  // namespace crossway
