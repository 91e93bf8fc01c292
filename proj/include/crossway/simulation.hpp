#pragma once

// Closed-loop validation of a coordinated schedule.
//
// After the coordinator assigns crossing times, each vehicle runs a
// receding-horizon tracking controller against the discrete plant: at every
// sample it re-solves a velocity-tracking program over the remaining steps,
// applies the first control, and the plant advances (optionally feeding back
// noisy measurements).  The assigned times enter the controller as softened
// one-sided position constraints -- do not pass the entry line before t_in,
// be past the exit line at t_out -- each carrying an L1 slack with an exact
// penalty, so the controller stays feasible under disturbances while honoring
// the schedule whenever physics allows.  The harness records the realized
// trajectories, the crossing-time violations, and whether the vehicles ever
// shared the intersection.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crossway/agent.hpp"
#include "crossway/errors.hpp"
#include "crossway/qp.hpp"
#include "crossway/runtime.hpp"
#include "crossway/scenario.hpp"
#include "crossway/sqp.hpp"

namespace crossway {

// Receding-horizon tracking controller for one vehicle with a fixed assigned
// schedule.  Horizons shrink toward the end of the simulation, and crossing
// times are re-expressed relative to the current sample each solve.
class TrackingController {
 public:
  TrackingController(VehicleParams params, TimePair assigned, double penalty)
      : params_(std::move(params)), assigned_(assigned), penalty_(penalty) {
    params_.validate();
    if (!(penalty_ > 0.0))
      throw invalid_parameter("soft-constraint penalty must be positive");
  }

  const TimePair& assigned() const { return assigned_; }

  struct Plan {
    std::vector<double> controls;  // one entry per remaining stage
    double entry_slack = 0.0;      // m past the entry line at t_in
    double exit_slack = 0.0;       // m short of the exit line at t_out
    double objective = 0.0;
  };

  // Program over `stages` remaining steps starting from state x at sample
  // `step`.  Variables: (p_k, v_k, u_k) interleaved, terminal (p_M, v_M),
  // then the entry and exit slacks.
  ConvexProgram build(const Eigen::Vector2d& x, int step, int stages) const {
    if (stages < 1) throw invalid_parameter("horizon must keep one stage");
    const int M = stages;
    const int ns = 3 * M + 2;
    const int n = ns + 2;
    const double Ts = params_.sampling_time;
    const int N = params_.horizon;

    ConvexProgram prog;
    prog.H = Eigen::MatrixXd::Zero(n, n);
    prog.g = Eigen::VectorXd::Zero(n);
    for (int k = 0; k <= M; ++k) {
      const int stage = std::min(step + k, N);  // hold the last reference
      const double vd = params_.v_desired[static_cast<std::size_t>(stage)];
      prog.H(3 * k + 1, 3 * k + 1) = 2.0 * params_.Q;
      prog.g(3 * k + 1) = -2.0 * params_.Q * vd;
      prog.offset += params_.Q * vd * vd;
    }
    for (int k = 0; k < M; ++k) prog.H(3 * k + 2, 3 * k + 2) = 2.0 * params_.R;
    prog.g(ns) = penalty_;
    prog.g(ns + 1) = penalty_;

    prog.A_eq = Eigen::MatrixXd::Zero(2 + 2 * M, n);
    prog.b_eq = Eigen::VectorXd::Zero(2 + 2 * M);
    prog.A_eq(0, 0) = 1.0;
    prog.b_eq(0) = x(0);
    prog.A_eq(1, 1) = 1.0;
    prog.b_eq(1) = x(1);
    for (int k = 0; k < M; ++k) {
      const int r = 2 + 2 * k;
      prog.A_eq(r, 3 * (k + 1)) = 1.0;
      prog.A_eq(r, 3 * k) = -1.0;
      prog.A_eq(r, 3 * k + 1) = -Ts;
      prog.A_eq(r, 3 * k + 2) = -0.5 * Ts * Ts;
      prog.A_eq(r + 1, 3 * (k + 1) + 1) = 1.0;
      prog.A_eq(r + 1, 3 * k + 1) = -1.0;
      prog.A_eq(r + 1, 3 * k + 2) = -Ts;
    }

    // Input bounds, nonnegative velocity, nonnegative slacks, and the
    // schedule rows that still lie ahead of the current sample.  A crossing
    // due exactly now touches only the fixed initial state, so such rows are
    // dropped together with the past ones (the dust margin absorbs the
    // rounding in step * Ts).
    const double t_in = assigned_.in - step * Ts;
    const double t_out = assigned_.out - step * Ts;
    const bool entry_ahead = t_in > kTimeDust;
    const bool exit_ahead = t_out > kTimeDust;
    const int mi = 2 * M + (M + 1) + 2 + (entry_ahead ? 1 : 0) +
                   (exit_ahead ? 1 : 0);
    prog.A_in = Eigen::MatrixXd::Zero(mi, n);
    prog.b_in = Eigen::VectorXd::Zero(mi);
    for (int k = 0; k < M; ++k) {
      prog.A_in(2 * k, 3 * k + 2) = 1.0;
      prog.b_in(2 * k) = params_.u_min;
      prog.A_in(2 * k + 1, 3 * k + 2) = -1.0;
      prog.b_in(2 * k + 1) = -params_.u_max;
    }
    for (int k = 0; k <= M; ++k) prog.A_in(2 * M + k, 3 * k + 1) = 1.0;
    prog.A_in(3 * M + 1, ns) = 1.0;
    prog.A_in(3 * M + 2, ns + 1) = 1.0;
    int row = 3 * M + 3;
    if (entry_ahead) {
      // p(t_in) <= p_in + s_entry.
      prog.A_in.row(row) = -position_row(t_in, M, n);
      prog.A_in(row, ns) = 1.0;
      prog.b_in(row) = -params_.p_in;
      ++row;
    }
    if (exit_ahead) {
      // p(t_out) >= p_out - s_exit.
      prog.A_in.row(row) = position_row(t_out, M, n);
      prog.A_in(row, ns + 1) = 1.0;
      prog.b_in(row) = params_.p_out;
    }
    return prog;
  }

  Plan solve(const Eigen::Vector2d& x, int step, int stages) const {
    ConvexProgram prog = build(x, step, stages);
    // The receding-horizon consistency guarantee compares controls from
    // consecutive solves, so each one must be resolved well past the 1e-6
    // band the closed-loop invariants are checked at.
    SolveTolerances tol;
    tol.kkt = 1e-10;
    tol.complementarity = 1e-10;
    SolveResult sol = crossway::solve(prog, tol);
    if (!sol.optimal() && sol.kkt_residual > 1e-5)
      throw invariant_violation("tracking controller failed to converge");
    Plan plan;
    plan.controls.reserve(static_cast<std::size_t>(stages));
    for (int k = 0; k < stages; ++k)
      plan.controls.push_back(sol.x(3 * k + 2));
    plan.entry_slack = std::max(0.0, sol.x(3 * stages + 2));
    plan.exit_slack = std::max(0.0, sol.x(3 * stages + 3));
    plan.objective = sol.objective;
    return plan;
  }

 private:
  static constexpr double kTimeDust = 1e-9;

  // Stage-quadratic interpolation coefficients of p(t) over the decision
  // variables, against an M-stage horizon.
  Eigen::RowVectorXd position_row(double t, int M, int n) const {
    const double Ts = params_.sampling_time;
    const double T = M * Ts;
    if (t > T + 1e-9 * std::max(1.0, T))
      throw out_of_horizon("schedule row beyond the remaining horizon");
    t = std::clamp(t, 0.0, T);
    const int k = std::min(static_cast<int>(std::floor(t / Ts)), M - 1);
    const double tau = t - k * Ts;
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n);
    row(3 * k) = 1.0;
    row(3 * k + 1) = tau;
    row(3 * k + 2) = 0.5 * tau * tau;
    return row;
  }

  VehicleParams params_;
  TimePair assigned_;
  double penalty_;
};

// Discrete plant advance: input saturation, then x+ = A x + B u.  The input
// is additionally kept from reversing the vehicle within the step, matching
// the standing nonnegative-velocity assumption.
inline std::pair<Eigen::Vector2d, double> step_plant(
    const Eigen::Vector2d& x, double u, const VehicleParams& params) {
  double applied = std::clamp(u, params.u_min, params.u_max);
  if (x(1) + applied * params.sampling_time < 0.0)
    applied = -x(1) / params.sampling_time;
  Eigen::Vector2d next =
      params.model.A * x + params.model.B * applied;
  if (next(1) < 0.0) next(1) = 0.0;  // scrub arithmetic residue
  return {next, applied};
}

struct VehicleRecord {
  TimePair assigned;
  StateTrajectory trajectory;     // realized closed-loop motion
  std::vector<double> deviation;  // p - (p0 + v0 t), per sample
  double realized_in = std::numeric_limits<double>::quiet_NaN();
  double realized_out = std::numeric_limits<double>::quiet_NaN();
  double violation_in = std::numeric_limits<double>::quiet_NaN();
  double violation_out = std::numeric_limits<double>::quiet_NaN();
  double max_entry_slack = 0.0;
  double max_exit_slack = 0.0;
  bool crossed = false;
};

struct OccupancyReport {
  bool exclusive = true;
  int violating_samples = 0;
  int first_violation_step = -1;
};

struct SimulationResult {
  bool success = false;  // coordination converged with clean slacks
  CoordinationResult coordination;
  std::vector<VehicleRecord> vehicles;
  OccupancyReport occupancy;
  bool order_preserved = true;
  long channel_ticks = 0;
  long retransmissions = 0;
};

namespace detail {

inline std::vector<LocalAgent> make_fleet(
    const std::vector<VehicleParams>& params, CoordinationMode mode) {
  std::vector<LocalAgent> agents;
  agents.reserve(params.size());
  for (const auto& p : params)
    agents.push_back(mode == CoordinationMode::projection
                         ? LocalAgent(p, LocalMode::exact)
                         : LocalAgent::make_relaxed(p));
  return agents;
}

}  // namespace detail

// Coordination stage alone: negotiate the schedule over the message fabric
// without running the closed loop afterwards.
struct CoordinationRun {
  CoordinationResult coordination;
  long channel_ticks = 0;
  long retransmissions = 0;
};

inline CoordinationRun coordinate_scenario(const ScenarioConfig& cfg,
                                           CoordinationMode mode) {
  cfg.validate();
  std::vector<LocalAgent> agents =
      detail::make_fleet(cfg.vehicle_params(), mode);
  std::vector<const LocalAgent*> handles;
  handles.reserve(agents.size());
  for (const auto& a : agents) handles.push_back(&a);

  SimulatedChannelService fabric(handles, cfg.channel);
  Coordinator coordinator(fabric, cfg.num_vehicles(), cfg.sqp_config(mode));

  CoordinationRun run;
  run.coordination = coordinator.run();
  run.channel_ticks = fabric.now();
  run.retransmissions = fabric.retransmissions();
  return run;
}

inline CoordinationRun coordinate_scenario(const ScenarioConfig& cfg) {
  return coordinate_scenario(cfg, cfg.sqp.mode);
}

inline SimulationResult run_scenario(const ScenarioConfig& cfg,
                                     CoordinationMode mode) {
  cfg.validate();
  const std::vector<VehicleParams> params = cfg.vehicle_params();
  const int na = cfg.num_vehicles();
  const double Ts = cfg.sampling_time;

  // Stage 1: negotiate the schedule over the message fabric.
  std::vector<LocalAgent> agents = detail::make_fleet(params, mode);
  std::vector<const LocalAgent*> handles;
  handles.reserve(agents.size());
  for (const auto& a : agents) handles.push_back(&a);

  SimulatedChannelService fabric(handles, cfg.channel);
  Coordinator coordinator(fabric, na, cfg.sqp_config(mode));

  SimulationResult result;
  result.coordination = coordinator.run();
  result.channel_ticks = fabric.now();
  result.retransmissions = fabric.retransmissions();
  result.success =
      result.coordination.converged && result.coordination.max_slack <= 1e-6;

  // Stage 2: track the assigned times in closed loop.  Each vehicle keeps
  // its own controller; the plant advances in lockstep across the fleet.
  std::vector<TrackingController> controllers;
  controllers.reserve(params.size());
  for (int i = 0; i < na; ++i) {
    const auto& agent = agents[static_cast<std::size_t>(i)];
    const double penalty = cfg.soft_penalty > 0.0
                               ? cfg.soft_penalty
                               : (mode == CoordinationMode::relaxation
                                      ? agent.relaxation_weight()
                                      : agent.estimate_penalty_weight());
    controllers.emplace_back(params[static_cast<std::size_t>(i)],
                             result.coordination.times[static_cast<std::size_t>(i)],
                             penalty);
  }

  std::mt19937_64 noise_rng(cfg.noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const bool noisy = cfg.noise_position > 0.0 || cfg.noise_velocity > 0.0;

  std::vector<Eigen::Vector2d> state(static_cast<std::size_t>(na));
  std::vector<std::vector<Eigen::Vector2d>> states(
      static_cast<std::size_t>(na));
  std::vector<std::vector<double>> controls(static_cast<std::size_t>(na));
  result.vehicles.resize(static_cast<std::size_t>(na));
  for (int i = 0; i < na; ++i) {
    state[static_cast<std::size_t>(i)] =
        params[static_cast<std::size_t>(i)].initial_state;
    states[static_cast<std::size_t>(i)].push_back(
        state[static_cast<std::size_t>(i)]);
  }

  for (int step = 0; step < cfg.simulation_steps; ++step) {
    const int remaining = cfg.simulation_steps - step;
    for (int i = 0; i < na; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      Eigen::Vector2d measured = state[idx];
      if (noisy) {
        measured(0) += cfg.noise_position * gauss(noise_rng);
        measured(1) += cfg.noise_velocity * gauss(noise_rng);
        measured(1) = std::max(measured(1), 0.0);
      }
      TrackingController::Plan plan =
          controllers[idx].solve(measured, step, remaining);
      auto [next, applied] =
          step_plant(state[idx], plan.controls.front(), params[idx]);
      state[idx] = next;
      states[idx].push_back(next);
      controls[idx].push_back(applied);
      auto& rec = result.vehicles[idx];
      rec.max_entry_slack = std::max(rec.max_entry_slack, plan.entry_slack);
      rec.max_exit_slack = std::max(rec.max_exit_slack, plan.exit_slack);
    }
  }

  // Stage 3: realized crossings, schedule violations, deviation series.
  for (int i = 0; i < na; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    auto& rec = result.vehicles[idx];
    rec.assigned = result.coordination.times[idx];
    rec.trajectory = StateTrajectory(states[idx], controls[idx], Ts);
    const auto& p = params[idx];
    for (int k = 0; k <= cfg.simulation_steps; ++k)
      rec.deviation.push_back(states[idx][static_cast<std::size_t>(k)](0) -
                              (p.initial_state(0) +
                               p.initial_state(1) * k * Ts));
    try {
      rec.realized_in = rec.trajectory.crossing_time(cfg.p_in);
      rec.realized_out = rec.trajectory.crossing_time(cfg.p_out);
      rec.crossed = true;
      rec.violation_in = rec.realized_in - rec.assigned.in;
      rec.violation_out = rec.realized_out - rec.assigned.out;
    } catch (const unreachable&) {
      rec.crossed = false;  // never finished the crossing within the run
    }
  }

  // Occupancy exclusivity: at most one vehicle strictly inside (p_in, p_out)
  // at any sample.
  for (int k = 0; k <= cfg.simulation_steps; ++k) {
    int inside = 0;
    for (int i = 0; i < na; ++i) {
      const double pos =
          states[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)](0);
      if (pos > cfg.p_in && pos < cfg.p_out) ++inside;
    }
    if (inside > 1) {
      result.occupancy.exclusive = false;
      ++result.occupancy.violating_samples;
      if (result.occupancy.first_violation_step < 0)
        result.occupancy.first_violation_step = k;
    }
  }

  // Entry order must match the configured crossing order.
  std::vector<int> order = cfg.crossing_order;
  if (order.empty())
    for (int i = 0; i < na; ++i) order.push_back(i);
  for (std::size_t k = 0; k + 1 < order.size(); ++k) {
    const auto& lead = result.vehicles[static_cast<std::size_t>(order[k])];
    const auto& next = result.vehicles[static_cast<std::size_t>(order[k + 1])];
    if (!lead.crossed || !next.crossed ||
        !(next.realized_in >= lead.realized_in))
      result.order_preserved = false;
  }

  return result;
}

inline SimulationResult run_scenario(const ScenarioConfig& cfg) {
  return run_scenario(cfg, cfg.sqp.mode);
}

// Sampled trajectory as `t,p,v,u,p_dev` rows; the terminal sample carries no
// control and reports u = 0.
inline void write_vehicle_csv(const VehicleRecord& rec, std::ostream& os) {
  using detail::format_number;
  const auto& traj = rec.trajectory;
  os << "t,p,v,u,p_dev\n";
  for (int k = 0; k <= traj.stages(); ++k) {
    const double u = k < traj.stages() ? traj.control(k) : 0.0;
    os << format_number(k * traj.sampling_time()) << ','
       << format_number(traj.state(k)(0)) << ','
       << format_number(traj.state(k)(1)) << ',' << format_number(u) << ','
       << format_number(rec.deviation[static_cast<std::size_t>(k)]) << '\n';
  }
}

struct SummaryRow {
  std::string scenario;
  CoordinationMode mode = CoordinationMode::projection;
  int n_sqp = 0;
  int n_ls = 0;
  int regularizations = 0;
  bool converged = false;
};

inline SummaryRow summarize(const std::string& scenario,
                            CoordinationMode mode,
                            const CoordinationResult& res) {
  SummaryRow row;
  row.scenario = scenario;
  row.mode = mode;
  row.n_sqp = res.iterations;
  row.n_ls = res.linesearch_total;
  row.regularizations = res.regularizations;
  row.converged = res.converged;
  return row;
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows,
                              std::ostream& os) {
  os << "scenario,n_sqp,n_ls,mode,regularizations,converged\n";
  for (const auto& r : rows)
    os << r.scenario << ',' << r.n_sqp << ',' << r.n_ls << ','
       << to_string(r.mode) << ',' << r.regularizations << ','
       << (r.converged ? 1 : 0) << '\n';
}

}  // namespace crossway
