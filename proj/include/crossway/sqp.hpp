#pragma once

// Central sequential quadratic programming coordinator.
//
// The intersection-level problem optimizes one (t_in, t_out) pair per vehicle:
//
//   minimize    f(T) = sum_i V_i(t_in_i, t_out_i)
//   subject to  h(T) >= 0,
//
// where V_i are the agents' local optimal costs and h collects the entry-time
// windows, the exit-time windows (or, under relaxation, plain ordering and
// horizon rows), and the precedence chain implied by a fixed crossing order.
// Each iteration assembles a QP from the agents' gradients and curvature
// blocks, globalizes with an L1 merit function and Armijo backtracking, and
// either projects trial points back into the achievable set or relies on the
// agents' exact-penalty relaxation to keep trial evaluations well defined.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "crossway/agent.hpp"
#include "crossway/errors.hpp"
#include "crossway/qp.hpp"

namespace crossway {

enum class CoordinationMode : std::uint8_t { projection, relaxation };

inline const char* to_string(CoordinationMode m) {
  return m == CoordinationMode::projection ? "projection" : "relaxation";
}

struct SQPConfig {
  CoordinationMode mode = CoordinationMode::projection;
  std::vector<int> crossing_order;  // vehicle indices, first to cross first
  int max_iterations = 60;
  double tolerance = 1e-2;     // epsilon on the KKT residual
  double armijo = 1e-2;        // gamma: merit decrease fraction
  double backtrack = 0.5;      // beta: step shrink factor
  int max_linesearch = 40;
  double hessian_floor = 1e-6;    // eigenvalue saturation level
  double curvature_step = 1e-4;   // agent-side Hessian stencil
  double precedence_margin = 0.0; // required gap t_in(next) - t_out(prev)
  double initial_margin = 1e-3;   // extra gap when seeding the schedule
  double sigma_init = 1.0;        // initial merit penalty weight
  // The coordinator works against reachability windows shrunk by this much.
  // The agents' value functions are piecewise quadratic with kinks exactly on
  // the window walls, where multipliers (hence reported gradients) become
  // ambiguous; insetting the constraint surface keeps every iterate where the
  // gradients are trustworthy, at the price of schedules a tenth of a
  // millisecond more conservative than the reachable extremes.
  double window_inset = 1e-4;
  // Largest Newton correction (seconds) the convergence certificate may use
  // to balance the gradient against the curvature model.  Schedules resting
  // on an interior crease of a piecewise-quadratic value function report an
  // arbitrary subgradient element there; admitting a correction this small
  // certifies such points as "minimiser within ten microseconds" instead of
  // looping on a residual no step can reduce.
  double certificate_radius = 1e-5;
};

// One message exchanged with an agent during a coordination round.
struct EvalRequest {
  enum class Kind : std::uint8_t { free_flow, evaluate, curvature };
  Kind kind = Kind::evaluate;
  int vehicle = 0;
  TimePair times;
  bool project = false;           // clamp the pair before evaluating
  bool project_feasible = false;  // clamp exits into reach even when relaxed
  double project_inset = 0.0;     // interior margin used by the projection
  bool want_exit_sensitivity = false;
};

struct EvalReply {
  int vehicle = 0;
  TimePair times;                 // pair actually evaluated (post-projection)
  bool feasible = true;
  double value = 0.0;
  Eigen::Vector2d gradient = Eigen::Vector2d::Zero();
  double multiplier_in = 0.0;
  double multiplier_out = 0.0;
  double slack_shortfall = 0.0;
  double slack_overshoot = 0.0;
  TimeBounds entry;
  double horizon = 0.0;
  ExitSensitivity exit;
  bool has_exit = false;
  Eigen::Matrix2d hessian = Eigen::Matrix2d::Zero();
  bool has_hessian = false;
};

// Transport abstraction: a round sends one request per vehicle and collects
// the matching replies (indexed like the requests).  Implementations range
// from direct in-process calls to a lossy message fabric.
class EvaluationService {
 public:
  virtual ~EvaluationService() = default;
  virtual std::vector<EvalReply> round(const std::vector<EvalRequest>&) = 0;

  // Schedule notifications: an accepted iterate after each SQP step, and the
  // final assignment once coordination succeeds.  In-process services need no
  // bookkeeping; message fabrics override these to inform the agents.
  virtual void commit(const std::vector<TimePair>&) {}
  virtual void finalize(const std::vector<TimePair>&) {}
};

// In-process service: answers every request from locally owned agents.
class DirectEvaluationService : public EvaluationService {
 public:
  explicit DirectEvaluationService(std::vector<const LocalAgent*> agents,
                                   double sensitivity_step = 1e-3)
      : agents_(std::move(agents)), sensitivity_step_(sensitivity_step) {}

  std::vector<EvalReply> round(const std::vector<EvalRequest>& reqs) override {
    std::vector<EvalReply> replies;
    replies.reserve(reqs.size());
    for (const auto& r : reqs) replies.push_back(answer(r));
    return replies;
  }

  int num_agents() const { return static_cast<int>(agents_.size()); }

  EvalReply answer(const EvalRequest& req) const {
    if (req.vehicle < 0 ||
        req.vehicle >= static_cast<int>(agents_.size()))
      throw protocol_error("request addresses an unknown vehicle");
    const LocalAgent& agent = *agents_[static_cast<std::size_t>(req.vehicle)];
    EvalReply rep;
    rep.vehicle = req.vehicle;
    rep.entry = agent.entry_bounds();
    rep.horizon = agent.horizon_length();
    rep.times = req.times;
    switch (req.kind) {
      case EvalRequest::Kind::free_flow:
        rep.times = agent.free_flow_times();
        return rep;
      case EvalRequest::Kind::curvature:
        try {
          rep.hessian = agent.hessian_block(req.times);
          rep.has_hessian = true;
        } catch (const boundary_hessian&) {
          rep.has_hessian = false;
        }
        return rep;
      case EvalRequest::Kind::evaluate:
        break;
    }
    if (req.project)
      rep.times = req.project_feasible
                      ? agent.project_feasible(req.times, req.project_inset)
                      : agent.project(req.times, req.project_inset);
    if (req.want_exit_sensitivity) {
      rep.exit = agent.exit_sensitivity(rep.times.in, sensitivity_step_);
      rep.has_exit = true;
    }
    try {
      LocalEvaluation ev = agent.evaluate(rep.times);
      rep.value = ev.value;
      rep.gradient = ev.gradient;
      rep.multiplier_in = ev.multiplier_in;
      rep.multiplier_out = ev.multiplier_out;
      rep.slack_shortfall = ev.slack_shortfall;
      rep.slack_overshoot = ev.slack_overshoot;
    } catch (const linearization_infeasible&) {
      rep.feasible = false;
    }
    return rep;
  }

 private:
  std::vector<const LocalAgent*> agents_;
  double sensitivity_step_;
};

// Saturates the eigenvalues of a symmetric 2x2 block at `floor`.  Blocks that
// are already sufficiently positive definite are passed through untouched.
inline Eigen::Matrix2d regularize_block(const Eigen::Matrix2d& B, double floor,
                                        bool& modified) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(B);
  if (es.eigenvalues().minCoeff() >= floor) {
    modified = false;
    return B;
  }
  modified = true;
  Eigen::Vector2d lam = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline double constraint_violation(const Eigen::VectorXd& h) {
  return h.cwiseMin(0.0).cwiseAbs().sum();  // ||h^-||_1
}

inline double merit_value(double f, const Eigen::VectorXd& h, double sigma) {
  return f + sigma * constraint_violation(h);
}

// Optimality residual: stationarity of the Lagrangian plus constraint
// violation, both in the max norm.
inline double kkt_residual(const Eigen::VectorXd& grad_f,
                           const Eigen::VectorXd& h,
                           const Eigen::MatrixXd& grad_h,
                           const Eigen::VectorXd& mu) {
  Eigen::VectorXd stat = grad_f - grad_h.transpose() * mu;
  const double feas = h.size() ? h.cwiseMin(0.0).cwiseAbs().maxCoeff() : 0.0;
  return std::max(stat.cwiseAbs().maxCoeff(), feas);
}

// First-order data of the coordination NLP at one iterate.
struct NlpData {
  double f = 0.0;
  Eigen::VectorXd grad_f;
  Eigen::VectorXd h;
  Eigen::MatrixXd grad_h;  // one row per constraint
  Eigen::MatrixXd B;       // block-diagonal curvature model
  int regularized_blocks = 0;
};

struct IterationRecord {
  int iteration = 0;
  double objective = 0.0;
  double kkt = 0.0;
  double merit = 0.0;
  double violation = 0.0;
  double sigma = 0.0;
  double step = 0.0;
  int linesearch_trials = 0;
  int regularized_blocks = 0;
};

struct CoordinationResult {
  bool converged = false;
  CoordinationMode mode = CoordinationMode::projection;
  std::vector<TimePair> times;
  double objective = 0.0;
  double kkt = 0.0;
  int iterations = 0;         // SQP steps taken
  int linesearch_total = 0;   // merit evaluations across all steps
  int regularizations = 0;    // curvature blocks that needed saturation
  double max_slack = 0.0;     // largest relaxation slack at the final point
  std::vector<IterationRecord> history;
  std::vector<EvalReply> final_replies;
};

class Coordinator {
 public:
  Coordinator(EvaluationService& service, int num_vehicles, SQPConfig config)
      : service_(service), na_(num_vehicles), cfg_(std::move(config)) {
    if (na_ < 1) throw invalid_parameter("need at least one vehicle");
    if (cfg_.crossing_order.empty()) {
      for (int i = 0; i < na_; ++i) cfg_.crossing_order.push_back(i);
    }
    if (static_cast<int>(cfg_.crossing_order.size()) != na_)
      throw invalid_parameter("crossing order must list every vehicle once");
    std::vector<bool> seen(static_cast<std::size_t>(na_), false);
    for (int v : cfg_.crossing_order) {
      if (v < 0 || v >= na_ || seen[static_cast<std::size_t>(v)])
        throw invalid_parameter("crossing order must be a permutation");
      seen[static_cast<std::size_t>(v)] = true;
    }
    if (!(cfg_.backtrack > 0.0 && cfg_.backtrack < 1.0) ||
        !(cfg_.armijo > 0.0 && cfg_.armijo < 1.0))
      throw invalid_parameter("linesearch parameters out of range");
  }

  const SQPConfig& config() const { return cfg_; }
  int num_constraints() const { return 4 * na_ + (na_ - 1); }

  // First-order NLP data from one reply set.  Constraint layout, per vehicle
  // i (rows 4i..4i+3), identical in both modes:
  //   t_in - lo, hi - t_in, t_out - xlo(t_in), xhi(t_in) - t_out
  // then the precedence chain.  Window rows are measured against the inset
  // walls (see window_inset).  Relaxation changes how off-window points are
  // *evaluated* (finite cost through the slacks instead of a projection), not
  // which geometry the coordinator negotiates.
  NlpData assemble(const std::vector<EvalReply>& replies) const {
    NlpData nlp;
    const int n = 2 * na_;
    const int m = num_constraints();
    nlp.grad_f = Eigen::VectorXd::Zero(n);
    nlp.h = Eigen::VectorXd::Zero(m);
    nlp.grad_h = Eigen::MatrixXd::Zero(m, n);
    for (int i = 0; i < na_; ++i) {
      const auto& r = replies[static_cast<std::size_t>(i)];
      nlp.f += r.value;
      nlp.grad_f(2 * i) = r.gradient(0);
      nlp.grad_f(2 * i + 1) = r.gradient(1);
      const int row = 4 * i;
      const TimeBounds entry = r.entry.shrunk(cfg_.window_inset);
      nlp.h(row) = r.times.in - entry.lo;
      nlp.grad_h(row, 2 * i) = 1.0;
      nlp.h(row + 1) = entry.hi - r.times.in;
      nlp.grad_h(row + 1, 2 * i) = -1.0;
      if (!r.has_exit)
        throw protocol_error("coordination requires exit sensitivities");
      const TimeBounds exit = r.exit.bounds.shrunk(cfg_.window_inset);
      nlp.h(row + 2) = r.times.out - exit.lo;
      nlp.grad_h(row + 2, 2 * i) = -r.exit.slope_lo;
      nlp.grad_h(row + 2, 2 * i + 1) = 1.0;
      nlp.h(row + 3) = exit.hi - r.times.out;
      nlp.grad_h(row + 3, 2 * i) = r.exit.slope_hi;
      nlp.grad_h(row + 3, 2 * i + 1) = -1.0;
    }
    for (int k = 0; k + 1 < na_; ++k) {
      const int lead = cfg_.crossing_order[static_cast<std::size_t>(k)];
      const int next = cfg_.crossing_order[static_cast<std::size_t>(k + 1)];
      const int row = 4 * na_ + k;
      nlp.h(row) = replies[static_cast<std::size_t>(next)].times.in -
                   replies[static_cast<std::size_t>(lead)].times.out -
                   cfg_.precedence_margin;
      nlp.grad_h(row, 2 * next) = 1.0;
      nlp.grad_h(row, 2 * lead + 1) = -1.0;
    }
    return nlp;
  }

  CoordinationResult run() {
    CoordinationResult res;
    res.mode = cfg_.mode;

    std::vector<EvalReply> current = initial_round();
    double sigma = cfg_.sigma_init;

    for (int iter = 0; iter < cfg_.max_iterations; ++iter) {
      NlpData nlp = assemble(current);
      fetch_curvature(current, nlp);
      res.kkt = certified_kkt(nlp);
      res.objective = nlp.f;
      if (res.kkt <= cfg_.tolerance) {
        res.converged = true;
        break;
      }
      res.regularizations += nlp.regularized_blocks;

      // Local quadratic model: min 1/2 d'Bd + grad_f'd, h + grad_h d >= 0.
      // Solved in Jacobi-scaled variables: the curvature blocks span many
      // orders of magnitude whenever a vehicle sits near a reachability
      // wall, and the scaling (undone on the way out, multipliers are
      // untouched by it) keeps the subproblem well conditioned.
      const auto solve_model = [&](const Eigen::MatrixXd& B) {
        const Eigen::VectorXd d = B.diagonal()
                                      .cwiseMax(cfg_.hessian_floor)
                                      .cwiseSqrt()
                                      .cwiseInverse();
        ConvexProgram sub;
        sub.H = d.asDiagonal() * B * d.asDiagonal();
        sub.g = d.asDiagonal() * nlp.grad_f;
        sub.A_in = nlp.grad_h * d.asDiagonal();
        sub.b_in = -nlp.h;
        SolveResult step = crossway::solve(sub);
        if (step.status == SolveStatus::infeasible)
          throw linearization_infeasible(
              "linearized coordination constraints are inconsistent");
        if (!step.optimal() && step.kkt_residual > 1e-6)
          throw invariant_violation("coordination subproblem did not solve");
        step.x = (d.asDiagonal() * step.x).eval();
        return step;
      };
      SolveResult step = solve_model(nlp.B);
      Eigen::VectorXd delta = step.x;
      Eigen::VectorXd mu_hat = step.lambda_in;

      if (delta.cwiseAbs().maxCoeff() < 1e-12) break;  // stagnated

      // The penalty weight must dominate the multipliers for the direction
      // to be a merit descent, but it must also come back down after a
      // boundary visit has spiked the multipliers, or the objective drowns
      // in the violation term for the rest of the run.
      const auto update_sigma_and_slope = [&]() {
        const double mu_scale = mu_hat.cwiseAbs().maxCoeff();
        if (sigma <= mu_scale)
          sigma = 2.0 * mu_scale;
        else if (sigma > 100.0 * (mu_scale + 1.0))
          sigma = std::max(2.0 * mu_scale, cfg_.sigma_init);
        return nlp.grad_f.dot(delta) - sigma * constraint_violation(nlp.h);
      };
      double slope = update_sigma_and_slope();
      if (slope >= 0.0) {
        // Not a descent direction, which only happens when curvature noise
        // overwhelms the true landscape.  Stiffen every block once and
        // re-solve; a second failure is a genuine breakdown.
        for (int i = 0; i < na_; ++i) {
          bool modified = false;
          nlp.B.block<2, 2>(2 * i, 2 * i) = regularize_block(
              nlp.B.block<2, 2>(2 * i, 2 * i), 1.0, modified);
          if (modified) {
            ++nlp.regularized_blocks;
            ++res.regularizations;
          }
        }
        step = solve_model(nlp.B);
        delta = step.x;
        mu_hat = step.lambda_in;
        if (delta.cwiseAbs().maxCoeff() < 1e-12) break;
        slope = update_sigma_and_slope();
        if (slope >= 0.0)
          throw linesearch_failure(
              "subproblem direction is not a merit descent direction");
      }

      const double m0 = merit_value(nlp.f, nlp.h, sigma);

      IterationRecord rec;
      rec.iteration = iter;
      rec.objective = nlp.f;
      rec.kkt = res.kkt;
      rec.merit = m0;
      rec.violation = constraint_violation(nlp.h);
      rec.sigma = sigma;
      rec.regularized_blocks = nlp.regularized_blocks;

      double alpha = 1.0;
      bool accepted = false;
      for (int trial = 0; trial < cfg_.max_linesearch;
           ++trial, alpha *= cfg_.backtrack) {
        std::vector<EvalReply> cand = trial_round(vector_of(current), delta,
                                                  alpha);
        ++res.linesearch_total;
        ++rec.linesearch_trials;
        bool feasible = true;
        for (const auto& r : cand) feasible = feasible && r.feasible;
        if (!feasible) continue;
        NlpData probe = assemble(cand);
        const double m = merit_value(probe.f, probe.h, sigma);
        if (m <= m0 + cfg_.armijo * alpha * slope) {
          current = std::move(cand);
          rec.step = alpha;
          accepted = true;
          break;
        }
      }
      res.iterations = iter + 1;
      res.history.push_back(rec);
      if (!accepted) {
        // Backtracking exhausted without a merit decrease: stop here and
        // surface the schedule we are stuck at as a failed coordination
        // rather than tearing the run down.
        break;
      }
      service_.commit(times_of(current));
    }

    res.times = times_of(current);
    for (const auto& r : current)
      res.max_slack =
          std::max({res.max_slack, r.slack_shortfall, r.slack_overshoot});
    if (!res.converged) {
      // Runs that fell out of the loop (stagnation, exhausted backtracking,
      // iteration cap) still get their final schedule certified.
      NlpData last = assemble(current);
      fetch_curvature(current, last);
      res.objective = last.f;
      res.kkt = certified_kkt(last);
      if (res.kkt <= cfg_.tolerance) res.converged = true;
    }
    if (res.converged) service_.finalize(res.times);
    res.final_replies = std::move(current);
    return res;
  }

 private:
  static std::vector<TimePair> times_of(const std::vector<EvalReply>& replies) {
    std::vector<TimePair> tp;
    tp.reserve(replies.size());
    for (const auto& r : replies) tp.push_back(r.times);
    return tp;
  }

  static Eigen::VectorXd vector_of(const std::vector<EvalReply>& replies) {
    Eigen::VectorXd T(2 * replies.size());
    for (std::size_t i = 0; i < replies.size(); ++i) {
      T(2 * i) = replies[i].times.in;
      T(2 * i + 1) = replies[i].times.out;
    }
    return T;
  }

  // Seeds the schedule from free-flow crossings, shifted along the crossing
  // order until the precedence chain holds, then projected per vehicle.
  std::vector<EvalReply> initial_round() {
    std::vector<EvalRequest> hello(static_cast<std::size_t>(na_));
    for (int i = 0; i < na_; ++i) {
      hello[static_cast<std::size_t>(i)].kind = EvalRequest::Kind::free_flow;
      hello[static_cast<std::size_t>(i)].vehicle = i;
    }
    std::vector<EvalReply> base = service_.round(hello);
    if (static_cast<int>(base.size()) != na_)
      throw round_failure("free-flow round returned a partial schedule");

    const double gap = cfg_.precedence_margin + cfg_.initial_margin;
    std::vector<TimePair> seed(static_cast<std::size_t>(na_));
    double prev_out = -std::numeric_limits<double>::infinity();
    for (int v : cfg_.crossing_order) {
      const auto& b = base[static_cast<std::size_t>(v)];
      const double dwell = b.times.out - b.times.in;
      TimePair tp = b.times;
      tp.in = std::max(tp.in, prev_out + gap);
      // Clamp into the entry window, but keep a strict inset from the late
      // wall: a seed parked exactly on its braking limit starts the first
      // iteration where the value function blows up and neither gradients
      // nor curvature mean anything.
      const double inset = std::min(0.05, 0.25 * (b.entry.hi - b.entry.lo));
      tp.in = std::clamp(tp.in, b.entry.lo,
                         std::max(b.entry.lo, b.entry.hi - inset));
      tp.out = std::max(tp.out, tp.in + dwell);
      seed[static_cast<std::size_t>(v)] = tp;
      prev_out = tp.out;
    }

    std::vector<EvalRequest> reqs(static_cast<std::size_t>(na_));
    for (int i = 0; i < na_; ++i) {
      auto& r = reqs[static_cast<std::size_t>(i)];
      r.kind = EvalRequest::Kind::evaluate;
      r.vehicle = i;
      r.times = seed[static_cast<std::size_t>(i)];
      r.project = true;
      // Relaxed runs start slack-free too: a seed inside the penalised
      // region would have to climb across the L1 crease first.
      r.project_feasible = true;
      r.project_inset = cfg_.window_inset;
      r.want_exit_sensitivity = true;
    }
    std::vector<EvalReply> replies = service_.round(reqs);
    for (const auto& r : replies)
      if (!r.feasible)
        throw round_failure("initial schedule evaluation failed");
    return replies;
  }

  std::vector<EvalReply> trial_round(const Eigen::VectorXd& T,
                                     const Eigen::VectorXd& delta,
                                     double alpha) {
    std::vector<EvalRequest> reqs(static_cast<std::size_t>(na_));
    for (int i = 0; i < na_; ++i) {
      auto& r = reqs[static_cast<std::size_t>(i)];
      r.kind = EvalRequest::Kind::evaluate;
      r.vehicle = i;
      r.times = {T(2 * i) + alpha * delta(2 * i),
                 T(2 * i + 1) + alpha * delta(2 * i + 1)};
      // Both modes project their trials: a relaxed agent only clamps the
      // entry time (its exit row is soft), but that entry clamp is what keeps
      // backtracking from parking iterates on the hard entry wall, where the
      // value function is kinked and its reported gradient is an arbitrary
      // subgradient element.
      r.project = true;
      r.project_inset = cfg_.window_inset;
      r.want_exit_sensitivity = true;
    }
    return service_.round(reqs);
  }

  // KKT residual with certified multipliers: feasibility plus the best
  // stationarity the active rows can provide, from a nonnegative least-
  // squares fit.  The subproblem multipliers are unusable for this test:
  // they satisfy the model's stationarity including its B*delta term, which
  // near the steep reachability walls stays far above the tolerance long
  // after the step itself has shrunk to the evaluation noise floor.
  //
  // The fit also admits a Newton correction of at most certificate_radius
  // seconds under the curvature model.  The value functions are piecewise
  // quadratic, and a schedule resting on one of their interior creases
  // reports an arbitrary subgradient element that no multiplier combination
  // can cancel; the curvature stencil across the crease is enormous, so the
  // correction that absorbs it certifies "the minimiser is within the radius
  // of here".  At an ordinary non-stationary point the admissible correction
  // is too small to matter and the residual stays honest.
  double certified_kkt(const NlpData& nlp) const {
    const double feas =
        nlp.h.size() ? nlp.h.cwiseMin(0.0).cwiseAbs().maxCoeff() : 0.0;
    // A row counts as active within a millisecond: iterates pressed against
    // a wall stop a noise-floor distance short of it, yet their multiplier
    // mass is real.  Certifying against walls moved by less than the band
    // cannot misjudge the schedule at the tolerances anyone consumes it at.
    std::vector<int> active;
    for (int k = 0; k < nlp.h.size(); ++k)
      if (nlp.h(k) <= 1e-3) active.push_back(k);

    const int n = 2 * na_;
    const int ma = static_cast<int>(active.size());
    const bool curved = nlp.B.size() > 0 && cfg_.certificate_radius > 0.0;
    const int nc = curved ? n : 0;  // Newton-correction coordinates
    if (ma + nc == 0)
      return std::max(feas, nlp.grad_f.cwiseAbs().maxCoeff());

    // Columns: active constraint gradients, then the curvature model scaled
    // by the radius so the correction variables live in the unit box.
    Eigen::MatrixXd M(n, ma + nc);
    Eigen::VectorXd slack(ma);
    for (int j = 0; j < ma; ++j) {
      const int k = active[static_cast<std::size_t>(j)];
      M.col(j) = nlp.grad_h.row(k).transpose();
      slack(j) = std::max(nlp.h(k), 0.0);
    }
    if (curved) M.rightCols(n) = cfg_.certificate_radius * nlp.B;

    // Equilibrate the columns: multiplier columns are O(1) row gradients but
    // the curvature columns span whatever the Hessian blocks do, and the fit
    // must come back accurate enough to compare against the tolerance.
    Eigen::VectorXd cs(ma + nc);
    for (int j = 0; j < ma + nc; ++j)
      cs(j) = std::max(M.col(j).norm(), 1e-8);
    const Eigen::MatrixXd Ms = M * cs.cwiseInverse().asDiagonal();

    ConvexProgram fit;
    fit.H = 2.0 * Ms.transpose() * Ms;
    // Ridge on the complementarity products steers mass toward the rows that
    // are genuinely tight whenever several near-active rows could serve.
    for (int j = 0; j < ma; ++j)
      fit.H(j, j) += 2.0 * slack(j) * slack(j) / (cs(j) * cs(j));
    fit.H.diagonal().array() += 1e-12;
    fit.g = -2.0 * Ms.transpose() * nlp.grad_f;
    fit.A_in = Eigen::MatrixXd::Zero(ma + 2 * nc, ma + nc);
    fit.A_in.topLeftCorner(ma, ma).setIdentity();
    fit.b_in = Eigen::VectorXd::Zero(ma + 2 * nc);
    if (curved) {
      fit.A_in.block(ma, ma, n, n).setIdentity();
      fit.A_in.bottomRightCorner(n, n) = -Eigen::MatrixXd::Identity(n, n);
      fit.b_in.tail(2 * n) = -cs.tail(n).replicate(2, 1);
    }
    SolveResult sol = crossway::solve(fit);
    // Clamping keeps the fit a valid (if suboptimal) certificate even when
    // the solve itself is sloppy; the residual can only err upward.
    Eigen::VectorXd w = sol.x;
    w.head(ma) = w.head(ma).cwiseMax(0.0);
    if (curved)
      w.tail(n) = w.tail(n).cwiseMax(-cs.tail(n)).cwiseMin(cs.tail(n));
    const double stat =
        (nlp.grad_f - Ms * w).cwiseAbs().maxCoeff();
    return std::max(feas, stat);
  }

  void fetch_curvature(const std::vector<EvalReply>& current, NlpData& nlp) {
    std::vector<EvalRequest> reqs(static_cast<std::size_t>(na_));
    for (int i = 0; i < na_; ++i) {
      auto& r = reqs[static_cast<std::size_t>(i)];
      r.kind = EvalRequest::Kind::curvature;
      r.vehicle = i;
      r.times = current[static_cast<std::size_t>(i)].times;
    }
    std::vector<EvalReply> replies = service_.round(reqs);
    nlp.B = Eigen::MatrixXd::Zero(2 * na_, 2 * na_);
    nlp.regularized_blocks = 0;
    for (int i = 0; i < na_; ++i) {
      const auto& r = replies[static_cast<std::size_t>(i)];
      Eigen::Matrix2d block;
      bool modified = false;
      if (r.has_hessian) {
        block = regularize_block(r.hessian, cfg_.hessian_floor, modified);
      } else {
        // Stencil straddled the achievable-set boundary.  Substitute
        // curvature at the scale of the local gradient so the model step
        // for this vehicle stays within about half a second; the eigenvalue
        // floor alone would predict near-zero cost growth and launch the
        // iterate across the whole schedule.
        const double scale = std::max(
            cfg_.hessian_floor,
            nlp.grad_f.segment<2>(2 * i).cwiseAbs().maxCoeff() / 0.5);
        block = scale * Eigen::Matrix2d::Identity();
        modified = true;
      }
      if (modified) ++nlp.regularized_blocks;
      nlp.B.block<2, 2>(2 * i, 2 * i) = block;
    }
  }


  EvaluationService& service_;
  int na_;
  SQPConfig cfg_;
};

}  // namespace crossway
