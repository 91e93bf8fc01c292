#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "crossway/agent.hpp"

using namespace crossway;

namespace {

// A vehicle resembling the simulation fixtures: 6 s horizon, desired speed
// 80 km/h, starting 55 m before an 8 m crossing zone.
VehicleParams highway_params() {
  const double vd = 80.0 / 3.6;
  return VehicleParams::make(0.2, 30, 1.0, 1.0, vd, -55.0, vd, -2.0, 2.0, 0.0,
                             8.0);
}

// Small analytic fixture: one stage pins the pre-entry control to zero, so
// the reachability windows have closed forms.
VehicleParams analytic_params() {
  return VehicleParams::make(0.1, 100, 1.0, 1.0, 10.0, -1.0, 10.0, -2.0, 2.0,
                             0.0, 8.0);
}

double fd_value(const LocalAgent& agent, const TimePair& tp, int dim,
                double h) {
  TimePair lo = tp, hi = tp;
  (dim == 0 ? lo.in : lo.out) -= h;
  (dim == 0 ? hi.in : hi.out) += h;
  return (agent.evaluate(hi).value - agent.evaluate(lo).value) / (2.0 * h);
}

}  // namespace

TEST_CASE("local problem dimensions") {
  LocalAgent exact(highway_params(), LocalMode::exact);
  CHECK(exact.num_variables() == 92);
  auto prog = exact.build_problem({2.5, 2.9});
  CHECK(prog.A_eq.rows() == 64);   // 2 initial + 60 dynamics + 2 boundary
  CHECK(prog.A_in.rows() == 91);   // 60 input bounds + 31 velocity signs
  CHECK(prog.A_eq.cols() == 92);

  LocalAgent relaxed(highway_params(), LocalMode::relaxed, 100.0);
  CHECK(relaxed.num_variables() == 94);
  auto rprog = relaxed.build_problem({2.5, 2.9});
  CHECK(rprog.A_eq.rows() == 64);
  CHECK(rprog.A_in.rows() == 93);  // + two slack signs
  // The exit row carries the slack pair with opposite signs.
  CHECK(rprog.A_eq(63, 92) == 1.0);
  CHECK(rprog.A_eq(63, 93) == -1.0);
  CHECK(rprog.A_eq(62, 92) == 0.0);
}

TEST_CASE("free-flow crossing has zero cost and zero sensitivities") {
  auto params = highway_params();
  LocalAgent agent(params, LocalMode::exact);
  const double vd = params.v_desired.front();
  TimePair free_pair{(params.p_in + 55.0) / vd, (params.p_out + 55.0) / vd};

  auto ev = agent.evaluate(free_pair);
  CHECK(ev.value < 1e-7);
  CHECK(std::abs(ev.multiplier_in) < 1e-6);
  CHECK(std::abs(ev.multiplier_out) < 1e-6);
  CHECK(ev.gradient.cwiseAbs().maxCoeff() < 1e-4);
  CHECK(ev.trajectory.dynamics_consistent(params.model, 1e-6));
}

TEST_CASE("entry window closed forms") {
  SECTION("crossing reachable both ways") {
    LocalAgent agent(analytic_params(), LocalMode::exact);
    auto b = agent.entry_bounds();
    CHECK(b.lo == Catch::Approx(-5.0 + std::sqrt(26.0)).margin(1e-6));
    CHECK(b.hi == Catch::Approx(5.0 - std::sqrt(24.0)).margin(1e-6));
  }
  SECTION("braking never reaches the entry") {
    auto p = VehicleParams::make(0.1, 100, 1.0, 1.0, 2.0, -10.0, 2.0, -1.0,
                                 1.0, 0.0, 8.0);
    LocalAgent agent(p, LocalMode::exact);
    auto b = agent.entry_bounds();
    CHECK(b.lo == Catch::Approx(-2.0 + std::sqrt(24.0)).margin(1e-6));
    CHECK(b.hi == Catch::Approx(10.0).margin(1e-9));  // horizon end
  }
}

TEST_CASE("exit window closed forms") {
  LocalAgent agent(analytic_params(), LocalMode::exact);
  // Entering at t = 0.1 forces u_0 = 0, so the entry speed is exactly 10.
  auto b = agent.exit_bounds(0.1);
  CHECK(b.lo == Catch::Approx(0.1 - 5.0 + std::sqrt(33.0)).margin(1e-6));
  CHECK(b.hi == Catch::Approx(0.1 + 5.0 - std::sqrt(17.0)).margin(1e-6));

  CHECK_THROWS_AS(agent.exit_bounds(5.0), linearization_infeasible);
}

TEST_CASE("windows grow with the entry time") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  double prev_lo = -1.0, prev_hi = -1.0;
  for (int i = 0; i <= 8; ++i) {
    const double t_in = eb.lo + (eb.hi - eb.lo) * (0.05 + 0.9 * i / 8.0);
    auto xb = agent.exit_bounds(t_in);
    CHECK(xb.lo > t_in);
    CHECK(xb.hi >= xb.lo - 1e-9);
    if (i > 0) {
      CHECK(xb.lo >= prev_lo - 1e-6);
      CHECK(xb.hi >= prev_hi - 1e-6);
    }
    prev_lo = xb.lo;
    prev_hi = xb.hi;
  }
}

TEST_CASE("exit sensitivity matches its own finite difference") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double t_in = 0.5 * (eb.lo + eb.hi);
  auto s = agent.exit_sensitivity(t_in);
  CHECK(s.slope_lo >= 0.0);
  CHECK(s.slope_hi >= 0.0);

  // Near the upper entry bound the forward probe is infeasible; the backward
  // fallback must still produce a window and finite slopes.
  auto near_edge = agent.exit_sensitivity(eb.hi - 1e-6);
  CHECK(std::isfinite(near_edge.slope_lo));
  CHECK(std::isfinite(near_edge.slope_hi));
}

TEST_CASE("value gradient matches finite differences") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double h = 1e-4;
  for (int i = 0; i < 5; ++i) {
    const double t_in = eb.lo + (eb.hi - eb.lo) * (0.2 + 0.15 * i);
    auto xb = agent.exit_bounds(t_in);
    for (int j = 0; j < 3; ++j) {
      const double t_out = xb.lo + (xb.hi - xb.lo) * (0.25 + 0.25 * j);
      TimePair tp{t_in, t_out};
      auto ev = agent.evaluate(tp);
      Eigen::Vector2d fd(fd_value(agent, tp, 0, h), fd_value(agent, tp, 1, h));
      const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
      CHECK((ev.gradient - fd).cwiseAbs().maxCoeff() / scale < 1e-3);
    }
  }
}

TEST_CASE("delaying the whole crossing costs") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  const double vd = agent.params().v_desired.front();
  const double free_in = 55.0 / vd;
  const double free_out = 63.0 / vd;

  double prev = agent.evaluate({free_in, free_out}).value;
  CHECK(prev < 1e-7);
  for (double s : {0.1, 0.2, 0.3}) {
    auto tp = agent.project({free_in + s, free_out + 1.4 * s});
    const double v = agent.evaluate(tp).value;
    CHECK(v > prev + 1e-4);
    prev = v;
  }
}

TEST_CASE("curvature block is symmetric and matches value differences") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double t_in = eb.lo + 0.6 * (eb.hi - eb.lo);
  auto xb = agent.exit_bounds(t_in);
  TimePair tp{t_in, xb.lo + 0.5 * (xb.hi - xb.lo)};

  auto B = agent.hessian_block(tp);
  CHECK(B(0, 1) == Catch::Approx(B(1, 0)).margin(1e-12));

  const double h = 1e-3;
  TimePair up{tp.in + h, tp.out}, dn{tp.in - h, tp.out};
  const double second = (agent.evaluate(up).value - 2.0 * agent.evaluate(tp).value +
                         agent.evaluate(dn).value) / (h * h);
  CHECK(B(0, 0) == Catch::Approx(second).margin(0.05 * std::abs(second) + 0.5));
}

TEST_CASE("curvature stencil fails cleanly at the window boundary") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double t_in = eb.lo + 0.5 * (eb.hi - eb.lo);
  auto xb = agent.exit_bounds(t_in);
  CHECK_THROWS_AS(agent.hessian_block({t_in, xb.lo + 1e-7}), boundary_hessian);
}

TEST_CASE("projection clamps into the achievable set") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double t_in = 0.5 * (eb.lo + eb.hi);
  auto xb = agent.exit_bounds(t_in);

  TimePair interior{t_in, 0.5 * (xb.lo + xb.hi)};
  auto same = agent.project(interior);
  CHECK(same.in == Catch::Approx(interior.in).margin(1e-12));
  CHECK(same.out == Catch::Approx(interior.out).margin(1e-12));

  auto fixed = agent.project({t_in, xb.lo - 0.3});
  CHECK(fixed.out == Catch::Approx(xb.lo).margin(1e-9));
  auto again = agent.project(fixed);
  CHECK(again.out == Catch::Approx(fixed.out).margin(1e-7));

  auto clamped = agent.project({eb.hi + 1.0, xb.hi + 1.0});
  CHECK(clamped.in == Catch::Approx(eb.hi).margin(1e-9));
  auto cb = agent.exit_bounds(clamped.in);
  CHECK(clamped.out == Catch::Approx(cb.hi).margin(1e-7));
}

TEST_CASE("boundary feasibility is sharp at the window edges") {
  LocalAgent agent(highway_params(), LocalMode::exact);
  auto eb = agent.entry_bounds();
  const double t_in = eb.lo + 0.4 * (eb.hi - eb.lo);
  auto xb = agent.exit_bounds(t_in);

  CHECK_NOTHROW(agent.evaluate({t_in, xb.lo + 1e-5}));
  CHECK_NOTHROW(agent.evaluate({t_in, xb.hi - 1e-5}));
  CHECK_THROWS_AS(agent.evaluate({t_in, xb.lo - 1e-3}),
                  linearization_infeasible);
  CHECK_THROWS_AS(agent.evaluate({t_in, xb.hi + 1e-3}),
                  linearization_infeasible);
}

TEST_CASE("relaxation is exact for achievable pairs") {
  LocalAgent exact(highway_params(), LocalMode::exact);
  auto eb = exact.entry_bounds();
  const double t_in = eb.lo + 0.5 * (eb.hi - eb.lo);
  auto xb = exact.exit_bounds(t_in);
  TimePair tp{t_in, xb.lo + 0.3 * (xb.hi - xb.lo)};

  auto ref = exact.evaluate(tp);
  const double rho = 10.0 * std::max(1.0, ref.max_abs_multiplier());
  LocalAgent relaxed(highway_params(), LocalMode::relaxed, rho);
  auto ev = relaxed.evaluate(tp);

  CHECK(ev.slack_shortfall <= 1e-6);
  CHECK(ev.slack_overshoot <= 1e-6);
  CHECK(ev.value == Catch::Approx(ref.value).margin(1e-4));
  CHECK((ev.gradient - ref.gradient).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("relaxation absorbs unachievable exits") {
  LocalAgent relaxed(highway_params(), LocalMode::relaxed, 500.0);
  auto eb = relaxed.entry_bounds();
  const double t_in = eb.lo + 0.5 * (eb.hi - eb.lo);
  auto xb = relaxed.exit_bounds(t_in);

  auto early = relaxed.evaluate({t_in, xb.lo - 0.1});
  CHECK(early.slack_shortfall > 1e-3);  // exit pinned before it is reachable
  CHECK(early.slack_overshoot < 1e-6);
  CHECK(std::isfinite(early.value));

  auto feasible = relaxed.evaluate({t_in, 0.5 * (xb.lo + xb.hi)});
  CHECK(early.value > feasible.value);
}

TEST_CASE("relaxed-mode penalty weight is required") {
  CHECK_THROWS_AS(LocalAgent(highway_params(), LocalMode::relaxed, 0.0),
                  invalid_parameter);
}
