#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "crossway/qp.hpp"

using namespace crossway;

namespace {

// Oracle for box-constrained QPs (optionally with one equality row): try
// every lower/free/upper activity pattern, minimize on the corresponding
// face, and keep the best feasible candidate.  Exponential, but exact.
double box_qp_oracle(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                     const Eigen::RowVectorXd& a_eq, double b_eq,
                     bool has_eq) {
  const int n = static_cast<int>(g.size());
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> state(static_cast<std::size_t>(n), 0);
  const int total = static_cast<int>(std::pow(3, n));
  for (int code = 0; code < total; ++code) {
    int c = code;
    for (int i = 0; i < n; ++i) {
      state[static_cast<std::size_t>(i)] = c % 3;  // 0 free, 1 lower, 2 upper
      c /= 3;
    }
    std::vector<int> free_idx;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      if (state[static_cast<std::size_t>(i)] == 0)
        free_idx.push_back(i);
      else
        x(i) = state[static_cast<std::size_t>(i)] == 1 ? -1.0 : 1.0;
    }
    const int nf = static_cast<int>(free_idx.size());
    if (nf > 0) {
      const int dim = nf + (has_eq ? 1 : 0);
      Eigen::MatrixXd K = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd r = Eigen::VectorXd::Zero(dim);
      for (int p = 0; p < nf; ++p) {
        for (int q = 0; q < nf; ++q) K(p, q) = H(free_idx[p], free_idx[q]);
        double acc = g(free_idx[p]);
        for (int i = 0; i < n; ++i)
          if (state[static_cast<std::size_t>(i)] != 0)
            acc += H(free_idx[p], i) * x(i);
        r(p) = -acc;
      }
      if (has_eq) {
        double rhs = b_eq;
        for (int i = 0; i < n; ++i)
          if (state[static_cast<std::size_t>(i)] != 0) rhs -= a_eq(i) * x(i);
        for (int p = 0; p < nf; ++p) {
          K(p, nf) = a_eq(free_idx[p]);
          K(nf, p) = a_eq(free_idx[p]);
        }
        r(nf) = rhs;
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
      if (!lu.isInvertible()) continue;
      Eigen::VectorXd sol = lu.solve(r);
      bool ok = true;
      for (int p = 0; p < nf; ++p) {
        if (std::abs(sol(p)) > 1.0 + 1e-9) ok = false;
        x(free_idx[p]) = sol(p);
      }
      if (!ok) continue;
    } else if (has_eq && std::abs(a_eq * x - b_eq) > 1e-9) {
      continue;
    }
    best = std::min(best, 0.5 * x.dot(H * x) + g.dot(x));
  }
  return best;
}

// Oracle for 2-variable LPs over "A x >= b": enumerate constraint pairs,
// intersect, and take the best feasible vertex.
double lp_vertex_oracle(const Eigen::Vector2d& c, const Eigen::MatrixXd& A,
                        const Eigen::VectorXd& b, bool& feasible) {
  const int m = static_cast<int>(b.size());
  double best = std::numeric_limits<double>::infinity();
  feasible = false;
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      Eigen::Matrix2d M;
      M.row(0) = A.row(i);
      M.row(1) = A.row(j);
      if (std::abs(M.determinant()) < 1e-12) continue;
      Eigen::Vector2d v = M.inverse() * Eigen::Vector2d(b(i), b(j));
      if (((A * v - b).array() < -1e-9).any()) continue;
      feasible = true;
      best = std::min(best, c.dot(v));
    }
  }
  return best;
}

double dual_objective(const ConvexProgram& p, const SolveResult& r) {
  double v = -0.5 * r.x.dot(p.H * r.x);
  if (p.b_eq.size()) v += p.b_eq.dot(r.lambda_eq);
  if (p.b_in.size()) v += p.b_in.dot(r.lambda_in);
  return v;
}

ConvexProgram box_program(const Eigen::MatrixXd& H, const Eigen::VectorXd& g) {
  const int n = static_cast<int>(g.size());
  ConvexProgram p;
  p.H = H;
  p.g = g;
  p.A_in.resize(2 * n, n);
  p.b_in.resize(2 * n);
  p.A_in.topRows(n) = Eigen::MatrixXd::Identity(n, n);     // x >= -1
  p.A_in.bottomRows(n) = -Eigen::MatrixXd::Identity(n, n); // -x >= -1
  p.b_in.head(n).setConstant(-1.0);
  p.b_in.tail(n).setConstant(-1.0);
  return p;
}

}  // namespace

TEST_CASE("scalar bound QP with analytic multiplier") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Constant(1, 1, 2.0);
  p.g = Eigen::VectorXd::Zero(1);
  p.A_in = Eigen::MatrixXd::Constant(1, 1, 1.0);
  p.b_in = Eigen::VectorXd::Constant(1, 1.0);

  auto r = solve(p);
  REQUIRE(r.optimal());
  CHECK(r.x(0) == Catch::Approx(1.0).margin(1e-7));
  CHECK(r.lambda_in(0) == Catch::Approx(2.0).margin(1e-6));
  CHECK(r.objective == Catch::Approx(1.0).margin(1e-7));
  CHECK(dual_objective(p, r) == Catch::Approx(r.objective).margin(1e-6));
}

TEST_CASE("equality QP multiplier is value sensitivity") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Identity(2, 2);
  p.g = Eigen::VectorXd::Zero(2);
  p.A_eq = Eigen::MatrixXd::Constant(1, 2, 1.0);
  p.b_eq = Eigen::VectorXd::Constant(1, 2.0);
  p.A_in = Eigen::MatrixXd::Identity(2, 2);  // x >= -5, inactive
  p.b_in = Eigen::VectorXd::Constant(2, -5.0);

  auto r = solve(p);
  REQUIRE(r.optimal());
  CHECK(r.x(0) == Catch::Approx(1.0).margin(1e-7));
  CHECK(r.x(1) == Catch::Approx(1.0).margin(1e-7));
  CHECK(r.lambda_eq(0) == Catch::Approx(1.0).margin(1e-6));

  // dV/db_eq should match a finite difference of the optimal value.
  ConvexProgram q = p;
  const double h = 1e-5;
  q.b_eq(0) += h;
  auto rr = solve(q);
  REQUIRE(rr.optimal());
  CHECK(r.lambda_eq(0) ==
        Catch::Approx((rr.objective - r.objective) / h).margin(1e-4));
}

TEST_CASE("pure equality problem takes the direct path") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Identity(3, 3);
  p.g = Eigen::Vector3d(1.0, 0.0, -1.0);
  p.A_eq.resize(1, 3);
  p.A_eq << 1.0, 1.0, 1.0;
  p.b_eq = Eigen::VectorXd::Constant(1, 3.0);

  auto r = solve(p);
  REQUIRE(r.optimal());
  CHECK(r.iterations == 1);
  CHECK((p.A_eq * r.x - p.b_eq).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(r.x(0) == Catch::Approx(0.0).margin(1e-7));
  CHECK(r.x(1) == Catch::Approx(1.0).margin(1e-7));
  CHECK(r.x(2) == Catch::Approx(2.0).margin(1e-7));
}

TEST_CASE("LP over the unit box") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Zero(2, 2);
  p.g = Eigen::Vector2d(-1.0, -2.0);
  p.A_in.resize(4, 2);
  p.A_in << 1, 0, 0, 1, -1, 0, 0, -1;
  p.b_in.resize(4);
  p.b_in << 0, 0, -1, -1;

  auto r = solve(p);
  REQUIRE(r.optimal());
  CHECK(r.objective == Catch::Approx(-3.0).margin(1e-7));
  CHECK(r.x(0) == Catch::Approx(1.0).margin(1e-6));
  CHECK(r.x(1) == Catch::Approx(1.0).margin(1e-6));
  CHECK(r.lambda_in.minCoeff() > -1e-9);
}

TEST_CASE("random box QPs match active-set enumeration") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = 5;
  for (int trial = 0; trial < 60; ++trial) {
    Eigen::MatrixXd M(n, n);
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) {
      g(i) = 2.0 * gauss(rng);
      for (int j = 0; j < n; ++j) M(i, j) = gauss(rng);
    }
    Eigen::MatrixXd H = M.transpose() * M +
                        0.1 * Eigen::MatrixXd::Identity(n, n);

    ConvexProgram p = box_program(H, g);
    const bool with_eq = trial % 2 == 0;
    Eigen::RowVectorXd a_eq = Eigen::RowVectorXd::Ones(n);
    double b_eq = 0.5;
    if (with_eq) {
      p.A_eq = a_eq;
      p.b_eq = Eigen::VectorXd::Constant(1, b_eq);
    }

    auto r = solve(p);
    REQUIRE(r.optimal());
    const double ref = box_qp_oracle(H, g, a_eq, b_eq, with_eq);
    CHECK(r.objective == Catch::Approx(ref).margin(1e-6));
    CHECK(r.lambda_in.minCoeff() > -1e-9);
    CHECK(std::abs(r.objective - dual_objective(p, r)) < 1e-6 *
              std::max(1.0, std::abs(r.objective)));
  }
}

TEST_CASE("random planar LPs match vertex enumeration") {
  std::mt19937_64 rng(71);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const int extra = 4;
    Eigen::MatrixXd A(4 + extra, 2);
    Eigen::VectorXd b(4 + extra);
    A.topRows(4) << 1, 0, 0, 1, -1, 0, 0, -1;  // |x| <= 3 box
    b.head(4) << -3, -3, -3, -3;
    for (int i = 0; i < extra; ++i) {
      A.row(4 + i) << gauss(rng), gauss(rng);
      b(4 + i) = unif(rng);
    }
    Eigen::Vector2d c(gauss(rng), gauss(rng));

    ConvexProgram p;
    p.H = Eigen::MatrixXd::Zero(2, 2);
    p.g = c;
    p.A_in = A;
    p.b_in = b;

    bool feasible = false;
    const double ref = lp_vertex_oracle(c, A, b, feasible);
    auto r = solve(p);
    if (feasible) {
      REQUIRE(r.optimal());
      CHECK(r.objective == Catch::Approx(ref).margin(1e-6));
    } else {
      CHECK(r.status == SolveStatus::infeasible);
    }
  }
}

TEST_CASE("infeasible boxes are reported") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Constant(1, 1, 2.0);
  p.g = Eigen::VectorXd::Zero(1);
  p.A_in.resize(2, 1);
  p.A_in << 1, -1;
  p.b_in.resize(2);
  p.b_in << 1.0, 0.0;  // x >= 1 and x <= 0

  auto r = solve(p);
  CHECK(r.status == SolveStatus::infeasible);
}

TEST_CASE("duplicate rows split the multiplier but keep the objective") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Constant(1, 1, 2.0);
  p.g = Eigen::VectorXd::Zero(1);
  p.A_in = Eigen::MatrixXd::Constant(2, 1, 1.0);
  p.b_in = Eigen::VectorXd::Constant(2, 1.0);

  auto r = solve(p);
  REQUIRE(r.optimal());
  CHECK(r.x(0) == Catch::Approx(1.0).margin(1e-6));
  CHECK(r.lambda_in.sum() == Catch::Approx(2.0).margin(1e-5));
}

TEST_CASE("solution is invariant under cost scaling") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd M(4, 4);
  Eigen::VectorXd g(4);
  for (int i = 0; i < 4; ++i) {
    g(i) = gauss(rng);
    for (int j = 0; j < 4; ++j) M(i, j) = gauss(rng);
  }
  Eigen::MatrixXd H = M.transpose() * M + Eigen::MatrixXd::Identity(4, 4);

  ConvexProgram p = box_program(H, g);
  ConvexProgram q = box_program(1000.0 * H, 1000.0 * g);
  auto rp = solve(p);
  auto rq = solve(q);
  REQUIRE(rp.optimal());
  REQUIRE(rq.optimal());
  CHECK((rp.x - rq.x).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(rq.objective == Catch::Approx(1000.0 * rp.objective).epsilon(1e-6));
}

TEST_CASE("iteration cap is honored") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd M(4, 4);
  Eigen::VectorXd g(4);
  for (int i = 0; i < 4; ++i) {
    g(i) = gauss(rng);
    for (int j = 0; j < 4; ++j) M(i, j) = gauss(rng);
  }
  ConvexProgram p = box_program(
      M.transpose() * M + Eigen::MatrixXd::Identity(4, 4), g);

  SolveTolerances tol;
  tol.max_iterations = 1;
  auto r = solve(p, tol);
  CHECK(r.status == SolveStatus::max_iterations);
  CHECK(r.iterations == 1);
}

TEST_CASE("malformed programs are rejected") {
  ConvexProgram p;
  p.H = Eigen::MatrixXd::Identity(2, 2);
  p.g = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(solve(p), invalid_parameter);

  ConvexProgram empty;
  CHECK_THROWS_AS(solve(empty), invalid_parameter);
}
