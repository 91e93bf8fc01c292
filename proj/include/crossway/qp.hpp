#pragma once

// Dense convex quadratic programming via a Mehrotra predictor-corrector
// primal-dual interior point method.
//
// Problems are stated as
//
//   minimize    1/2 x' H x + g' x + offset
//   subject to  A_eq x  = b_eq
//               A_in x >= b_in
//
// with H symmetric positive semidefinite (H may be zero, in which case the
// problem is an LP and a tiny diagonal shift keeps the Newton systems
// nonsingular).  At optimality the returned multipliers satisfy
//
//   H x + g = A_eq' lambda_eq + A_in' lambda_in,   lambda_in >= 0,
//
// so lambda_eq(i) equals the sensitivity dV/db_eq(i) of the optimal value and
// lambda_in likewise for active inequalities.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "crossway/errors.hpp"

namespace crossway {

struct ConvexProgram {
  Eigen::MatrixXd H;     // n x n cost Hessian (symmetric PSD; zero for LPs)
  Eigen::VectorXd g;     // n   linear cost
  double offset = 0.0;   // constant cost term, carried into `objective`
  Eigen::MatrixXd A_eq;  // m_e x n
  Eigen::VectorXd b_eq;  // m_e
  Eigen::MatrixXd A_in;  // m_i x n, rows are "A_in x >= b_in"
  Eigen::VectorXd b_in;  // m_i

  int num_variables() const { return static_cast<int>(g.size()); }
  int num_equalities() const { return static_cast<int>(b_eq.size()); }
  int num_inequalities() const { return static_cast<int>(b_in.size()); }

  void validate() const {
    const auto n = g.size();
    if (n <= 0) throw invalid_parameter("program has no variables");
    if (H.rows() != n || H.cols() != n)
      throw invalid_parameter("H must be n x n");
    if (A_eq.rows() != b_eq.size() || (A_eq.rows() > 0 && A_eq.cols() != n))
      throw invalid_parameter("equality block shape mismatch");
    if (A_in.rows() != b_in.size() || (A_in.rows() > 0 && A_in.cols() != n))
      throw invalid_parameter("inequality block shape mismatch");
    if (!H.allFinite() || !g.allFinite() || !A_eq.allFinite() ||
        !b_eq.allFinite() || !A_in.allFinite() || !b_in.allFinite())
      throw invalid_parameter("program contains non-finite entries");
  }
};

enum class SolveStatus : std::uint8_t { optimal, infeasible, max_iterations };

struct SolveTolerances {
  double kkt = 1e-8;               // residual tolerance (scaled by data size)
  double complementarity = 1e-8;   // duality measure tolerance
  int max_iterations = 100;
  double lp_regularization = 1e-10;  // diagonal shift when H == 0
  int stall_limit = 10;              // consecutive stalled iterations allowed
};

struct SolveResult {
  SolveStatus status = SolveStatus::max_iterations;
  Eigen::VectorXd x;
  Eigen::VectorXd lambda_eq;
  Eigen::VectorXd lambda_in;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double kkt_residual = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;

  bool optimal() const { return status == SolveStatus::optimal; }
};

namespace detail {

// Per-row nonzero pattern of A_in, so that A_in' W A_in can be accumulated in
// O(nnz^2) per row.  Most rows in the intended workloads are single-variable
// bounds, which makes this effectively a diagonal update.
inline std::vector<std::vector<int>> row_patterns(const Eigen::MatrixXd& A) {
  std::vector<std::vector<int>> pattern(static_cast<std::size_t>(A.rows()));
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      if (A(i, j) != 0.0) pattern[static_cast<std::size_t>(i)].push_back(
          static_cast<int>(j));
    }
  }
  return pattern;
}

inline double step_to_boundary(const Eigen::VectorXd& v,
                               const Eigen::VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

}  // namespace detail

// Solves `prog` to the requested tolerances.  Throws invalid_parameter on
// malformed input; reports infeasibility through the returned status.
inline SolveResult solve(const ConvexProgram& prog,
                         const SolveTolerances& tol = {}) {
  prog.validate();

  const int n = prog.num_variables();
  const int me = prog.num_equalities();
  const int mi = prog.num_inequalities();

  // Work with the symmetric part of H; callers occasionally assemble only one
  // triangle.
  Eigen::MatrixXd H = 0.5 * (prog.H + prog.H.transpose());
  const bool lp_mode = H.cwiseAbs().maxCoeff() == 0.0;
  const double h_shift = lp_mode ? tol.lp_regularization : 0.0;
  const double kkt_shift = 1e-11;  // keeps the reduced KKT system factorable

  const double data_scale =
      std::max({1.0, prog.g.size() ? prog.g.cwiseAbs().maxCoeff() : 0.0,
                me ? prog.b_eq.cwiseAbs().maxCoeff() : 0.0,
                mi ? prog.b_in.cwiseAbs().maxCoeff() : 0.0});
  const double eps_res = tol.kkt * data_scale;
  const double eps_comp = tol.complementarity * data_scale;

  SolveResult out;
  out.x = Eigen::VectorXd::Zero(n);
  out.lambda_eq = Eigen::VectorXd::Zero(me);
  out.lambda_in = Eigen::VectorXd::Zero(mi);

  const int kkt_dim = n + me;
  Eigen::MatrixXd K(kkt_dim, kkt_dim);
  Eigen::VectorXd rhs(kkt_dim);
  const auto pattern = detail::row_patterns(prog.A_in);

  auto assemble_and_factor = [&](const Eigen::VectorXd& w)
      -> Eigen::PartialPivLU<Eigen::MatrixXd> {
    K.setZero();
    K.topLeftCorner(n, n) = H;
    K.topLeftCorner(n, n).diagonal().array() += h_shift + kkt_shift;
    for (int i = 0; i < mi; ++i) {
      const auto& nz = pattern[static_cast<std::size_t>(i)];
      for (int a : nz) {
        const double wa = w(i) * prog.A_in(i, a);
        for (int b : nz) K(a, b) += wa * prog.A_in(i, b);
      }
    }
    if (me > 0) {
      K.topRightCorner(n, me) = prog.A_eq.transpose();
      K.bottomLeftCorner(me, n) = prog.A_eq;
      K.bottomRightCorner(me, me).diagonal().array() -= kkt_shift;
    }
    return Eigen::PartialPivLU<Eigen::MatrixXd>(K);
  };

  // Purely equality-constrained problems need a single factorization.
  if (mi == 0) {
    auto lu = assemble_and_factor(Eigen::VectorXd());
    rhs.head(n) = -prog.g;
    rhs.tail(me) = prog.b_eq;
    Eigen::VectorXd sol = lu.solve(rhs);
    out.x = sol.head(n);
    out.lambda_eq = -sol.tail(me);
    Eigen::VectorXd rd = H * out.x + prog.g;
    if (me > 0) rd -= prog.A_eq.transpose() * out.lambda_eq;
    const double re =
        me ? (prog.A_eq * out.x - prog.b_eq).cwiseAbs().maxCoeff() : 0.0;
    out.kkt_residual = std::max(rd.cwiseAbs().maxCoeff(), re);
    out.objective = 0.5 * out.x.dot(H * out.x) + prog.g.dot(out.x) +
                    prog.offset;
    out.iterations = 1;
    out.status = out.kkt_residual <= std::max(eps_res, 1e-7 * data_scale)
                     ? SolveStatus::optimal
                     : SolveStatus::infeasible;
    return out;
  }

  // Mehrotra-style starting point: solve the least-squares-like system with
  // unit inequality weights, then shift the complementary pair into the
  // positive orthant.
  Eigen::VectorXd x(n), y(me), z(mi), s(mi);
  {
    auto lu = assemble_and_factor(Eigen::VectorXd::Ones(mi));
    rhs.head(n) = -prog.g + prog.A_in.transpose() * prog.b_in;
    rhs.tail(me) = prog.b_eq;
    Eigen::VectorXd sol = lu.solve(rhs);
    x = sol.head(n);
    y = -sol.tail(me);
    Eigen::VectorXd s_raw = prog.A_in * x - prog.b_in;
    Eigen::VectorXd z_raw = -s_raw;
    const double ds = std::max(-1.5 * s_raw.minCoeff(), 0.0);
    const double dz = std::max(-1.5 * z_raw.minCoeff(), 0.0);
    s = s_raw.array() + ds;
    z = z_raw.array() + dz;
    const double dot = s.dot(z);
    if (dot > 0.0 && s.sum() > 0.0 && z.sum() > 0.0) {
      s.array() += 0.5 * dot / z.sum();
      z.array() += 0.5 * dot / s.sum();
    }
    if (!(s.minCoeff() > 0.0)) s.setOnes();
    if (!(z.minCoeff() > 0.0)) z.setOnes();
  }

  double best_infeas = std::numeric_limits<double>::infinity();
  int stall_count = 0;

  for (int iter = 1; iter <= tol.max_iterations; ++iter) {
    out.iterations = iter;

    Eigen::VectorXd rd = H * x + prog.g - prog.A_in.transpose() * z;
    if (me > 0) rd -= prog.A_eq.transpose() * y;
    Eigen::VectorXd re = me ? (prog.A_eq * x - prog.b_eq).eval()
                            : Eigen::VectorXd();
    Eigen::VectorXd ri = prog.A_in * x - s - prog.b_in;
    const double norm_rd = rd.cwiseAbs().maxCoeff();
    const double norm_re = me ? re.cwiseAbs().maxCoeff() : 0.0;
    const double norm_ri = ri.cwiseAbs().maxCoeff();
    const double mu = z.dot(s) / mi;

    out.x = x;
    out.lambda_eq = y;
    out.lambda_in = z;
    out.kkt_residual = std::max({norm_rd, norm_re, norm_ri, mu});

    if (norm_rd <= eps_res && norm_re <= eps_res && norm_ri <= eps_res &&
        mu <= eps_comp) {
      out.status = SolveStatus::optimal;
      break;
    }

    // Infeasible problems show up as a primal residual that refuses to fall
    // while the barrier keeps shrinking; declare failure once the residual
    // has spent several iterations parked above the convergence band without
    // meaningfully improving on the best value seen.  The 10x headroom keeps
    // slow-but-converging runs (which still make steady progress) out of the
    // trap while catching violations of any magnitude, however marginal.
    const double infeas = std::max(norm_re, norm_ri) / data_scale;
    if (infeas > 10.0 * tol.kkt && infeas > 0.9 * best_infeas) {
      if (++stall_count >= tol.stall_limit) {
        out.status = SolveStatus::infeasible;
        break;
      }
    } else {
      stall_count = 0;
    }
    best_infeas = std::min(best_infeas, infeas);

    const Eigen::VectorXd w = z.cwiseQuotient(s);
    auto lu = assemble_and_factor(w);

    // Predictor (affine scaling) direction.
    rhs.head(n) = -rd - prog.A_in.transpose() *
                            (z + w.cwiseProduct(ri));
    if (me > 0) rhs.tail(me) = -re;
    Eigen::VectorXd sol = lu.solve(rhs);
    Eigen::VectorXd dx = sol.head(n);
    Eigen::VectorXd dy = me ? (-sol.tail(me)).eval() : Eigen::VectorXd();
    Eigen::VectorXd ds = prog.A_in * dx + ri;
    Eigen::VectorXd dz =
        -(z.cwiseProduct(s) + z.cwiseProduct(ds)).cwiseQuotient(s);

    const double alpha_aff =
        std::min(detail::step_to_boundary(s, ds),
                 detail::step_to_boundary(z, dz));
    const double mu_aff =
        (z + alpha_aff * dz).dot(s + alpha_aff * ds) / mi;
    double sigma = std::pow(mu_aff / mu, 3);
    sigma = std::clamp(sigma, 0.0, 1.0);

    // Corrector: re-solve with the centering + second-order term.
    Eigen::VectorXd rc = z.cwiseProduct(s) + dz.cwiseProduct(ds);
    rc.array() -= sigma * mu;
    rhs.head(n) = -rd - prog.A_in.transpose() *
                            ((rc + z.cwiseProduct(ri)).cwiseQuotient(s));
    if (me > 0) rhs.tail(me) = -re;
    sol = lu.solve(rhs);
    dx = sol.head(n);
    if (me > 0) dy = -sol.tail(me);
    ds = prog.A_in * dx + ri;
    dz = -(rc + z.cwiseProduct(ds)).cwiseQuotient(s);

    double alpha = 0.99 * std::min(detail::step_to_boundary(s, ds),
                                   detail::step_to_boundary(z, dz));
    alpha = std::min(alpha, 1.0);

    x += alpha * dx;
    if (me > 0) y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;

    if (!x.allFinite() || !z.allFinite() || !s.allFinite()) {
      out.status = infeas > 10.0 * tol.kkt ? SolveStatus::infeasible
                                           : SolveStatus::max_iterations;
      break;
    }
  }

  out.objective =
      0.5 * out.x.dot(H * out.x) + prog.g.dot(out.x) + prog.offset;
  return out;
}

}  // namespace crossway
