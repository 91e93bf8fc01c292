#pragma once

#include <stdexcept>
#include <string>

namespace crossway {

/// Base class for all library errors.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter violates its documented precondition.
class invalid_parameter : public error {
 public:
  using error::error;
};

/// A query time lies outside the trajectory horizon.
class out_of_horizon : public error {
 public:
  using error::error;
};

/// A target position is not reached by the trajectory.
class unreachable : public error {
 public:
  using error::error;
};

/// An internal data invariant does not hold (e.g. non-monotone trajectory).
class invariant_violation : public error {
 public:
  using error::error;
};

/// No admissible crossing exists for the requested bound computation.
class no_feasible_crossing : public error {
 public:
  using error::error;
};

/// Sensitivity requested from an infeasible evaluation.
class undefined_gradient : public error {
 public:
  using error::error;
};

/// Finite-difference stencil cannot be kept inside the feasible time set.
class boundary_hessian : public error {
 public:
  using error::error;
};

/// Coordinator/agent message exchange broke its contract.
class protocol_error : public error {
 public:
  using error::error;
};

/// A messaging round could not be completed (timeouts exhausted).
class round_failure : public error {
 public:
  using error::error;
};

/// The QP subproblem linearization is infeasible; the run cannot continue.
class linearization_infeasible : public error {
 public:
  using error::error;
};

/// Backtracking failed to produce an acceptable step.
class linesearch_failure : public error {
 public:
  using error::error;
};

}  // namespace crossway
