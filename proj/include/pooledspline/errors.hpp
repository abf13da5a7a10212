#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace pooledspline {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data (CSV schema violations, bad strata).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Invalid simulation or solver configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A matrix that must be invertible is numerically singular.  `null_direction`
// holds the offending direction when one is identifiable (e.g. the
// near-null eigenvector of the Hessian under separation/collinearity).
class SingularError : public Error {
 public:
  explicit SingularError(const std::string& msg,
                         std::vector<double> null_direction = {})
      : Error(msg), null_direction(std::move(null_direction)) {}
  std::vector<double> null_direction;
};

// One Newton iteration as recorded in a convergence trajectory.
struct IterationRecord {
  int iteration = 0;
  double loglik = 0.0;
  double max_score = 0.0;
  double max_step = 0.0;
  int halvings = 0;
};

// Optimizer failed to converge; carries the trajectory for diagnostics.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& msg, std::vector<IterationRecord> traj)
      : Error(msg), trajectory(std::move(traj)) {}
  std::vector<IterationRecord> trajectory;
};

// Stratum too large for direct subset enumeration.
class EnumerationCapError : public Error {
 public:
  explicit EnumerationCapError(const std::string& msg) : Error(msg) {}
};

}  // namespace pooledspline
