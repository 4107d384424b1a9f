#pragma once

#include <Eigen/Dense>

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperroute {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// catch one type and report a diagnostic with a nonzero exit code.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InfeasibleError : Error {
  using Error::Error;
};

struct ConnectivityError : Error {
  using Error::Error;
};

// Iterative solver gave up; carries the best residual reached.
struct ConvergenceError : Error {
  double best_residual;
  ConvergenceError(const std::string& msg, double residual)
      : Error(msg), best_residual(residual) {}
};

struct DivergenceError : Error {
  using Error::Error;
};

struct NumericalRankError : Error {
  double condition_estimate;
  NumericalRankError(const std::string& msg, double cond)
      : Error(msg), condition_estimate(cond) {}
};

struct DimensionError : Error {
  using Error::Error;
};

struct OracleFailure : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace hyperroute
