#pragma once

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cfmimo {

using cx = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using RMat = Eigen::MatrixXd;
using RVec = Eigen::VectorXd;

inline constexpr double kPi = 3.14159265358979323846;

// Process exit codes used by the CLI; library errors map onto these.
enum ExitCode : int {
  exit_ok = 0,
  exit_config_error = 2,
  exit_numeric_error = 3,
  exit_io_error = 4,
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

inline double linear_to_db(double lin) {
  return 10.0 * std::log10(std::max(lin, 1e-300));
}

inline double sq(double x) { return x * x; }

// |z|^2 without the sqrt of std::abs.
inline double abs2(cx z) { return z.real() * z.real() + z.imag() * z.imag(); }

}  // namespace cfmimo
