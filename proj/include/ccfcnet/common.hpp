#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>

namespace ccfcnet {

namespace fs = std::filesystem;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

// Process exit codes used by the CLI: 2 config, 3 data, 4 runtime.
enum class ErrorKind { config = 2, data = 3, runtime = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

#define CCFCNET_DEFINE_ERROR(Name, Kind)                                    \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& msg) : Error(ErrorKind::Kind, msg) {} \
  }

CCFCNET_DEFINE_ERROR(ConfigError, config);
CCFCNET_DEFINE_ERROR(ParseError, data);
CCFCNET_DEFINE_ERROR(DimensionMismatch, data);
CCFCNET_DEFINE_ERROR(SpecError, data);
CCFCNET_DEFINE_ERROR(TooSmall, data);
CCFCNET_DEFINE_ERROR(ConstantSeries, data);
CCFCNET_DEFINE_ERROR(EmptyFilter, data);
CCFCNET_DEFINE_ERROR(TooFewPatients, data);
CCFCNET_DEFINE_ERROR(NoValidPairs, data);
CCFCNET_DEFINE_ERROR(ShapeError, runtime);
CCFCNET_DEFINE_ERROR(DomainError, runtime);
CCFCNET_DEFINE_ERROR(DegenerateVector, runtime);
CCFCNET_DEFINE_ERROR(DegenerateSample, runtime);
CCFCNET_DEFINE_ERROR(DegeneratePrototype, runtime);
CCFCNET_DEFINE_ERROR(FilterFail, runtime);

#undef CCFCNET_DEFINE_ERROR

// Shortest decimal form that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    for (int prec = 1; prec < 17; ++prec) {
      char probe[40];
      std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
      std::sscanf(probe, "%lf", &back);
      if (back == v) return probe;
    }
  }
  return buf;
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

// Uniform draw strictly inside (0, 1); safe for log(-log(u)).
inline double uniform_open01(Rng& rng) {
  double u;
  do {
    u = uniform01(rng);
  } while (u <= 0.0 || u >= 1.0);
  return u;
}

inline double normal01(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

}  // namespace ccfcnet
