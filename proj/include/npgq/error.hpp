#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace npgq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree (states, actions, or vector lengths).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An iterative or direct solve did not reach its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, std::size_t iterations)
      : Error(what + " (residual " + std::to_string(residual) + " after " +
              std::to_string(iterations) + " iterations)"),
        residual_(residual),
        iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  std::size_t iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  std::size_t iterations_;
};

/// NaN or overflow in a learned table.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A drift certificate could not be produced or a bound check failed.
class CertificateError : public Error {
 public:
  CertificateError(const std::string& what, std::vector<long> states = {})
      : Error(what), states_(std::move(states)) {}

  const std::vector<long>& states() const noexcept { return states_; }

 private:
  std::vector<long> states_;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line = 0, std::string field = {})
      : Error(format(what, line, field)), message_(what), line_(line), field_(std::move(field)) {}

  /// The diagnostic without the line/field prefix.
  const std::string& message() const noexcept { return message_; }
  int line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  static std::string format(const std::string& what, int line, const std::string& field) {
    std::string out;
    if (line > 0) out += "line " + std::to_string(line) + ": ";
    if (!field.empty()) out += "'" + field + "': ";
    return out + what;
  }

  std::string message_;
  int line_;
  std::string field_;
};

}  // namespace npgq
