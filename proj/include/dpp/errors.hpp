// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dpp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input outside an operation's domain (log of non-positive, empty reduction,
/// non-finite result).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A scalar function returned a non-finite value during evaluation.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Training produced NaN/Inf; carries the offending stage when known.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int stage = -1)
      : Error(what), stage_(stage) {}
  int stage() const { return stage_; }

 private:
  int stage_;
};

/// Malformed or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpp
