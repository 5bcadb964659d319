#pragma once

#include <stdexcept>
#include <string>

namespace gz {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation needs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// API used out of order (e.g. backward without a recorded forward).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (spec, train config, grounding config...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure; carries the offending path.
class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed binary container (checkpoint, pool, dataset).
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Training diverged.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long iteration, double lr)
      : Error(what), iteration_(iteration), lr_(lr) {}
  long iteration() const noexcept { return iteration_; }
  double learning_rate() const noexcept { return lr_; }

 private:
  long iteration_;
  double lr_;
};

}  // namespace gz
