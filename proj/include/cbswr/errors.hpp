#pragma once

#include <stdexcept>
#include <string>

namespace cbswr {

/// Invalid or inconsistent configuration (bad key, out-of-range value, shape mismatch).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pre-normalization embedding with (near) zero norm.
class DegenerateEmbeddingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Only one active centroid: the positive term's denominator is empty.
class DegenerateDenominatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was given an empty batch.
class EmptyBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's precondition (e.g. j == q, K >= rows).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Internal invariant broken, e.g. an assigned cluster without a centroid.
class ConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite value in a loss component. `component()` names the offender.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

/// Missing, corrupt or mismatched checkpoint / container file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cbswr
