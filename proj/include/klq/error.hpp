#pragma once

#include <stdexcept>
#include <string>

namespace klq {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (bad index, stepping a
/// terminal state, out-of-range parameter).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A log-ratio or KL term is undefined because a required probability is 0.
class SupportError : public Error {
 public:
  using Error::Error;
};

/// A construction would exceed its configured state or solve budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver did not reach its tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became NaN/inf during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or invalid experiment configuration / input file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}
}  // namespace detail

}  // namespace klq
