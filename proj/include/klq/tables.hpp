#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "klq/error.hpp"

namespace klq {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Smallest probability a reference policy may assign to any action.
inline constexpr double kSupportFloor = 1e-12;

/// Tabular stochastic policy. Rows are states, columns actions.
///
/// Both the probabilities and their logarithms are stored. Log-probabilities
/// are the primary representation whenever the policy came from logits
/// (softmax/Boltzmann), which keeps log-ratios exact even when a probability
/// underflows to 0 in double precision.
class PolicyTable {
 public:
  PolicyTable() = default;

  static PolicyTable from_probs(Matrix probs) {
    PolicyTable p;
    p.log_probs_ = probs.array().log().matrix();
    p.probs_ = std::move(probs);
    return p;
  }

  /// Row-wise log-softmax of `logits`; -inf logits give exact zeros.
  static PolicyTable from_logits(const Matrix& logits) {
    PolicyTable p;
    p.log_probs_.resize(logits.rows(), logits.cols());
    p.probs_.resize(logits.rows(), logits.cols());
    for (Eigen::Index s = 0; s < logits.rows(); ++s) {
      const double m = logits.row(s).maxCoeff();
      double z = 0.0;
      for (Eigen::Index a = 0; a < logits.cols(); ++a) z += std::exp(logits(s, a) - m);
      const double lse = m + std::log(z);
      for (Eigen::Index a = 0; a < logits.cols(); ++a) {
        p.log_probs_(s, a) = logits(s, a) - lse;
        p.probs_(s, a) = std::exp(p.log_probs_(s, a));
      }
    }
    return p;
  }

  /// Takes already-normalised log-probabilities as given.
  static PolicyTable from_log_probs(Matrix log_probs) {
    PolicyTable p;
    p.probs_ = log_probs.array().exp().matrix();
    p.log_probs_ = std::move(log_probs);
    return p;
  }

  /// Both representations as stored; shapes must agree.
  static PolicyTable from_parts(Matrix probs, Matrix log_probs) {
    if (probs.rows() != log_probs.rows() || probs.cols() != log_probs.cols())
      throw UsageError("policy probability and log-probability shapes differ");
    PolicyTable p;
    p.probs_ = std::move(probs);
    p.log_probs_ = std::move(log_probs);
    return p;
  }

  static PolicyTable uniform(std::size_t num_states, std::size_t num_actions) {
    return from_probs(Matrix::Constant(static_cast<Eigen::Index>(num_states),
                                       static_cast<Eigen::Index>(num_actions),
                                       1.0 / static_cast<double>(num_actions)));
  }

  std::size_t num_states() const { return static_cast<std::size_t>(probs_.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(probs_.cols()); }

  double prob(std::size_t s, std::size_t a) const { return probs_(idx(s), idx(a)); }
  double log_prob(std::size_t s, std::size_t a) const { return log_probs_(idx(s), idx(a)); }

  std::span<const double> row(std::size_t s) const {
    return {probs_.data() + s * num_actions(), num_actions()};
  }

  const Matrix& probs() const { return probs_; }
  const Matrix& log_probs() const { return log_probs_; }

  /// Throws UsageError unless every row is a distribution within `tol`.
  void check_valid(double tol = 1e-12) const {
    for (Eigen::Index s = 0; s < probs_.rows(); ++s) {
      const double sum = probs_.row(s).sum();
      if (std::abs(sum - 1.0) > tol)
        throw UsageError("policy row " + std::to_string(s) + " sums to " + std::to_string(sum));
      if (probs_.row(s).minCoeff() < 0.0 || !probs_.row(s).allFinite())
        throw UsageError("policy row " + std::to_string(s) + " has a negative or non-finite entry");
    }
  }

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

  Matrix probs_;
  Matrix log_probs_;
};

/// Action values Q(s, a); rows of terminal states are 0 by convention.
struct QTable {
  Matrix values;

  static QTable zeros(std::size_t num_states, std::size_t num_actions) {
    return {Matrix::Zero(static_cast<Eigen::Index>(num_states),
                         static_cast<Eigen::Index>(num_actions))};
  }
  double operator()(std::size_t s, std::size_t a) const {
    return values(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
  }
  double& operator()(std::size_t s, std::size_t a) {
    return values(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
  }
  std::size_t num_states() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(values.cols()); }
};

/// State values V(s); 0 at terminal states.
struct VTable {
  Vector values;

  static VTable zeros(std::size_t num_states) {
    return {Vector::Zero(static_cast<Eigen::Index>(num_states))};
  }
  double operator()(std::size_t s) const { return values(static_cast<Eigen::Index>(s)); }
  double& operator()(std::size_t s) { return values(static_cast<Eigen::Index>(s)); }
  std::size_t num_states() const { return static_cast<std::size_t>(values.size()); }
};

/// KL temperature and discount.
struct SoftRlParams {
  double tau = 0.05;
  double gamma = 1.0;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw UsageError("tau must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0, 1]");
  }
};

template <typename Derived>
double sup_norm(const Eigen::MatrixBase<Derived>& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

/// Total-variation distance between two rows.
inline double total_variation(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += std::abs(p[i] - q[i]);
  return 0.5 * d;
}

}  // namespace klq
