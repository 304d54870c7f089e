#pragma once

// Exact KL-regularised RL on finite MDPs: KL terms, soft Bellman operators,
// the Boltzmann (pi, V) <-> Q mapping, exact evaluation and soft-optimal
// solvers.
//
// Every operator here is affine in Q for a fixed policy pi:
//
//   (B^pi Q)(s, a) = c(s, a) + (M Q)(s, a)
//   c(s, a)   = sum_s' P(s'|s,a) [ r(s,a,s') - gamma tau D(pi||pi_b)(s') ]
//   (M Q)(s,a) = gamma sum_s' P(s'|s,a) sum_a' pi(a'|s') Q(s', a')
//
// with terminal s' contributing only r. Solves of (I - k M) X = b are done by
// backward substitution on episodic MDPs and by dense LU otherwise.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "klq/error.hpp"
#include "klq/mdp.hpp"
#include "klq/tables.hpp"

namespace klq {

namespace detail {

inline void check_shape(const FiniteMdp& mdp, std::size_t rows, std::size_t cols, const char* what) {
  if (rows != mdp.num_states() || cols != mdp.num_actions())
    throw UsageError(std::string(what) + " shape does not match the MDP");
}

// The MDP's discount is authoritative; params.gamma must agree with it.
inline void check_gamma(const FiniteMdp& mdp, const SoftRlParams& params) {
  params.validate();
  if (params.gamma != mdp.gamma())
    throw UsageError("params.gamma (" + std::to_string(params.gamma) + ") differs from the MDP discount (" +
                     std::to_string(mdp.gamma()) + ")");
}

inline double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  return m + std::log(z);
}

}  // namespace detail

/// D(pi || pi_b)(s). Throws SupportError when pi puts mass where pi_b has none.
inline double kl_at_state(const PolicyTable& pi, const PolicyTable& pi_b, std::size_t s) {
  double kl = 0.0;
  for (std::size_t a = 0; a < pi.num_actions(); ++a) {
    const double p = pi.prob(s, a);
    if (p == 0.0) continue;
    const double lq = pi_b.log_prob(s, a);
    if (!std::isfinite(lq))
      throw SupportError("KL undefined: reference probability is 0 at (" + std::to_string(s) + ", " +
                         std::to_string(a) + ") where the policy is positive");
    kl += p * (pi.log_prob(s, a) - lq);
  }
  return std::max(kl, 0.0);
}

/// KL of every state; 0 at terminal states.
inline Vector kl_per_state(const FiniteMdp& mdp, const PolicyTable& pi, const PolicyTable& pi_b) {
  Vector d = Vector::Zero(static_cast<Eigen::Index>(mdp.num_states()));
  for (auto s : mdp.non_terminal_states()) d(static_cast<Eigen::Index>(s)) = kl_at_state(pi, pi_b, s);
  return d;
}

/// KL-augmented return from step t:
/// sum_{k=t}^{T-1} gamma^{k-t} ( r_{k+1} - tau gamma D(pi||pi_b)(s_{k+1}) ),
/// with D = 0 at terminal states.
inline double kl_augmented_return(const FiniteMdp& mdp, const Trajectory& traj, const PolicyTable& pi,
                                  const PolicyTable& pi_b, const SoftRlParams& params, std::size_t t = 0) {
  detail::check_gamma(mdp, params);
  if (t >= traj.length()) throw UsageError("kl_augmented_return: start step past the end of the trajectory");
  double g = 0.0;
  double disc = 1.0;
  for (std::size_t k = t; k < traj.length(); ++k) {
    const std::size_t next = traj.states[k + 1];
    const double d = mdp.is_terminal(next) ? 0.0 : kl_at_state(pi, pi_b, next);
    g += disc * (traj.rewards[k] - params.tau * params.gamma * d);
    disc *= params.gamma;
  }
  return g;
}

/// Expected next-state value sum_a pi(a|s) Q(s, a) for every state.
inline Vector policy_average(const PolicyTable& pi, const QTable& Q) {
  return (pi.probs().array() * Q.values.array()).rowwise().sum().matrix();
}

/// (M Q)(s, a): discounted expectation of the next state's pi-average of Q.
inline QTable apply_transition_operator(const FiniteMdp& mdp, const PolicyTable& pi, const QTable& Q) {
  const Vector avg = policy_average(pi, Q);
  QTable out = QTable::zeros(mdp.num_states(), mdp.num_actions());
  for (auto s : mdp.non_terminal_states())
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      double v = 0.0;
      for (const auto& t : mdp.transitions(s, a))
        if (!mdp.is_terminal(t.next)) v += t.prob * avg(static_cast<Eigen::Index>(t.next));
      out(s, a) = mdp.gamma() * v;
    }
  return out;
}

/// Constant part c of B^pi.
inline QTable soft_bellman_offset(const FiniteMdp& mdp, const PolicyTable& pi, const PolicyTable& pi_b,
                                  const SoftRlParams& params) {
  const Vector kl = kl_per_state(mdp, pi, pi_b);
  QTable c = QTable::zeros(mdp.num_states(), mdp.num_actions());
  for (auto s : mdp.non_terminal_states())
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      double v = 0.0;
      for (const auto& t : mdp.transitions(s, a)) {
        v += t.prob * t.reward;
        if (!mdp.is_terminal(t.next))
          v -= t.prob * mdp.gamma() * params.tau * kl(static_cast<Eigen::Index>(t.next));
      }
      c(s, a) = v;
    }
  return c;
}

/// Solves (I - k M) X = b for X, where M is the transition operator of pi.
inline QTable solve_policy_system(const FiniteMdp& mdp, const PolicyTable& pi, double k, const QTable& b) {
  const std::size_t A = mdp.num_actions();
  QTable X = QTable::zeros(mdp.num_states(), A);
  if (mdp.is_episodic()) {
    const auto& order = mdp.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t s = *it;
      for (std::size_t a = 0; a < A; ++a) {
        double v = 0.0;
        for (const auto& t : mdp.transitions(s, a)) {
          if (mdp.is_terminal(t.next)) continue;
          double avg = 0.0;
          for (std::size_t a2 = 0; a2 < A; ++a2) avg += pi.prob(t.next, a2) * X(t.next, a2);
          v += t.prob * avg;
        }
        X(s, a) = b(s, a) + k * mdp.gamma() * v;
      }
    }
    return X;
  }

  const auto& states = mdp.non_terminal_states();
  const std::size_t n = states.size() * A;
  if (n > kDenseSolveBudget)
    throw BudgetError("dense solve needs " + std::to_string(n) + " state-action pairs; budget is " +
                      std::to_string(kDenseSolveBudget));
  std::vector<std::ptrdiff_t> pos(mdp.num_states(), -1);
  for (std::size_t i = 0; i < states.size(); ++i) pos[states[i]] = static_cast<std::ptrdiff_t>(i);
  Matrix K = Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Vector rhs(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < states.size(); ++i) {
    const std::size_t s = states[i];
    for (std::size_t a = 0; a < A; ++a) {
      const auto row = static_cast<Eigen::Index>(i * A + a);
      rhs(row) = b(s, a);
      for (const auto& t : mdp.transitions(s, a)) {
        if (pos[t.next] < 0) continue;
        for (std::size_t a2 = 0; a2 < A; ++a2)
          K(row, static_cast<Eigen::Index>(static_cast<std::size_t>(pos[t.next]) * A + a2)) -=
              k * mdp.gamma() * t.prob * pi.prob(t.next, a2);
      }
    }
  }
  const Vector x = K.partialPivLu().solve(rhs);
  const double resid = (K * x - rhs).cwiseAbs().maxCoeff();
  if (!x.allFinite() || resid > 1e-8 * (1.0 + rhs.cwiseAbs().maxCoeff()))
    throw ConvergenceError("policy system is singular (residual " + std::to_string(resid) + ")");
  for (std::size_t i = 0; i < states.size(); ++i)
    for (std::size_t a = 0; a < A; ++a) X(states[i], a) = x(static_cast<Eigen::Index>(i * A + a));
  return X;
}

/// One application of the soft Bellman operator B^pi.
inline QTable soft_bellman_apply(const QTable& Q, const PolicyTable& pi, const FiniteMdp& mdp,
                                 const PolicyTable& pi_b, const SoftRlParams& params) {
  detail::check_gamma(mdp, params);
  detail::check_shape(mdp, Q.num_states(), Q.num_actions(), "Q");
  detail::check_shape(mdp, pi.num_states(), pi.num_actions(), "pi");
  detail::check_shape(mdp, pi_b.num_states(), pi_b.num_actions(), "pi_b");
  QTable out = soft_bellman_offset(mdp, pi, pi_b, params);
  out.values += apply_transition_operator(mdp, pi, Q).values;
  return out;
}

/// lambda-weighted soft Bellman operator (1 - lambda) sum_n lambda^{n-1} (B^pi)^n Q
/// in closed form: (I - lambda M)^{-1} (c + (1 - lambda) M Q).
inline QTable lambda_bellman_apply(const QTable& Q, const PolicyTable& pi, const FiniteMdp& mdp,
                                   const PolicyTable& pi_b, const SoftRlParams& params, double lambda) {
  detail::check_gamma(mdp, params);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
  if (lambda * mdp.gamma() >= 1.0) throw UsageError("lambda * gamma >= 1: the lambda-series diverges");
  detail::check_shape(mdp, Q.num_states(), Q.num_actions(), "Q");
  QTable rhs = soft_bellman_offset(mdp, pi, pi_b, params);
  rhs.values += (1.0 - lambda) * apply_transition_operator(mdp, pi, Q).values;
  if (lambda == 0.0) return rhs;
  return solve_policy_system(mdp, pi, lambda, rhs);
}

struct BoltzmannResult {
  PolicyTable policy;
  VTable value;
};

/// Boltzmann policy and state value of Q:
///   V(s) = tau log sum_a pi_b(a|s) exp(Q(s,a)/tau)   (max-shifted)
///   pi(a|s) = pi_b(a|s) exp((Q(s,a) - V(s))/tau)
/// Terminal rows (Q = 0) give V = 0 and pi = pi_b.
inline BoltzmannResult boltzmann(const QTable& Q, const PolicyTable& pi_b, double tau) {
  if (!(tau > 0.0)) throw UsageError("tau must be > 0");
  if (Q.num_states() != pi_b.num_states() || Q.num_actions() != pi_b.num_actions())
    throw UsageError("Q and pi_b shapes differ");
  const std::size_t S = Q.num_states(), A = Q.num_actions();
  Matrix logp(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
  VTable V = VTable::zeros(S);
  std::vector<double> z(A);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) z[a] = pi_b.log_prob(s, a) + Q(s, a) / tau;
    const double lse = detail::log_sum_exp(z);
    V(s) = tau * lse;
    for (std::size_t a = 0; a < A; ++a)
      logp(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = z[a] - lse;
  }
  return {PolicyTable::from_log_probs(std::move(logp)), std::move(V)};
}

/// Inverse of boltzmann: Q(s,a) = tau log(pi(a|s)/pi_b(a|s)) + V(s).
inline QTable q_from_pi_v(const PolicyTable& pi, const VTable& V, const PolicyTable& pi_b, double tau) {
  if (pi.num_states() != pi_b.num_states() || pi.num_actions() != pi_b.num_actions() ||
      V.num_states() != pi.num_states())
    throw UsageError("q_from_pi_v: shapes differ");
  QTable Q = QTable::zeros(pi.num_states(), pi.num_actions());
  for (std::size_t s = 0; s < pi.num_states(); ++s)
    for (std::size_t a = 0; a < pi.num_actions(); ++a) {
      const double lp = pi.log_prob(s, a), lb = pi_b.log_prob(s, a);
      if (!std::isfinite(lp) || !std::isfinite(lb))
        throw SupportError("q_from_pi_v: zero probability at (" + std::to_string(s) + ", " + std::to_string(a) + ")");
      Q(s, a) = tau * (lp - lb) + V(s);
    }
  return Q;
}

/// Q^pi: the unique fixed point of B^pi. Dense solve for gamma < 1, backward
/// induction for episodic MDPs (required when gamma = 1).
inline QTable exact_soft_q(const PolicyTable& pi, const FiniteMdp& mdp, const PolicyTable& pi_b,
                           const SoftRlParams& params) {
  detail::check_gamma(mdp, params);
  if (mdp.gamma() >= 1.0 && !mdp.is_episodic())
    throw UsageError("gamma = 1 policy evaluation requires an episodic MDP");
  detail::check_shape(mdp, pi.num_states(), pi.num_actions(), "pi");
  return solve_policy_system(mdp, pi, 1.0, soft_bellman_offset(mdp, pi, pi_b, params));
}

/// B^{lambda,alpha} Q = alpha B_lambda^{pi[Q]} Q + (1 - alpha) Q, with pi[Q]
/// the Boltzmann policy of Q.
inline QTable conservative_backup(const QTable& Q, const FiniteMdp& mdp, const PolicyTable& pi_b,
                                  const SoftRlParams& params, double lambda, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in (0, 1]");
  const auto pol = boltzmann(Q, pi_b, params.tau).policy;
  QTable out = lambda_bellman_apply(Q, pol, mdp, pi_b, params, lambda);
  if (alpha != 1.0) out.values = alpha * out.values + (1.0 - alpha) * Q.values;
  return out;
}

struct SoftOptimalSolution {
  QTable q;
  PolicyTable policy;
  VTable value;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Soft-optimal backup Q <- B^{pi[Q]} Q. By the Gibbs variational identity
/// sum_a pi[Q](a|s) Q(s,a) - tau D(pi[Q]||pi_b)(s) = V[Q](s), so the backup is
/// r + gamma V[Q](s').
inline QTable soft_optimal_backup(const QTable& Q, const FiniteMdp& mdp, const PolicyTable& pi_b,
                                  const SoftRlParams& params) {
  const VTable V = boltzmann(Q, pi_b, params.tau).value;
  QTable out = QTable::zeros(mdp.num_states(), mdp.num_actions());
  for (auto s : mdp.non_terminal_states())
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      double v = 0.0;
      for (const auto& t : mdp.transitions(s, a))
        v += t.prob * (t.reward + (mdp.is_terminal(t.next) ? 0.0 : mdp.gamma() * V(t.next)));
      out(s, a) = v;
    }
  return out;
}

/// Soft value iteration from Q = 0 until the sup-norm change is <= tol.
inline SoftOptimalSolution soft_value_iteration(const FiniteMdp& mdp, const PolicyTable& pi_b,
                                                const SoftRlParams& params, double tol = 1e-10,
                                                std::size_t max_iterations = 1'000'000) {
  detail::check_gamma(mdp, params);
  if (mdp.gamma() >= 1.0 && !mdp.is_episodic())
    throw UsageError("gamma = 1 value iteration requires an episodic MDP");
  QTable Q = QTable::zeros(mdp.num_states(), mdp.num_actions());
  double delta = std::numeric_limits<double>::infinity();
  std::size_t it = 0;
  while (it < max_iterations) {
    QTable next = soft_optimal_backup(Q, mdp, pi_b, params);
    delta = sup_norm(next.values - Q.values);
    Q = std::move(next);
    ++it;
    if (delta <= tol) break;
  }
  if (delta > tol)
    throw ConvergenceError("soft value iteration stopped after " + std::to_string(it) +
                           " iterations with residual " + std::to_string(delta));
  auto [pol, V] = boltzmann(Q, pi_b, params.tau);
  return {std::move(Q), std::move(pol), std::move(V), it, delta};
}

/// Exact backward induction on an episodic MDP:
/// V*(s) = tau log sum_a pi_b(a|s) exp( E[r + gamma V*(s')] / tau ).
inline SoftOptimalSolution soft_backward_induction(const FiniteMdp& mdp, const PolicyTable& pi_b,
                                                   const SoftRlParams& params) {
  detail::check_gamma(mdp, params);
  if (!mdp.is_episodic()) throw UsageError("backward induction requires an episodic MDP");
  const std::size_t A = mdp.num_actions();
  QTable Q = QTable::zeros(mdp.num_states(), A);
  VTable V = VTable::zeros(mdp.num_states());
  std::vector<double> z(A);
  const auto& order = mdp.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const std::size_t s = *it;
    for (std::size_t a = 0; a < A; ++a) {
      double v = 0.0;
      for (const auto& t : mdp.transitions(s, a))
        v += t.prob * (t.reward + (mdp.is_terminal(t.next) ? 0.0 : mdp.gamma() * V(t.next)));
      Q(s, a) = v;
      z[a] = pi_b.log_prob(s, a) + v / params.tau;
    }
    V(s) = params.tau * detail::log_sum_exp(z);
  }
  auto bz = boltzmann(Q, pi_b, params.tau);
  return {std::move(Q), std::move(bz.policy), std::move(V), order.size(), 0.0};
}

/// Soft-optimal (Q*, pi*, V*). Backward induction when gamma = 1 (episodic
/// MDPs only), soft value iteration otherwise.
inline SoftOptimalSolution solve_soft_optimal(const FiniteMdp& mdp, const PolicyTable& pi_b,
                                              const SoftRlParams& params) {
  if (mdp.gamma() >= 1.0) return soft_backward_induction(mdp, pi_b, params);
  return soft_value_iteration(mdp, pi_b, params);
}

struct ImprovementVerdict {
  std::vector<bool> per_state;  // indexed by state id; terminal states are true
  bool holds = true;
};

/// Checks D(pi_new || pi_B)(s) <= D(pi || pi_B)(s) at every non-terminal
/// state, where pi_B = Boltzmann(Q).
inline ImprovementVerdict improvement_condition_holds(const FiniteMdp& mdp, const PolicyTable& pi_new,
                                                      const PolicyTable& pi, const QTable& Q,
                                                      const PolicyTable& pi_b, double tau) {
  const auto pol_b = boltzmann(Q, pi_b, tau).policy;
  ImprovementVerdict v;
  v.per_state.assign(mdp.num_states(), true);
  for (auto s : mdp.non_terminal_states()) {
    const bool ok = kl_at_state(pi_new, pol_b, s) <= kl_at_state(pi, pol_b, s);
    v.per_state[s] = ok;
    v.holds = v.holds && ok;
  }
  return v;
}

/// Expected KL-regularised return of pi from the initial distribution:
/// sum_s mu(s) [ sum_a pi(a|s) Q^pi(s,a) - tau D(pi||pi_b)(s) ].
inline double policy_objective(const FiniteMdp& mdp, const PolicyTable& pi, const PolicyTable& pi_b,
                               const SoftRlParams& params) {
  detail::check_gamma(mdp, params);
  const QTable Q = exact_soft_q(pi, mdp, pi_b, params);
  const Vector avg = policy_average(pi, Q);
  double total = 0.0;
  for (auto s : mdp.non_terminal_states()) {
    const double mu = mdp.initial_distribution()(static_cast<Eigen::Index>(s));
    if (mu == 0.0) continue;
    total += mu * (avg(static_cast<Eigen::Index>(s)) - params.tau * kl_at_state(pi, pi_b, s));
  }
  return total;
}

}  // namespace klq
