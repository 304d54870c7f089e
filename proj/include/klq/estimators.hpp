#pragma once

// Per-trajectory regression targets: KL-adjusted rewards, TD errors,
// conservative lambda-return targets and GAE advantages.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "klq/error.hpp"
#include "klq/mdp.hpp"
#include "klq/soft_rl.hpp"
#include "klq/tables.hpp"

namespace klq {

struct LambdaParams {
  double lambda = 0.95;
  double alpha = 1.0;
  double gamma = 1.0;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in (0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0, 1]");
  }
};

namespace detail {

inline double log_ratio(const PolicyTable& pi, const PolicyTable& pi_b, std::size_t s, std::size_t a) {
  const double lp = pi.log_prob(s, a), lb = pi_b.log_prob(s, a);
  if (!std::isfinite(lb))
    throw SupportError("reference policy has zero mass on taken action (" + std::to_string(s) + ", " +
                       std::to_string(a) + ")");
  if (!std::isfinite(lp))
    throw SupportError("policy has zero mass on taken action (" + std::to_string(s) + ", " + std::to_string(a) + ")");
  return lp - lb;
}

/// Bootstrap value of a reached state: 0 at terminal states.
inline double bootstrap(const FiniteMdp& mdp, const VTable& V, std::size_t s) {
  return mdp.is_terminal(s) ? 0.0 : V(s);
}

}  // namespace detail

/// r_bar_{t+1} = r_{t+1} - tau log(pi(a_t|s_t) / pi_b(a_t|s_t)).
inline std::vector<double> adjusted_rewards(const Trajectory& traj, const PolicyTable& pi, const PolicyTable& pi_b,
                                            double tau) {
  std::vector<double> out(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t) {
    out[t] = traj.rewards[t];
    if (tau != 0.0) out[t] -= tau * detail::log_ratio(pi, pi_b, traj.states[t], traj.actions[t]);
  }
  return out;
}

/// Q(s_t, a_t) under the decomposition Q = tau log(pi/pi_b) + V.
inline double decomposed_q(const PolicyTable& pi, const VTable& V, const PolicyTable& pi_b, double tau,
                           std::size_t s, std::size_t a) {
  return tau * detail::log_ratio(pi, pi_b, s, a) + V(s);
}

/// delta_t = r_{t+1} + gamma V(s_{t+1}) - Q(s_t, a_t), with Q from the
/// decomposition. The log-probabilities of the next-state KL penalty cancel
/// against those inside Q, so only V is needed at s_{t+1}.
inline std::vector<double> td_errors(const FiniteMdp& mdp, const Trajectory& traj, const PolicyTable& pi,
                                     const VTable& V, const PolicyTable& pi_b, const SoftRlParams& params) {
  params.validate();
  std::vector<double> out(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t) {
    const std::size_t s = traj.states[t], a = traj.actions[t];
    out[t] = traj.rewards[t] + params.gamma * detail::bootstrap(mdp, V, traj.states[t + 1]) -
             decomposed_q(pi, V, pi_b, params.tau, s, a);
  }
  return out;
}

/// The same TD error written with an explicit next-state expectation and KL
/// term: r + gamma (sum_a' pi(a'|s') Q(s', a') - tau D(s')) - Q(s, a), for an
/// arbitrary action-value table Q.
inline std::vector<double> td_errors_expected_form(const FiniteMdp& mdp, const Trajectory& traj,
                                                   const PolicyTable& pi, const QTable& Q, const PolicyTable& pi_b,
                                                   const SoftRlParams& params) {
  params.validate();
  std::vector<double> out(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t) {
    const std::size_t next = traj.states[t + 1];
    double boot = 0.0;
    if (!mdp.is_terminal(next)) {
      for (std::size_t a = 0; a < mdp.num_actions(); ++a) boot += pi.prob(next, a) * Q(next, a);
      boot -= params.tau * kl_at_state(pi, pi_b, next);
    }
    out[t] = traj.rewards[t] + params.gamma * boot - Q(traj.states[t], traj.actions[t]);
  }
  return out;
}

/// Backward recursion x_t = d_t + k x_{t+1} with x_T = 0.
inline std::vector<double> discounted_suffix(const std::vector<double>& d, double k) {
  std::vector<double> x(d.size());
  double next = 0.0;
  for (std::size_t i = d.size(); i-- > 0;) {
    next = d[i] + k * next;
    x[i] = next;
  }
  return x;
}

/// Conservative lambda-return targets G_t = alpha Delta_t + Q(s_t, a_t) with
/// Delta_t = delta_t + lambda gamma Delta_{t+1}.
inline std::vector<double> lambda_targets(const FiniteMdp& mdp, const Trajectory& traj, const PolicyTable& pi,
                                          const VTable& V, const PolicyTable& pi_b, const LambdaParams& lp,
                                          double tau) {
  lp.validate();
  const auto delta = td_errors(mdp, traj, pi, V, pi_b, SoftRlParams{tau, lp.gamma});
  const auto err = discounted_suffix(delta, lp.lambda * lp.gamma);
  std::vector<double> out(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t)
    out[t] = lp.alpha * err[t] + decomposed_q(pi, V, pi_b, tau, traj.states[t], traj.actions[t]);
  return out;
}

/// GAE over adjusted rewards: A_t = delta_t + lambda gamma A_{t+1},
/// delta_t = r_bar_{t+1} + gamma V(s_{t+1}) - V(s_t).
inline std::vector<double> gae_advantages(const FiniteMdp& mdp, const Trajectory& traj, const VTable& V,
                                          const std::vector<double>& adjusted, double gamma, double lambda) {
  if (adjusted.size() != traj.length()) throw UsageError("adjusted rewards do not match trajectory length");
  std::vector<double> delta(traj.length());
  for (std::size_t t = 0; t < traj.length(); ++t)
    delta[t] = adjusted[t] + gamma * detail::bootstrap(mdp, V, traj.states[t + 1]) - V(traj.states[t]);
  return discounted_suffix(delta, lambda * gamma);
}

/// GAE temporal differences (before the lambda recursion).
inline std::vector<double> gae_deltas(const FiniteMdp& mdp, const Trajectory& traj, const VTable& V,
                                      const std::vector<double>& adjusted, double gamma) {
  return gae_advantages(mdp, traj, V, adjusted, gamma, 0.0);
}

/// Value-head regression targets for PPO: the discounted sum of adjusted
/// rewards from t onwards, bootstrapped with V(s_T) when the episode was cut
/// at a non-terminal state.
inline std::vector<double> ppo_value_targets(const FiniteMdp& mdp, const Trajectory& traj, const VTable& V,
                                             const std::vector<double>& adjusted, double gamma) {
  std::vector<double> out(traj.length());
  double next = detail::bootstrap(mdp, V, traj.final_state());
  for (std::size_t i = traj.length(); i-- > 0;) {
    next = adjusted[i] + gamma * next;
    out[i] = next;
  }
  return out;
}

/// Targets of one trajectory, all computed from the same frozen snapshot.
struct TrajectoryTargets {
  std::vector<double> td_error;    // KLQ delta_t
  std::vector<double> error_term;  // Delta_t
  std::vector<double> target;      // G_t
  std::vector<double> advantage;   // GAE A_t (empty unless requested)
  std::vector<double> value_target;
  std::vector<double> adjusted_reward;
};

struct TargetBatch {
  std::vector<TrajectoryTargets> per_trajectory;
  std::uint64_t snapshot_tag = 0;

  std::size_t size() const { return per_trajectory.size(); }
};

/// Computes KLQ targets (and GAE quantities if `with_gae`) for every
/// trajectory of `batch` under the snapshot (pi, V).
inline TargetBatch compute_targets(const FiniteMdp& mdp, const TrajectoryBatch& batch, const PolicyTable& pi,
                                   const VTable& V, const PolicyTable& pi_b, const LambdaParams& lp, double tau,
                                   bool with_gae, std::uint64_t snapshot_tag) {
  lp.validate();
  TargetBatch out;
  out.snapshot_tag = snapshot_tag;
  out.per_trajectory.reserve(batch.size());
  const SoftRlParams params{tau, lp.gamma};
  for (const auto& traj : batch.trajectories) {
    TrajectoryTargets tt;
    tt.td_error = td_errors(mdp, traj, pi, V, pi_b, params);
    tt.error_term = discounted_suffix(tt.td_error, lp.lambda * lp.gamma);
    tt.target.resize(traj.length());
    for (std::size_t t = 0; t < traj.length(); ++t)
      tt.target[t] = lp.alpha * tt.error_term[t] + decomposed_q(pi, V, pi_b, tau, traj.states[t], traj.actions[t]);
    if (with_gae) {
      tt.adjusted_reward = adjusted_rewards(traj, pi, pi_b, tau);
      tt.advantage = gae_advantages(mdp, traj, V, tt.adjusted_reward, lp.gamma, lp.lambda);
      tt.value_target = ppo_value_targets(mdp, traj, V, tt.adjusted_reward, lp.gamma);
    }
    out.per_trajectory.push_back(std::move(tt));
  }
  return out;
}

/// CSV dump: traj,t,delta,error,target,advantage (advantage blank when absent).
inline void write_targets_csv(std::ostream& os, const TargetBatch& tb) {
  os << "# snapshot " << tb.snapshot_tag << "\n";
  os << "traj,t,delta,error,target,advantage\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < tb.size(); ++i) {
    const auto& tt = tb.per_trajectory[i];
    for (std::size_t t = 0; t < tt.target.size(); ++t) {
      os << i << ',' << t << ',' << tt.td_error[t] << ',' << tt.error_term[t] << ',' << tt.target[t] << ',';
      if (!tt.advantage.empty()) os << tt.advantage[t];
      os << '\n';
    }
  }
}

}  // namespace klq
