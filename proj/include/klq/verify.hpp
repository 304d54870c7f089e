#pragma once

// Property suites run by `klq verify` and the acceptance binary: operator
// contraction and fixed points, TD/GAE identities, and finite-difference
// gradient checks. Every suite uses fixed seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "klq/envs.hpp"
#include "klq/estimators.hpp"
#include "klq/learners.hpp"
#include "klq/mdp.hpp"
#include "klq/rng.hpp"
#include "klq/soft_rl.hpp"
#include "klq/tables.hpp"

namespace klq {

struct CheckResult {
  std::string name;
  bool passed = true;
  double margin = 0.0;  // worst measured value against its bound (see detail)
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline std::string format_check(const CheckResult& c) {
  std::ostringstream os;
  os << (c.passed ? "PASS " : "FAIL ") << c.name << "  " << c.detail;
  return os.str();
}

namespace detail {

/// A test-bed instance: MDP, reference policy, an arbitrary policy and tau.
struct Instance {
  FiniteMdp mdp;
  PolicyTable pi_b;
  PolicyTable pi;
  SoftRlParams params;
};

inline PolicyTable random_policy(std::size_t S, std::size_t A, std::uint64_t seed) {
  return PolicyTable::from_probs(apply_support_floor(dirichlet_rows(S, A, 1.0, seed)));
}

/// i-th random instance: at most 6 states and 4 actions, gamma cycling over
/// {0.5, 0.9, 0.99}, every third one with a terminal state.
inline Instance suite_instance(std::size_t i, std::uint64_t seed) {
  static constexpr double kGammas[] = {0.5, 0.9, 0.99};
  static constexpr double kTaus[] = {0.05, 0.3, 1.0};
  Rng rng = make_substream(seed, i);
  RandomMdpSpec spec;
  spec.num_states = 2 + uniform_index(rng, 5);
  spec.num_actions = 1 + uniform_index(rng, 4);
  spec.gamma = kGammas[i % 3];
  spec.num_terminal = i % 3 == 2 ? 1 : 0;
  spec.sparsity = i % 4 == 3 ? 0.5 : 0.0;
  spec.seed = substream_seed(seed, 1000 + i);
  Instance out;
  out.mdp = build_random_mdp(spec);
  out.pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, substream_seed(seed, 2000 + i)}, out.mdp);
  out.pi = random_policy(spec.num_states, spec.num_actions, substream_seed(seed, 3000 + i));
  out.params = {kTaus[(i / 3) % 3], spec.gamma};
  return out;
}

inline QTable random_q(std::size_t S, std::size_t A, double scale, Rng& rng) {
  QTable q = QTable::zeros(S, A);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < A; ++a) q(s, a) = scale * (2.0 * uniform01(rng) - 1.0);
  return q;
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(3);
  os << x;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operator theory

/// ||B Q1 - B Q2|| <= modulus ||Q1 - Q2|| + 1e-12 for `pairs` random pairs per
/// instance; lambda < 0 checks the one-step operator (modulus gamma).
inline CheckResult check_contraction(std::size_t num_mdps, std::size_t pairs, double lambda, std::uint64_t seed = 11) {
  CheckResult r;
  r.name = lambda < 0.0 ? "contraction" : "lambda-contraction(" + detail::fmt(lambda) + ")";
  double worst_ratio_over_modulus = 0.0, worst_excess = -1e300;
  std::size_t n = 0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto in = detail::suite_instance(i, seed);
    const double g = in.mdp.gamma();
    const double modulus = lambda < 0.0 ? g : g * (1.0 - lambda) / (1.0 - lambda * g);
    Rng rng = make_substream(seed + 1, i);
    for (std::size_t k = 0; k < pairs; ++k) {
      const double scale = k % 10 == 0 ? 100.0 : 1.0;
      const QTable q1 = detail::random_q(in.mdp.num_states(), in.mdp.num_actions(), scale, rng);
      const QTable q2 = detail::random_q(in.mdp.num_states(), in.mdp.num_actions(), scale, rng);
      QTable b1, b2;
      if (lambda < 0.0) {
        b1 = soft_bellman_apply(q1, in.pi, in.mdp, in.pi_b, in.params);
        b2 = soft_bellman_apply(q2, in.pi, in.mdp, in.pi_b, in.params);
      } else {
        b1 = lambda_bellman_apply(q1, in.pi, in.mdp, in.pi_b, in.params, lambda);
        b2 = lambda_bellman_apply(q2, in.pi, in.mdp, in.pi_b, in.params, lambda);
      }
      const double lhs = sup_norm(b1.values - b2.values);
      const double rhs = sup_norm(q1.values - q2.values);
      const double excess = lhs - modulus * rhs;
      worst_excess = std::max(worst_excess, excess);
      if (modulus > 0.0) worst_ratio_over_modulus = std::max(worst_ratio_over_modulus, lhs / rhs / modulus);
      if (excess > 1e-12) r.passed = false;
      ++n;
    }
  }
  r.margin = worst_excess;
  r.detail = std::to_string(n) + " pairs, max ||BQ1-BQ2|| - m||Q1-Q2|| = " + detail::fmt(worst_excess) +
             ", max ratio/m = " + detail::fmt(worst_ratio_over_modulus);
  return r;
}

/// ||B^pi Q^pi - Q^pi|| <= 1e-10, and the same for B_lambda at each lambda.
inline CheckResult check_fixed_points(std::size_t num_mdps, std::uint64_t seed = 11) {
  CheckResult r;
  r.name = "fixed-point";
  double worst = 0.0, worst_lambda = 0.0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto in = detail::suite_instance(i, seed);
    const QTable q = exact_soft_q(in.pi, in.mdp, in.pi_b, in.params);
    worst = std::max(worst, sup_norm(soft_bellman_apply(q, in.pi, in.mdp, in.pi_b, in.params).values - q.values));
    for (double lambda : {0.5, 0.95})
      worst_lambda = std::max(worst_lambda,
                              sup_norm(lambda_bellman_apply(q, in.pi, in.mdp, in.pi_b, in.params, lambda).values -
                                       q.values));
  }
  r.passed = worst <= 1e-10 && worst_lambda <= 1e-10;
  r.margin = std::max(worst, worst_lambda);
  r.detail = "max residual B: " + detail::fmt(worst) + ", B_lambda: " + detail::fmt(worst_lambda) + " (bound 1e-10)";
  return r;
}

/// Monte-Carlo KL-augmented returns from (s, a) against Q^pi, within 3 sigma.
inline CheckResult check_monte_carlo(std::size_t num_mdps, std::size_t rollouts, std::uint64_t seed = 11) {
  CheckResult r;
  r.name = "monte-carlo";
  double worst_z = 0.0;
  std::size_t cases = 0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    auto in = detail::suite_instance(i, seed);
    if (in.mdp.gamma() > 0.95) continue;  // horizon too long for a quick check
    const QTable q = exact_soft_q(in.pi, in.mdp, in.pi_b, in.params);
    // Truncate where gamma^H is far below the Monte-Carlo error.
    const auto horizon = static_cast<std::size_t>(std::ceil(std::log(1e-16) / std::log(in.mdp.gamma())));
    Rng pick = make_substream(seed + 2, i);
    const auto nts = in.mdp.non_terminal_states();
    const std::size_t s = nts[uniform_index(pick, nts.size())];
    const std::size_t a = uniform_index(pick, in.mdp.num_actions());
    double sum = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < rollouts; ++k) {
      Rng rng = make_substream(substream_seed(seed + 3, i), k);
      const auto traj = rollout_episode(in.mdp, in.pi, rng, s, horizon, a);
      const double g = kl_augmented_return(in.mdp, traj, in.pi, in.pi_b, in.params);
      sum += g;
      sq += g * g;
    }
    const double n = static_cast<double>(rollouts);
    const double mean = sum / n;
    const double se = std::sqrt(std::max(sq / n - mean * mean, 0.0) / n);
    const double z = std::abs(mean - q(s, a)) / std::max(se, 1e-300);
    worst_z = std::max(worst_z, z);
    if (std::abs(mean - q(s, a)) > 3.0 * se + 1e-12) r.passed = false;
    ++cases;
  }
  r.margin = worst_z;
  r.detail = std::to_string(cases) + " (s,a) pairs x " + std::to_string(rollouts) +
             " rollouts, max |mean - Q|/se = " + detail::fmt(worst_z) + " (bound 3)";
  return r;
}

/// q_from_pi_v(boltzmann(Q)) == Q within 1e-10, including |Q|/tau up to 1e4.
inline CheckResult check_mapping_roundtrip(std::size_t tables, std::uint64_t seed = 11) {
  CheckResult r;
  r.name = "mapping-roundtrip";
  double worst = 0.0;
  for (std::size_t i = 0; i < tables; ++i) {
    Rng rng = make_substream(seed + 4, i);
    const std::size_t S = 1 + uniform_index(rng, 6), A = 1 + uniform_index(rng, 5);
    const double tau = i % 2 ? 1.0 : 0.05;
    const double scale = tau * (i % 4 == 0 ? 1e4 : i % 4 == 1 ? 10.0 : 1.0);
    const QTable q = detail::random_q(S, A, scale, rng);
    const auto pi_b = detail::random_policy(S, A, substream_seed(seed + 5, i));
    const auto bz = boltzmann(q, pi_b, tau);
    const QTable back = q_from_pi_v(bz.policy, bz.value, pi_b, tau);
    worst = std::max(worst, sup_norm(back.values - q.values));
  }
  r.passed = worst <= 1e-10;
  r.margin = worst;
  r.detail = std::to_string(tables) + " tables, max error " + detail::fmt(worst) + " (bound 1e-10)";
  return r;
}

/// Whenever D(pi_new||pi_B) <= D(pi||pi_B) everywhere (pi_B = Boltzmann(Q^pi)),
/// Q^{pi_new} >= Q^pi - 1e-9 elementwise.
inline CheckResult check_improvement(std::size_t num_mdps, std::uint64_t seed = 11) {
  CheckResult r;
  r.name = "improvement";
  std::size_t held = 0, tried = 0;
  double worst = 0.0;  // most negative Q^{pi_new} - Q^pi among held cases
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto in = detail::suite_instance(i, seed);
    const QTable q = exact_soft_q(in.pi, in.mdp, in.pi_b, in.params);
    const PolicyTable greedy = boltzmann(q, in.pi_b, in.params.tau).policy;
    std::vector<PolicyTable> candidates;
    for (double w : {0.0, 0.25, 0.5, 0.9, 1.0})
      candidates.push_back(PolicyTable::from_probs(w * greedy.probs() + (1.0 - w) * in.pi.probs()));
    for (std::size_t k = 0; k < 10; ++k)
      candidates.push_back(detail::random_policy(in.mdp.num_states(), in.mdp.num_actions(),
                                                 substream_seed(seed + 6, 100 * i + k)));
    for (const auto& cand : candidates) {
      ++tried;
      if (!improvement_condition_holds(in.mdp, cand, in.pi, q, in.pi_b, in.params.tau).holds) continue;
      ++held;
      const QTable qn = exact_soft_q(cand, in.mdp, in.pi_b, in.params);
      const double d = (qn.values - q.values).minCoeff();
      worst = std::min(worst, d);
      if (d < -1e-9) r.passed = false;
    }
  }
  if (held == 0) r.passed = false;
  r.margin = worst;
  r.detail = std::to_string(held) + "/" + std::to_string(tried) + " candidates met the condition, min(Q_new - Q) = " +
             detail::fmt(worst) + " (bound -1e-9)";
  return r;
}

inline SuiteReport run_operators_suite(std::size_t num_mdps = 20, std::size_t mc_rollouts = 100'000) {
  SuiteReport rep;
  rep.suite = "operators";
  rep.checks.push_back(check_contraction(num_mdps, 100, -1.0));
  for (double lambda : {0.0, 0.5, 0.95}) rep.checks.push_back(check_contraction(num_mdps, 100, lambda));
  rep.checks.push_back(check_fixed_points(num_mdps));
  rep.checks.push_back(check_monte_carlo(std::min<std::size_t>(num_mdps, 6), mc_rollouts));
  rep.checks.push_back(check_mapping_roundtrip(100));
  rep.checks.push_back(check_improvement(num_mdps));
  return rep;
}

// ---------------------------------------------------------------------------
// Estimator identities

namespace detail {

/// Random (pi, V) on an instance plus `n` sampled trajectories from its
/// initial distribution (horizon 30).
struct EstimatorCase {
  Instance in;
  VTable V;
  std::vector<Trajectory> trajs;
};

inline EstimatorCase estimator_case(std::size_t i, std::size_t n, std::uint64_t seed) {
  EstimatorCase c{suite_instance(i, seed), VTable::zeros(0), {}};
  Rng rng = make_substream(seed + 7, i);
  c.V = VTable::zeros(c.in.mdp.num_states());
  for (std::size_t s = 0; s < c.in.mdp.num_states(); ++s) c.V(s) = 4.0 * uniform01(rng) - 2.0;
  const auto batch = rollout_batch(c.in.mdp, c.in.pi, substream_seed(seed + 8, i), n, 30);
  c.trajs = batch.trajectories;
  return c;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// TD error with explicit next-state expectation and KL term versus the
/// decomposed form, with Q = q_from_pi_v(pi, V).
inline CheckResult check_td_forms(std::size_t num_mdps = 10, std::size_t per_mdp = 5, std::uint64_t seed = 21) {
  CheckResult r;
  r.name = "td-forms";
  double worst = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto c = detail::estimator_case(i, per_mdp, seed);
    const QTable q = q_from_pi_v(c.in.pi, c.V, c.in.pi_b, c.in.params.tau);
    for (const auto& t : c.trajs) {
      const auto d13 = td_errors(c.in.mdp, t, c.in.pi, c.V, c.in.pi_b, c.in.params);
      const auto d8 = td_errors_expected_form(c.in.mdp, t, c.in.pi, q, c.in.pi_b, c.in.params);
      worst = std::max(worst, detail::max_abs_diff(d13, d8));
      ++n;
    }
  }
  r.passed = worst <= 1e-10;
  r.margin = worst;
  r.detail = std::to_string(n) + " trajectories, max difference " + detail::fmt(worst) + " (bound 1e-10)";
  return r;
}

/// GAE deltas on KL-adjusted rewards equal KLQ TD errors; with alpha = 1 the
/// GAE advantage equals G_t - Q(s_t, a_t).
inline CheckResult check_gae_identity(std::size_t num_mdps = 10, std::size_t per_mdp = 5, std::uint64_t seed = 21) {
  CheckResult r;
  r.name = "gae-identity";
  double worst_delta = 0.0, worst_adv = 0.0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto c = detail::estimator_case(i, per_mdp, seed);
    const double tau = c.in.params.tau, gamma = c.in.params.gamma;
    for (const auto& t : c.trajs) {
      const auto adj = adjusted_rewards(t, c.in.pi, c.in.pi_b, tau);
      const auto klq_delta = td_errors(c.in.mdp, t, c.in.pi, c.V, c.in.pi_b, c.in.params);
      worst_delta = std::max(worst_delta, detail::max_abs_diff(gae_deltas(c.in.mdp, t, c.V, adj, gamma), klq_delta));
      for (double lambda : {0.0, 0.5, 0.95, 1.0}) {
        const auto adv = gae_advantages(c.in.mdp, t, c.V, adj, gamma, lambda);
        const auto g = lambda_targets(c.in.mdp, t, c.in.pi, c.V, c.in.pi_b, {lambda, 1.0, gamma}, tau);
        std::vector<double> g_minus_q(g.size());
        for (std::size_t k = 0; k < g.size(); ++k)
          g_minus_q[k] = g[k] - decomposed_q(c.in.pi, c.V, c.in.pi_b, tau, t.states[k], t.actions[k]);
        worst_adv = std::max(worst_adv, detail::max_abs_diff(adv, g_minus_q));
      }
    }
  }
  r.passed = worst_delta <= 1e-10 && worst_adv <= 1e-10;
  r.margin = std::max(worst_delta, worst_adv);
  r.detail = "max |GAE delta - KLQ delta| = " + detail::fmt(worst_delta) + ", max |A - (G - Q)| = " +
             detail::fmt(worst_adv) + " (bound 1e-10)";
  return r;
}

namespace detail {

struct RunningMean {
  double sum = 0.0, sq = 0.0, n = 0.0;
  void add(double x) {
    sum += x;
    sq += x * x;
    n += 1.0;
  }
  double mean() const { return sum / n; }
  double se() const { return std::sqrt(std::max(sq / n - mean() * mean(), 0.0) / n); }
};

inline std::pair<std::size_t, std::size_t> pick_pair(const FiniteMdp& mdp, Rng& rng) {
  const auto nts = mdp.non_terminal_states();
  return {nts[uniform_index(rng, nts.size())], uniform_index(rng, mdp.num_actions())};
}

}  // namespace detail

/// On-policy TD error with Q = Q^pi has zero conditional mean at a fixed (s, a).
inline CheckResult check_td_zero_mean(std::size_t num_mdps = 10, std::size_t samples = 100'000,
                                      std::uint64_t seed = 21) {
  CheckResult r;
  r.name = "td-zero-mean";
  double worst_z = 0.0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto in = detail::suite_instance(i, seed);
    const QTable q = exact_soft_q(in.pi, in.mdp, in.pi_b, in.params);
    Rng rng = make_substream(seed + 9, i);
    const auto [s, a] = detail::pick_pair(in.mdp, rng);
    detail::RunningMean m;
    Trajectory t;
    t.actions = {a};
    for (std::size_t k = 0; k < samples; ++k) {
      const auto step = sample_step(in.mdp, s, a, rng);
      t.states = {s, step.next};
      t.rewards = {step.reward};
      m.add(td_errors_expected_form(in.mdp, t, in.pi, q, in.pi_b, in.params)[0]);
    }
    const double z = std::abs(m.mean()) / std::max(m.se(), 1e-300);
    if (std::abs(m.mean()) > 3.0 * m.se() + 1e-12) r.passed = false;
    if (m.se() > 0.0) worst_z = std::max(worst_z, z);
  }
  r.margin = worst_z;
  r.detail = std::to_string(num_mdps) + " (s,a) pairs x " + std::to_string(samples) +
             " transitions, max |mean delta|/se = " + detail::fmt(worst_z) + " (bound 3)";
  return r;
}

/// Monte-Carlo mean of the conservative lambda-return target from (s, a)
/// under pi[Q] equals conservative_backup(Q)(s, a).
inline CheckResult check_target_unbiased(std::size_t num_mdps = 10, std::size_t rollouts = 10'000,
                                         std::uint64_t seed = 21) {
  static constexpr double kLambdas[] = {0.0, 0.5, 0.95, 1.0};
  static constexpr double kAlphas[] = {1.0, 0.5};
  CheckResult r;
  r.name = "target-unbiased";
  double worst_z = 0.0;
  for (std::size_t i = 0; i < num_mdps; ++i) {
    const auto in = detail::suite_instance(i, seed);
    const double lambda = kLambdas[i % 4], alpha = kAlphas[(i / 4) % 2];
    Rng rng = make_substream(seed + 10, i);
    const QTable Q = detail::random_q(in.mdp.num_states(), in.mdp.num_actions(), 1.0, rng);
    const auto bz = boltzmann(Q, in.pi_b, in.params.tau);
    const auto [s, a] = detail::pick_pair(in.mdp, rng);
    const double expected = conservative_backup(Q, in.mdp, in.pi_b, in.params, lambda, alpha)(s, a);
    // Cut where gamma^H is negligible; the cut step bootstraps with V.
    const auto horizon = static_cast<std::size_t>(std::ceil(std::log(1e-12) / std::log(in.mdp.gamma())));
    const LambdaParams lp{lambda, alpha, in.mdp.gamma()};
    detail::RunningMean m;
    for (std::size_t k = 0; k < rollouts; ++k) {
      const auto traj = rollout_episode(in.mdp, bz.policy, rng, s, horizon, a);
      m.add(lambda_targets(in.mdp, traj, bz.policy, bz.value, in.pi_b, lp, in.params.tau)[0]);
    }
    const double err = std::abs(m.mean() - expected);
    if (err > 3.0 * m.se() + 1e-9) r.passed = false;
    if (m.se() > 0.0) worst_z = std::max(worst_z, err / m.se());
  }
  r.margin = worst_z;
  r.detail = std::to_string(num_mdps) + " (s,a) pairs x " + std::to_string(rollouts) +
             " rollouts, lambda in {0, 0.5, 0.95, 1}, alpha in {1, 0.5}, max |mean G - backup|/se = " +
             detail::fmt(worst_z) + " (bound 3)";
  return r;
}

inline SuiteReport run_estimators_suite() {
  SuiteReport rep;
  rep.suite = "estimators";
  rep.checks.push_back(check_td_forms());
  rep.checks.push_back(check_gae_identity());
  rep.checks.push_back(check_td_zero_mean());
  rep.checks.push_back(check_target_unbiased());
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace detail {

struct GradCase {
  ParamState p;
  std::vector<StepSample> steps;
  PolicyTable pi_b, pi_old;
  TrainConfig cfg;
};

inline GradCase grad_case(std::size_t i, std::uint64_t seed) {
  Rng rng = make_substream(seed, i);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t S = 2 + uniform_index(rng, 4), A = 2 + uniform_index(rng, 3);
  GradCase c;
  c.p.logits = Matrix(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
  c.p.value = Vector(static_cast<Eigen::Index>(S));
  for (Eigen::Index s = 0; s < c.p.logits.rows(); ++s) {
    for (Eigen::Index a = 0; a < c.p.logits.cols(); ++a) c.p.logits(s, a) = nd(rng);
    c.p.value(s) = nd(rng);
  }
  c.pi_b = random_policy(S, A, substream_seed(seed, 10'000 + i));
  c.pi_old = random_policy(S, A, substream_seed(seed, 20'000 + i));
  c.cfg.tau = 0.05 + 0.95 * uniform01(rng);
  c.cfg.beta = 0.5 * uniform01(rng);
  c.cfg.value_coef = 0.1 + uniform01(rng);
  c.cfg.kl_direction = i % 2 ? KlDirection::Reverse : KlDirection::Forward;
  const std::size_t n = 5 + uniform_index(rng, 16);
  for (std::size_t k = 0; k < n; ++k) {
    StepSample st;
    st.state = uniform_index(rng, S);
    st.action = uniform_index(rng, A);
    st.target = 2.0 * nd(rng);
    st.advantage = nd(rng);
    st.value_target = nd(rng);
    st.old_log_prob = c.p.log_prob(st.state, st.action) + 0.3 * nd(rng);
    st.old_value = c.p.value(static_cast<Eigen::Index>(st.state)) + 0.3 * nd(rng);
    c.steps.push_back(st);
  }
  return c;
}

/// True when some step sits within `margin` of a kink of the clipped losses.
inline bool near_clip_boundary(const GradCase& c, double margin) {
  for (const auto& st : c.steps) {
    const double rho = std::exp(c.p.log_prob(st.state, st.action) - st.old_log_prob);
    if (std::abs(rho - (1.0 - c.cfg.clip_eps)) < margin || std::abs(rho - (1.0 + c.cfg.clip_eps)) < margin)
      return true;
    const double v = c.p.value(static_cast<Eigen::Index>(st.state));
    const double lo = st.old_value - c.cfg.value_clip, hi = st.old_value + c.cfg.value_clip;
    if (std::abs(v - lo) < margin || std::abs(v - hi) < margin) return true;
    const double vc = std::min(std::max(v, lo), hi);
    if (vc != v && std::abs(v + vc - 2.0 * st.value_target) < margin) return true;
  }
  return false;
}

/// Worst relative error between the analytic gradient and central differences
/// (step h) over every logit and value coordinate. Coordinates where both are
/// below `floor` in magnitude are compared on that absolute scale.
inline double gradient_error(const ParamState& p, const std::function<LossEval(const ParamState&)>& f, double h,
                             double floor) {
  const Gradient g = f(p).grad;
  double worst = 0.0;
  auto compare = [&](double analytic, double numeric) {
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor}));
  };
  ParamState q = p;
  for (Eigen::Index s = 0; s < p.logits.rows(); ++s)
    for (Eigen::Index a = 0; a < p.logits.cols(); ++a) {
      q.logits(s, a) = p.logits(s, a) + h;
      const double up = f(q).loss;
      q.logits(s, a) = p.logits(s, a) - h;
      const double down = f(q).loss;
      q.logits(s, a) = p.logits(s, a);
      compare(g.logits(s, a), (up - down) / (2.0 * h));
    }
  for (Eigen::Index s = 0; s < p.value.size(); ++s) {
    q.value(s) = p.value(s) + h;
    const double up = f(q).loss;
    q.value(s) = p.value(s) - h;
    const double down = f(q).loss;
    q.value(s) = p.value(s);
    compare(g.value(s), (up - down) / (2.0 * h));
  }
  return worst;
}

}  // namespace detail

enum class LossKind { Klq, PpoClip, PpoPenalty };

/// `instances` random cases; each passes if every coordinate agrees within
/// relative error `tol`. PPO cases near a clip kink are redrawn.
inline CheckResult check_gradients(LossKind kind, std::size_t instances = 100, double h = 1e-5, double tol = 1e-5,
                                   std::uint64_t seed = 31) {
  static constexpr double kFloor = 1e-6;
  CheckResult r;
  r.name = kind == LossKind::Klq ? "gradient-klq" : kind == LossKind::PpoClip ? "gradient-ppo-clip" : "gradient-ppo-penalty";
  std::size_t agree = 0, redrawn = 0;
  double worst = 0.0;
  for (std::size_t i = 0, drawn = 0; i < instances; ++drawn) {
    auto c = detail::grad_case(drawn, seed + static_cast<std::uint64_t>(kind));
    if (kind != LossKind::Klq && detail::near_clip_boundary(c, 1e-3)) {
      ++redrawn;
      continue;
    }
    std::function<LossEval(const ParamState&)> f;
    switch (kind) {
      case LossKind::Klq: f = [&](const ParamState& p) { return klq_loss(p, c.steps, c.pi_b, c.cfg.tau); }; break;
      case LossKind::PpoClip: f = [&](const ParamState& p) { return ppo_clip_loss(p, c.steps, c.cfg); }; break;
      case LossKind::PpoPenalty:
        f = [&](const ParamState& p) { return ppo_penalty_loss(p, c.steps, c.pi_old, c.pi_b, c.cfg); };
        break;
    }
    const double err = detail::gradient_error(c.p, f, h, kFloor);
    worst = std::max(worst, err);
    if (err <= tol) ++agree;
    ++i;
  }
  r.passed = agree == instances;
  r.margin = worst;
  r.detail = std::to_string(agree) + "/" + std::to_string(instances) + " agree, max relative error " +
             detail::fmt(worst) + " (bound " + detail::fmt(tol) + ", h " + detail::fmt(h) + ", " +
             std::to_string(redrawn) + " near-kink cases redrawn)";
  return r;
}

inline SuiteReport run_gradients_suite(std::size_t instances = 100) {
  SuiteReport rep;
  rep.suite = "gradients";
  rep.checks.push_back(check_gradients(LossKind::Klq, instances));
  rep.checks.push_back(check_gradients(LossKind::PpoClip, instances));
  rep.checks.push_back(check_gradients(LossKind::PpoPenalty, instances));
  return rep;
}

/// suite in {operators, estimators, gradients, all}.
inline std::vector<SuiteReport> run_verify(const std::string& suite, std::size_t num_mdps = 20) {
  std::vector<SuiteReport> out;
  if (suite == "operators" || suite == "all") out.push_back(run_operators_suite(num_mdps));
  if (suite == "estimators" || suite == "all") out.push_back(run_estimators_suite());
  if (suite == "gradients" || suite == "all") out.push_back(run_gradients_suite());
  if (out.empty()) throw UsageError("unknown verify suite '" + suite + "'");
  return out;
}

}  // namespace klq
