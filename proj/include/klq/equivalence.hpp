#pragma once

// Q-space conservative lambda-backups versus the (policy, value) updates of
// the penalised policy objective and the value regression. The two sequences
// are computed by separate code paths and compared through the
// Q = tau log(pi/pi_b) + V mapping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "klq/envs.hpp"
#include "klq/error.hpp"
#include "klq/learners.hpp"
#include "klq/mdp.hpp"
#include "klq/rng.hpp"
#include "klq/soft_rl.hpp"
#include "klq/tables.hpp"

namespace klq {

/// beta = tau (1 - alpha) / alpha.
inline double beta_from_alpha(double alpha, double tau) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in (0, 1]");
  if (!(tau > 0.0)) throw UsageError("tau must be > 0");
  return tau * (1.0 - alpha) / alpha;
}

/// Exact minimiser of the population squared loss against conservative
/// lambda-returns of Q_k.
inline QTable q_space_iterate(const QTable& Q_k, const FiniteMdp& mdp, const PolicyTable& pi_b,
                              const SoftRlParams& params, double lambda, double alpha) {
  return conservative_backup(Q_k, mdp, pi_b, params, lambda, alpha);
}

namespace detail {

inline void check_lambda(const FiniteMdp& mdp, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
  if (lambda * mdp.gamma() >= 1.0 && !mdp.is_episodic())
    throw UsageError("lambda * gamma >= 1 requires an episodic MDP");
}

// Expected lambda-weighted TD error sum E[sum_j (lambda gamma)^j delta_{t+j} | s, a]
// for the pair (pi, V): solves (I - lambda M_pi) X = delta_bar with
// delta_bar(s,a) = E[r + gamma V(s')] - tau log(pi/pi_b)(a|s) - V(s).
inline QTable expected_error_term(const PolicyTable& pi, const VTable& V, const FiniteMdp& mdp,
                                  const PolicyTable& pi_b, const SoftRlParams& params, double lambda) {
  check_lambda(mdp, lambda);
  QTable delta = QTable::zeros(mdp.num_states(), mdp.num_actions());
  for (auto s : mdp.non_terminal_states())
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      double v = 0.0;
      for (const auto& t : mdp.transitions(s, a))
        v += t.prob * (t.reward + (mdp.is_terminal(t.next) ? 0.0 : params.gamma * V(t.next)));
      delta(s, a) = v - params.tau * (pi.log_prob(s, a) - pi_b.log_prob(s, a)) - V(s);
    }
  return solve_policy_system(mdp, pi, lambda, delta);
}

}  // namespace detail

/// Expected lambda-advantage of (pi, V): E[G^lambda | s, a] - V(s), where the
/// lambda-return is built from Q = tau log(pi/pi_b) + V. Zero rows at terminal states.
inline QTable lambda_advantage(const PolicyTable& pi, const VTable& V, const FiniteMdp& mdp,
                               const PolicyTable& pi_b, const SoftRlParams& params, double lambda) {
  detail::check_gamma(mdp, params);
  QTable adv = detail::expected_error_term(pi, V, mdp, pi_b, params, lambda);
  for (auto s : mdp.non_terminal_states())
    for (std::size_t a = 0; a < mdp.num_actions(); ++a)
      adv(s, a) += params.tau * (pi.log_prob(s, a) - pi_b.log_prob(s, a));
  return adv;
}

/// Closed-form maximiser of
///   sum_a pi(a|s) A(s,a) - beta D(pi||pi_k)(s) - tau D(pi||pi_b)(s)
/// at every state: pi ∝ pi_b^{tau/(tau+beta)} pi_k^{beta/(tau+beta)} exp(A/(tau+beta)).
inline PolicyTable pi_objective_closed_form(const PolicyTable& pi_k, const QTable& advantage,
                                            const PolicyTable& pi_b, double tau, double beta) {
  const double w = tau + beta;
  Matrix logits(static_cast<Eigen::Index>(pi_k.num_states()), static_cast<Eigen::Index>(pi_k.num_actions()));
  for (std::size_t s = 0; s < pi_k.num_states(); ++s)
    for (std::size_t a = 0; a < pi_k.num_actions(); ++a) {
      double l = tau * pi_b.log_prob(s, a) + advantage(s, a);
      if (beta > 0.0) l += beta * pi_k.log_prob(s, a);
      logits(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = l / w;
    }
  return PolicyTable::from_logits(logits);
}

struct AscentResult {
  PolicyTable policy;
  std::size_t max_iterations = 0;   // over states
  double max_natural_gradient = 0;  // pi-weighted norm of the centred gradient at exit
  std::size_t stalled_states = 0;   // stopped by the line search, not by tol
  bool converged = true;
};

/// Numerical maximisation of the penalised objective per state by
/// natural-gradient ascent in logit space with Armijo backtracking.
/// The centred gradient g_a - E_pi[g] (the natural gradient of the
/// per-state objective) drives the step; the iteration stops once its
/// pi-weighted L2 norm is below `tol`, or when no step improves it further.
inline AscentResult maximize_pi_objective(const PolicyTable& pi_k, const QTable& advantage, const PolicyTable& pi_b,
                                          double tau, double beta, const PolicyTable& start,
                                          const std::vector<std::size_t>& states, double tol = 1e-10,
                                          std::size_t max_iterations = 100'000) {
  const std::size_t A = pi_k.num_actions();
  Matrix logits = start.log_probs();
  AscentResult out;
  std::vector<double> l(A), lp(A), p(A), g(A), trial(A), tlp(A), tp(A), tg(A);

  auto normalise = [&](const std::vector<double>& x, std::vector<double>& logp, std::vector<double>& prob) {
    const double m = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t a = 0; a < A; ++a) z += std::exp(x[a] - m);
    const double lz = m + std::log(z);
    for (std::size_t a = 0; a < A; ++a) {
      logp[a] = x[a] - lz;
      prob[a] = std::exp(logp[a]);
    }
  };
  auto objective = [&](std::size_t s, const std::vector<double>& logp, const std::vector<double>& prob) {
    double f = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      if (prob[a] == 0.0) continue;
      f += prob[a] * (advantage(s, a) - tau * (logp[a] - pi_b.log_prob(s, a)) -
                      (beta > 0.0 ? beta * (logp[a] - pi_k.log_prob(s, a)) : 0.0));
    }
    return f;
  };

  auto centred_norm = [&](std::size_t s, const std::vector<double>& logp, const std::vector<double>& prob) {
    double gb = 0.0, sq = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      tg[a] = advantage(s, a) - tau * (logp[a] - pi_b.log_prob(s, a)) -
              (beta > 0.0 ? beta * (logp[a] - pi_k.log_prob(s, a)) : 0.0);
      gb += prob[a] * tg[a];
    }
    for (std::size_t a = 0; a < A; ++a) sq += prob[a] * (tg[a] - gb) * (tg[a] - gb);
    return std::sqrt(sq);
  };

  for (auto s : states) {
    for (std::size_t a = 0; a < A; ++a) l[a] = logits(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
    // Start from a finite point even if the start policy has zeros.
    for (auto& x : l)
      if (!std::isfinite(x)) x = -700.0;
    std::size_t it = 0;
    double nat_norm = std::numeric_limits<double>::infinity();
    for (; it < max_iterations; ++it) {
      normalise(l, lp, p);
      double gbar = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        g[a] = advantage(s, a) - tau * (lp[a] - pi_b.log_prob(s, a)) -
               (beta > 0.0 ? beta * (lp[a] - pi_k.log_prob(s, a)) : 0.0);
        gbar += p[a] * g[a];
      }
      double slope = 0.0;  // <grad f, direction> = sum_a p_a (g_a - gbar)^2
      for (std::size_t a = 0; a < A; ++a) {
        g[a] -= gbar;
        slope += p[a] * g[a] * g[a];
      }
      // Probability-weighted norm: near the optimum TV(pi, pi*) is bounded
      // by roughly nat_norm / (2 (tau + beta)).
      nat_norm = std::sqrt(slope);
      if (nat_norm <= tol) break;
      const double f0 = objective(s, lp, p);
      double eta = 1.0;
      bool accepted = false;
      for (int bt = 0; bt < 40; ++bt, eta *= 0.5) {
        for (std::size_t a = 0; a < A; ++a) trial[a] = l[a] + eta * g[a];
        normalise(trial, tlp, tp);
        if (objective(s, tlp, tp) >= f0 + 1e-4 * eta * slope) {
          accepted = true;
          break;
        }
        // Near the optimum objective differences drown in rounding; the
        // gradient norm is still informative there.
        if (bt == 0 && centred_norm(s, tlp, tp) < nat_norm) {
          accepted = true;
          break;
        }
      }
      if (!accepted) {
        ++out.stalled_states;
        break;
      }
      l = trial;
    }
    out.max_iterations = std::max(out.max_iterations, it);
    out.max_natural_gradient = std::max(out.max_natural_gradient, nat_norm);
    if (nat_norm > tol) out.converged = false;
    normalise(l, lp, p);
    for (std::size_t a = 0; a < A; ++a) logits(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = lp[a];
  }
  out.policy = PolicyTable::from_log_probs(std::move(logits));
  return out;
}

/// pi_{k+1}: closed-form maximiser of the penalised objective built from the
/// lambda-advantage of (pi_k, V_k), with beta = tau (1 - alpha) / alpha.
inline PolicyTable pi_space_maximizer(const PolicyTable& pi_k, const VTable& V_k, const FiniteMdp& mdp,
                                      const PolicyTable& pi_b, const SoftRlParams& params, double lambda,
                                      double alpha) {
  const double beta = beta_from_alpha(alpha, params.tau);
  return pi_objective_closed_form(pi_k, lambda_advantage(pi_k, V_k, mdp, pi_b, params, lambda), pi_b, params.tau,
                                  beta);
}

struct VMinimizerResult {
  VTable value;
  double max_action_spread = 0.0;  // max_s (max_a y - min_a y) of the conditional target means
};

/// Exact minimiser of E[(V(s) - y)^2] with
///   y = G^{lambda,alpha}[pi_k, V_k](s,a) - tau log(pi_next(a|s)/pi_b(a|s)),
/// actions weighted uniformly.
inline VMinimizerResult v_space_minimizer(const PolicyTable& pi_k, const VTable& V_k, const PolicyTable& pi_next,
                                          const FiniteMdp& mdp, const PolicyTable& pi_b, const SoftRlParams& params,
                                          double lambda, double alpha) {
  detail::check_gamma(mdp, params);
  if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in (0, 1]");
  const QTable err = detail::expected_error_term(pi_k, V_k, mdp, pi_b, params, lambda);
  VMinimizerResult out{VTable::zeros(mdp.num_states()), 0.0};
  const double A = static_cast<double>(mdp.num_actions());
  for (auto s : mdp.non_terminal_states()) {
    double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      const double lr_next = pi_next.log_prob(s, a) - pi_b.log_prob(s, a);
      if (!std::isfinite(lr_next))
        throw SupportError("pi_next has zero mass at (" + std::to_string(s) + ", " + std::to_string(a) + ")");
      const double q_k = params.tau * (pi_k.log_prob(s, a) - pi_b.log_prob(s, a)) + V_k(s);
      const double y = q_k + alpha * err(s, a) - params.tau * lr_next;
      sum += y;
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    out.value(s) = sum / A;
    out.max_action_spread = std::max(out.max_action_spread, hi - lo);
  }
  return out;
}

struct EquivalenceOptions {
  bool numeric_ascent = true;
  double ascent_tol = 1e-10;
  std::size_t dominance_samples = 0;  // random candidates per state and iteration
  std::uint64_t seed = 0;
  std::optional<std::size_t> corrupt_v_iteration;  // test hook: perturb V_k at this k
  double corrupt_amount = 1e-3;
  double discrepancy_tol = 1e-8;
  double ascent_tv_tol = 1e-6;
  double envelope_slack = 1e-10;
};

struct EquivalenceIteration {
  std::size_t k = 0;
  double discrepancy = 0.0;   // sup |q_from_pi_v(pi_k, V_k) - Q_k| over non-terminal states
  double residual = 0.0;      // sup |Q_k - Q*|
  double ascent_tv = 0.0;     // max per-state TV between numeric and closed-form maximiser (k >= 1)
  double action_spread = 0.0; // per-action spread of the V-target means (k >= 1)
  bool dominance = true;      // closed form beats every random candidate (k >= 1)
};

struct EquivalenceReport {
  std::string mdp_descriptor;
  double alpha = 1.0, lambda = 0.0, tau = 0.0, gamma = 0.0, beta = 0.0;
  std::size_t iterations = 0;
  std::vector<EquivalenceIteration> per_iteration;
  double contraction_modulus = 0.0;  // gamma (1 - lambda) / (1 - lambda gamma)
  double envelope_modulus = 0.0;     // alpha * modulus + (1 - alpha)
  bool envelope_holds = true;
  double worst_envelope_ratio = 0.0;  // max_k residual_{k+1} / residual_k
  double final_residual = 0.0;
  bool discrepancies_ok = true;
  bool ascent_ok = true;
  bool dominance_ok = true;
  std::optional<std::size_t> first_bad_iteration;
  bool passed = true;
};

/// Runs K iterations of both update sequences from the shared Q_0.
inline EquivalenceReport run_equivalence_check(const FiniteMdp& mdp, const PolicyTable& pi_b,
                                               const SoftRlParams& params, double lambda, double alpha,
                                               std::size_t K, const QTable& Q0,
                                               const EquivalenceOptions& opt = {}) {
  detail::check_gamma(mdp, params);
  detail::check_lambda(mdp, lambda);
  EquivalenceReport rep;
  {
    std::ostringstream d;
    d << "states=" << mdp.num_states() << " actions=" << mdp.num_actions() << " episodic=" << mdp.is_episodic();
    rep.mdp_descriptor = d.str();
  }
  rep.alpha = alpha;
  rep.lambda = lambda;
  rep.tau = params.tau;
  rep.gamma = params.gamma;
  rep.beta = beta_from_alpha(alpha, params.tau);
  rep.iterations = K;
  rep.contraction_modulus =
      lambda * params.gamma < 1.0 ? params.gamma * (1.0 - lambda) / (1.0 - lambda * params.gamma) : 0.0;
  rep.envelope_modulus = alpha * rep.contraction_modulus + (1.0 - alpha);

  const auto optimum = solve_soft_optimal(mdp, pi_b, params);
  auto residual = [&](const QTable& Q) {
    double r = 0.0;
    for (auto s : mdp.non_terminal_states())
      for (std::size_t a = 0; a < mdp.num_actions(); ++a) r = std::max(r, std::abs(Q(s, a) - optimum.q(s, a)));
    return r;
  };
  auto discrepancy = [&](const QTable& Q, const PolicyTable& pi, const VTable& V) {
    double d = 0.0;
    for (auto s : mdp.non_terminal_states())
      for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
        const double q = params.tau * (pi.log_prob(s, a) - pi_b.log_prob(s, a)) + V(s);
        d = std::max(d, std::abs(q - Q(s, a)));
      }
    return d;
  };

  QTable Q = Q0;
  auto [pi, V] = boltzmann(Q0, pi_b, params.tau);
  rep.per_iteration.push_back({0, discrepancy(Q, pi, V), residual(Q), 0.0, 0.0, true});
  Rng rng = make_substream(opt.seed, 0xd0d0);

  for (std::size_t k = 0; k < K; ++k) {
    // Q-space.
    Q = q_space_iterate(Q, mdp, pi_b, params, lambda, alpha);

    // (pi, V)-space.
    const QTable adv = lambda_advantage(pi, V, mdp, pi_b, params, lambda);
    PolicyTable pi_next = pi_objective_closed_form(pi, adv, pi_b, params.tau, rep.beta);
    EquivalenceIteration row;
    row.k = k + 1;
    if (opt.numeric_ascent) {
      const auto asc =
          maximize_pi_objective(pi, adv, pi_b, params.tau, rep.beta, pi, mdp.non_terminal_states(), opt.ascent_tol);
      for (auto s : mdp.non_terminal_states())
        row.ascent_tv = std::max(row.ascent_tv, total_variation(asc.policy.row(s), pi_next.row(s)));
    }
    if (opt.dominance_samples > 0) {
      const std::size_t A = mdp.num_actions();
      std::vector<double> cand(A), logc(A), best(A), logb(A), unit(1, 1.0);
      for (auto s : mdp.non_terminal_states()) {
        auto per_state = [&](const std::vector<double>& p, const std::vector<double>& lp) {
          double f = 0.0;
          for (std::size_t a = 0; a < A; ++a) {
            if (p[a] == 0.0) continue;
            f += p[a] * (adv(s, a) - params.tau * (lp[a] - pi_b.log_prob(s, a)) -
                         rep.beta * (lp[a] - pi.log_prob(s, a)));
          }
          return f;
        };
        for (std::size_t a = 0; a < A; ++a) {
          best[a] = pi_next.prob(s, a);
          logb[a] = pi_next.log_prob(s, a);
        }
        const double f_best = per_state(best, logb);
        std::gamma_distribution<double> gd(1.0, 1.0);
        for (std::size_t n = 0; n < opt.dominance_samples; ++n) {
          double z = 0.0;
          for (std::size_t a = 0; a < A; ++a) z += (cand[a] = gd(rng) + 1e-300);
          for (std::size_t a = 0; a < A; ++a) {
            cand[a] /= z;
            logc[a] = std::log(cand[a]);
          }
          if (!(per_state(cand, logc) < f_best)) row.dominance = false;
        }
      }
    }
    const auto vmin = v_space_minimizer(pi, V, pi_next, mdp, pi_b, params, lambda, alpha);
    pi = std::move(pi_next);
    V = vmin.value;
    if (opt.corrupt_v_iteration && *opt.corrupt_v_iteration == k + 1 && !mdp.non_terminal_states().empty())
      V(mdp.non_terminal_states().front()) += opt.corrupt_amount;
    row.action_spread = vmin.max_action_spread;
    row.discrepancy = discrepancy(Q, pi, V);
    row.residual = residual(Q);
    rep.per_iteration.push_back(row);
  }

  for (std::size_t i = 0; i < rep.per_iteration.size(); ++i) {
    const auto& it = rep.per_iteration[i];
    const bool disc_ok = it.discrepancy <= opt.discrepancy_tol;
    const bool asc_ok = !opt.numeric_ascent || it.ascent_tv <= opt.ascent_tv_tol;
    rep.discrepancies_ok = rep.discrepancies_ok && disc_ok;
    rep.ascent_ok = rep.ascent_ok && asc_ok;
    rep.dominance_ok = rep.dominance_ok && it.dominance;
    if ((!disc_ok || !asc_ok || !it.dominance) && !rep.first_bad_iteration) rep.first_bad_iteration = it.k;
    if (i > 0) {
      const double prev = rep.per_iteration[i - 1].residual;
      if (prev > 0.0) rep.worst_envelope_ratio = std::max(rep.worst_envelope_ratio, it.residual / prev);
      if (it.residual > rep.envelope_modulus * prev + opt.envelope_slack) rep.envelope_holds = false;
    }
  }
  rep.final_residual = rep.per_iteration.back().residual;
  rep.passed = rep.discrepancies_ok && rep.ascent_ok && rep.dominance_ok;
  return rep;
}

inline void write_equivalence_report(std::ostream& os, const EquivalenceReport& r) {
  os << std::setprecision(6);
  os << "mdp: " << r.mdp_descriptor << "\n"
     << "alpha: " << r.alpha << "  lambda: " << r.lambda << "  tau: " << r.tau << "  gamma: " << r.gamma
     << "  beta: " << r.beta << "\n"
     << "iterations: " << r.iterations << "\n"
     << "max discrepancy: ";
  double md = 0.0, mt = 0.0, ms = 0.0;
  for (const auto& it : r.per_iteration) {
    md = std::max(md, it.discrepancy);
    mt = std::max(mt, it.ascent_tv);
    ms = std::max(ms, it.action_spread);
  }
  os << md << "\n"
     << "max numeric-ascent TV: " << mt << "\n"
     << "max V-target action spread: " << ms << "\n"
     << "final residual |Q_K - Q*|: " << r.final_residual << "\n"
     << "contraction modulus: " << r.contraction_modulus << "  envelope modulus: " << r.envelope_modulus
     << "  worst observed ratio: " << r.worst_envelope_ratio
     << "  envelope: " << (r.envelope_holds ? "holds" : "violated") << "\n";
  if (r.first_bad_iteration) os << "first bad iteration: " << *r.first_bad_iteration << "\n";
  os << "result: " << (r.passed ? "PASS" : "FAIL") << "\n";
}

inline void write_equivalence_csv(std::ostream& os, const EquivalenceReport& r) {
  os << "k,discrepancy,residual,ascent_tv,action_spread,dominance\n" << std::setprecision(17);
  for (const auto& it : r.per_iteration)
    os << it.k << ',' << it.discrepancy << ',' << it.residual << ',' << it.ascent_tv << ',' << it.action_spread
       << ',' << (it.dominance ? 1 : 0) << '\n';
}

/// Grid of random MDPs x alpha x lambda used by the equivalence command.
struct EquivalenceConfig {
  std::vector<double> alphas{0.25, 0.5, 1.0};
  std::vector<double> lambdas{0.0, 0.5, 0.95};
  std::size_t num_mdps = 5;
  std::size_t num_states = 5;
  std::size_t num_actions = 3;
  double gamma = 0.9;
  double tau = 0.05;
  std::size_t iterations = 10;
  std::size_t dominance_samples = 100;
  std::optional<std::size_t> corrupt_v_iteration;
};

struct EquivalenceGridEntry {
  std::size_t mdp_index = 0;
  EquivalenceReport report;
};

/// MDP m uses seed substream m; its reference policy is Dirichlet-random and
/// Q_0 is uniform in [-1, 1] on non-terminal states.
inline std::vector<EquivalenceGridEntry> run_equivalence_grid(const EquivalenceConfig& cfg, std::uint64_t seed) {
  std::vector<EquivalenceGridEntry> out;
  for (std::size_t m = 0; m < cfg.num_mdps; ++m) {
    RandomMdpSpec spec;
    spec.num_states = cfg.num_states;
    spec.num_actions = cfg.num_actions;
    spec.gamma = cfg.gamma;
    spec.seed = substream_seed(seed, m);
    const FiniteMdp mdp = build_random_mdp(spec);
    const PolicyTable pi_b =
        build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, substream_seed(seed, 1000 + m)}, mdp);
    Rng rng = make_substream(substream_seed(seed, 2000 + m), 0);
    QTable Q0 = QTable::zeros(mdp.num_states(), mdp.num_actions());
    for (auto s : mdp.non_terminal_states())
      for (std::size_t a = 0; a < mdp.num_actions(); ++a) Q0(s, a) = 2.0 * uniform01(rng) - 1.0;
    for (double alpha : cfg.alphas)
      for (double lambda : cfg.lambdas) {
        EquivalenceOptions opt;
        opt.dominance_samples = cfg.dominance_samples;
        opt.seed = substream_seed(seed, 3000 + m);
        opt.corrupt_v_iteration = cfg.corrupt_v_iteration;
        out.push_back({m, run_equivalence_check(mdp, pi_b, {cfg.tau, cfg.gamma}, lambda, alpha, cfg.iterations, Q0, opt)});
      }
  }
  return out;
}

}  // namespace klq
