#include <gtest/gtest.h>

#include <cmath>

#include "klq/envs.hpp"
#include "klq/equivalence.hpp"

using namespace klq;

namespace {

// Per-state objective of a two-action row, p = pi(a0).
double objective_2(double p, const double adv[2], const double pk[2], const double pb[2], double tau, double beta) {
  const double q[2] = {p, 1.0 - p};
  double f = 0.0;
  for (int a = 0; a < 2; ++a)
    if (q[a] > 0.0) f += q[a] * (adv[a] - tau * std::log(q[a] / pb[a]) - beta * std::log(q[a] / pk[a]));
  return f;
}

// Golden-section search of a concave function on [0, 1].
double golden_max(auto f) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double x1 = hi - r * (hi - lo), x2 = lo + r * (hi - lo);
    if (f(x1) < f(x2)) lo = x1;
    else hi = x2;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Equivalence, BetaFromAlpha) {
  EXPECT_DOUBLE_EQ(beta_from_alpha(0.5, 0.05), 0.05);
  EXPECT_NEAR(beta_from_alpha(0.25, 0.05), 0.15, 1e-15);
  EXPECT_EQ(beta_from_alpha(1.0, 0.05), 0.0);
  EXPECT_THROW(beta_from_alpha(0.0, 0.05), UsageError);
  EXPECT_THROW(beta_from_alpha(-1.0, 0.05), UsageError);
  EXPECT_THROW(beta_from_alpha(0.5, 0.0), UsageError);
}

TEST(Equivalence, ClosedFormMatchesAOneDimensionalSearch) {
  const double adv[2] = {0.3, -0.1}, pk[2] = {0.9, 0.1}, pb[2] = {0.4, 0.6};
  Matrix mk(1, 2), mb(1, 2);
  mk << pk[0], pk[1];
  mb << pb[0], pb[1];
  QTable A = QTable::zeros(1, 2);
  A(0, 0) = adv[0];
  A(0, 1) = adv[1];
  const auto pi_k = PolicyTable::from_probs(mk), pi_b = PolicyTable::from_probs(mb);
  for (double beta : {0.0, 0.05, 0.15, 1.0}) {
    const double tau = 0.05;
    const double p = golden_max([&](double x) { return objective_2(x, adv, pk, pb, tau, beta); });
    const auto cf = pi_objective_closed_form(pi_k, A, pi_b, tau, beta);
    EXPECT_NEAR(cf.prob(0, 0), p, 1e-7) << "beta " << beta;

    // multi-start ascent lands on the same point
    Rng rng = make_substream(11, static_cast<std::uint64_t>(beta * 100));
    for (int start = 0; start < 20; ++start) {
      Matrix s0(1, 2);
      const double u = 0.01 + 0.98 * uniform01(rng);
      s0 << u, 1.0 - u;
      const auto asc = maximize_pi_objective(pi_k, A, pi_b, tau, beta, PolicyTable::from_probs(s0), {0});
      EXPECT_NEAR(asc.policy.prob(0, 0), cf.prob(0, 0), 1e-6);
    }
  }
}

TEST(Equivalence, FullStepIgnoresTheCurrentPolicy) {
  Matrix a(1, 3), b(1, 3);
  a << 0.7, 0.2, 0.1;
  b << 0.1, 0.1, 0.8;
  QTable A = QTable::zeros(1, 3);
  A(0, 0) = 1.0;
  const auto pi_b = PolicyTable::uniform(1, 3);
  const auto x = pi_objective_closed_form(PolicyTable::from_probs(a), A, pi_b, 0.5, beta_from_alpha(1.0, 0.5));
  const auto y = pi_objective_closed_form(PolicyTable::from_probs(b), A, pi_b, 0.5, beta_from_alpha(1.0, 0.5));
  EXPECT_LT(total_variation(x.row(0), y.row(0)), 1e-15);
}

TEST(Equivalence, BanditFirstIterateByHand) {
  const auto mdp = make_bandit_mdp({1.0, 0.0});
  const auto pi_b = PolicyTable::uniform(2, 2);
  const SoftRlParams params{1.0, 1.0};
  const VTable V0 = VTable::zeros(2);
  const auto pi1 = pi_space_maximizer(pi_b, V0, mdp, pi_b, params, 0.0, 1.0);
  EXPECT_NEAR(pi1.prob(0, 0), std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-14);
  const auto v1 = v_space_minimizer(pi_b, V0, pi1, mdp, pi_b, params, 0.0, 1.0);
  EXPECT_NEAR(v1.value(0), std::log((std::exp(1.0) + 1.0) / 2.0), 1e-14);
  EXPECT_LT(v1.max_action_spread, 1e-14);
}

TEST(Equivalence, ZeroIterationsPassTrivially) {
  const auto mdp = build_random_mdp({4, 2, 0.9, 0.0, 1, 3});
  const auto pi_b = PolicyTable::uniform(4, 2);
  const auto rep = run_equivalence_check(mdp, pi_b, {0.05, 0.9}, 0.5, 0.5, 0, QTable::zeros(4, 2));
  EXPECT_TRUE(rep.passed);
  EXPECT_EQ(rep.per_iteration.size(), 1u);
}

TEST(Equivalence, SequencesAgreeOnARandomMdp) {
  const auto mdp = build_random_mdp({5, 3, 0.9, 0.0, 1, 21});
  const auto pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 4}, mdp);
  EquivalenceOptions opt;
  opt.dominance_samples = 20;
  for (double alpha : {0.25, 1.0})
    for (double lambda : {0.0, 0.95}) {
      const auto rep = run_equivalence_check(mdp, pi_b, {0.05, 0.9}, lambda, alpha, 8, QTable::zeros(5, 3), opt);
      EXPECT_TRUE(rep.passed) << "alpha " << alpha << " lambda " << lambda;
      EXPECT_FALSE(rep.first_bad_iteration.has_value());
      EXPECT_NEAR(rep.contraction_modulus, 0.9 * (1 - lambda) / (1 - lambda * 0.9), 1e-15);
      if (lambda == 0.0) EXPECT_TRUE(rep.envelope_holds);
    }
}

TEST(Equivalence, CorruptionIsReportedAtItsIteration) {
  const auto mdp = build_random_mdp({4, 2, 0.9, 0.0, 1, 3});
  const auto pi_b = PolicyTable::uniform(4, 2);
  EquivalenceOptions opt;
  opt.corrupt_v_iteration = 3;
  const auto rep = run_equivalence_check(mdp, pi_b, {0.05, 0.9}, 0.5, 0.5, 6, QTable::zeros(4, 2), opt);
  EXPECT_FALSE(rep.passed);
  ASSERT_TRUE(rep.first_bad_iteration.has_value());
  EXPECT_EQ(*rep.first_bad_iteration, 3u);
}
