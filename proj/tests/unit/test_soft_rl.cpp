#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "klq/envs.hpp"
#include "klq/soft_rl.hpp"

using namespace klq;

namespace {

// s0 --a0--> s1 (r=1), s0 --a1--> s2 (r=0); from s1 any action -> s2 with r=2.
FiniteMdp chain(double gamma = 1.0) {
  std::vector<std::vector<Transition>> rows(6);
  rows[0] = {{1, 1.0, 1.0}};
  rows[1] = {{2, 1.0, 0.0}};
  rows[2] = {{2, 1.0, 2.0}};
  rows[3] = {{2, 1.0, 2.0}};
  Vector init = Vector::Zero(3);
  init(0) = 1.0;
  return FiniteMdp(3, 2, gamma, rows, {false, false, true}, init);
}

PolicyTable skewed() {
  Matrix p(3, 2);
  p << 0.3, 0.7, 0.8, 0.2, 0.5, 0.5;
  return PolicyTable::from_probs(p);
}

}  // namespace

TEST(SoftRl, BanditClosedForm) {
  const auto mdp = make_bandit_mdp({1.0, 0.0});
  const auto pi_b = PolicyTable::uniform(2, 2);
  const auto sol = solve_soft_optimal(mdp, pi_b, {1.0, 1.0});
  const double e = std::exp(1.0);
  EXPECT_NEAR(sol.policy.prob(0, 0), e / (e + 1.0), 1e-12);
  EXPECT_NEAR(sol.value(0), std::log((e + 1.0) / 2.0), 1e-12);
  EXPECT_NEAR(sol.q(0, 0), 1.0, 1e-12);
  EXPECT_EQ(sol.value(1), 0.0);
}

TEST(SoftRl, HugeTauRecoversReference) {
  const auto mdp = make_bandit_mdp({1.0, 0.0, 0.5});
  Matrix p(2, 3);
  p << 0.2, 0.3, 0.5, 1.0 / 3, 1.0 / 3, 1.0 / 3;
  const auto pi_b = PolicyTable::from_probs(p);
  const auto sol = solve_soft_optimal(mdp, pi_b, {1e6, 1.0});
  EXPECT_LT(total_variation(sol.policy.row(0), pi_b.row(0)), 1e-5);
}

TEST(SoftRl, ExactQOfAChainByHand) {
  const auto mdp = chain();
  const auto pi = skewed();
  const auto pi_b = PolicyTable::uniform(3, 2);
  const double tau = 0.3;
  const auto q = exact_soft_q(pi, mdp, pi_b, {tau, 1.0});
  const double d1 = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
  EXPECT_NEAR(q(1, 0), 2.0, 1e-14);
  EXPECT_NEAR(q(0, 0), 1.0 + 2.0 - tau * d1, 1e-14);
  EXPECT_NEAR(q(0, 1), 0.0, 1e-14);
  EXPECT_EQ(q(2, 0), 0.0);
  // discounted version
  const auto qg = exact_soft_q(pi, chain(0.5), pi_b, {tau, 0.5});
  EXPECT_NEAR(qg(0, 0), 1.0 + 0.5 * (2.0 - tau * d1), 1e-14);
}

TEST(SoftRl, LambdaOperatorSharesTheFixedPoint) {
  const auto mdp = build_random_mdp({5, 3, 0.9, 0.0, 1, 4});
  const auto pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 1}, mdp);
  const auto pi = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 2}, mdp);
  const SoftRlParams prm{0.2, 0.9};
  const auto q = exact_soft_q(pi, mdp, pi_b, prm);
  for (double lambda : {0.0, 0.5, 0.95})
    EXPECT_LT(sup_norm(lambda_bellman_apply(q, pi, mdp, pi_b, prm, lambda).values - q.values), 1e-10);
  QTable z = QTable::zeros(5, 3);
  EXPECT_LT(sup_norm(lambda_bellman_apply(z, pi, mdp, pi_b, prm, 0.0).values -
                     soft_bellman_apply(z, pi, mdp, pi_b, prm).values),
            1e-15);
}

TEST(SoftRl, BoltzmannIsStableAndInvertible) {
  Matrix q(2, 3);
  q << 1e4, -1e4, 0.0, 5.0, 5.0, 5.0;
  const auto pi_b = PolicyTable::uniform(2, 3);
  const auto bz = boltzmann(QTable{q}, pi_b, 1.0);
  EXPECT_TRUE(bz.policy.probs().allFinite());
  EXPECT_NEAR(bz.value(0), 1e4 - std::log(3.0), 1e-9);
  EXPECT_NEAR(bz.value(1), 5.0, 1e-12);
  EXPECT_DOUBLE_EQ(bz.policy.log_prob(0, 1), -2e4);
  const auto back = q_from_pi_v(bz.policy, bz.value, pi_b, 1.0);
  EXPECT_LT(sup_norm(back.values - q), 1e-10);
}

TEST(SoftRl, SolversAgreeOnAnEpisodicDiscountedMdp) {
  const auto mdp = chain(0.9);
  const auto pi_b = skewed();
  const SoftRlParams prm{0.4, 0.9};
  const auto bi = soft_backward_induction(mdp, pi_b, prm);
  const auto vi = soft_value_iteration(mdp, pi_b, prm);
  EXPECT_LT(sup_norm(bi.q.values - vi.q.values), 1e-8);
}

// Gibbs variational identity: with gamma = 1 and uniform pi_b,
// V*(root) = tau log sum_c pi_b(c) exp(R(c)/tau) over all completions c.
TEST(SoftRl, TargetTaskValueMatchesCompletionEnumeration) {
  const double tau = 0.05, omega = 1.0;
  const auto ts = default_exact_task(omega);
  const auto tm = prefix_tree_expand(ts.task, make_scorer(ts.reward), 0);
  const auto pi_b = PolicyTable::uniform(tm.mdp.num_states(), 4);
  const auto sol = solve_soft_optimal(tm.mdp, pi_b, {tau, 1.0});

  const std::vector<int> target = {0, 1, 2, 0, 1};
  std::vector<double> log_terms;
  std::vector<int> seq;
  std::function<void()> walk = [&] {
    const auto k = seq.size();
    int hits = 0;
    for (std::size_t i = 0; i < std::min<std::size_t>(k, 5); ++i) hits += seq[i] == target[i];
    if (k == 6) {  // truncated
      log_terms.push_back(6 * std::log(0.25) + (hits - omega) / tau);
      return;
    }
    log_terms.push_back((k + 1) * std::log(0.25) + hits / tau);  // EOS now
    for (int t = 0; t < 3; ++t) {
      seq.push_back(t);
      walk();
      seq.pop_back();
    }
  };
  walk();
  const double m = *std::max_element(log_terms.begin(), log_terms.end());
  double z = 0.0;
  for (double l : log_terms) z += std::exp(l - m);
  const double oracle = tau * (m + std::log(z));
  EXPECT_EQ(log_terms.size(), 364u + 729u);  // EOS-terminated + truncated
  EXPECT_NEAR(sol.value(tm.roots[0]), oracle, 1e-10);
  EXPECT_NEAR(oracle, 4.58411, 1e-5);
  EXPECT_NEAR(policy_objective(tm.mdp, sol.policy, pi_b, {tau, 1.0}), oracle, 1e-9);
}

TEST(SoftRl, ObjectiveIsMaximisedByTheSoftOptimalPolicy) {
  const auto mdp = build_random_mdp({4, 3, 0.8, 0.0, 0, 12});
  const auto pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 3}, mdp);
  const SoftRlParams prm{0.5, 0.8};
  const auto sol = solve_soft_optimal(mdp, pi_b, prm);
  const double best = policy_objective(mdp, sol.policy, pi_b, prm);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto pi = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 100 + s}, mdp);
    EXPECT_LT(policy_objective(mdp, pi, pi_b, prm), best);
  }
}

TEST(SoftRl, ImprovementStepNeverHurts) {
  const auto mdp = build_random_mdp({5, 3, 0.9, 0.0, 1, 8});
  const auto pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 5}, mdp);
  const auto pi = build_reference_policy({ReferenceKind::DirichletRandom, 1.0, {}, 6}, mdp);
  const SoftRlParams prm{0.3, 0.9};
  const auto q = exact_soft_q(pi, mdp, pi_b, prm);
  const auto greedy = boltzmann(q, pi_b, prm.tau).policy;
  ASSERT_TRUE(improvement_condition_holds(mdp, greedy, pi, q, pi_b, prm.tau).holds);
  const auto q_new = exact_soft_q(greedy, mdp, pi_b, prm);
  EXPECT_GE((q_new.values - q.values).minCoeff(), -1e-12);
}

TEST(SoftRl, ParameterConsistencyIsEnforced) {
  const auto mdp = chain(0.9);
  const auto pi = PolicyTable::uniform(3, 2);
  EXPECT_THROW(exact_soft_q(pi, mdp, pi, {0.1, 1.0}), UsageError);
  const FiniteMdp loop(1, 1, 1.0, {{{0, 1.0, 1.0}}}, {false}, Vector::Ones(1));
  EXPECT_THROW(exact_soft_q(PolicyTable::uniform(1, 1), loop, PolicyTable::uniform(1, 1), {0.1, 1.0}), UsageError);
  EXPECT_THROW(lambda_bellman_apply(QTable::zeros(1, 1), PolicyTable::uniform(1, 1), loop,
                                    PolicyTable::uniform(1, 1), {0.1, 1.0}, 1.0),
               UsageError);
}
