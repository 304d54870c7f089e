#include <gtest/gtest.h>

#include <cmath>

#include "klq/estimators.hpp"
#include "klq/verify.hpp"

using namespace klq;

namespace {

FiniteMdp chain() {
  std::vector<std::vector<Transition>> rows(6);
  rows[0] = {{1, 1.0, 1.0}};
  rows[1] = {{2, 1.0, 0.0}};
  rows[2] = {{2, 1.0, 2.0}};
  rows[3] = {{2, 1.0, 2.0}};
  Vector init = Vector::Zero(3);
  init(0) = 1.0;
  return FiniteMdp(3, 2, 1.0, rows, {false, false, true}, init);
}

struct Fixture {
  FiniteMdp mdp = chain();
  PolicyTable pi, pi_b = PolicyTable::uniform(3, 2);
  VTable V = VTable::zeros(3);
  Trajectory traj;

  Fixture() {
    Matrix p(3, 2);
    p << 0.8, 0.2, 0.25, 0.75, 0.5, 0.5;
    pi = PolicyTable::from_probs(p);
    V.values << 1.0, 0.5, 7.0;  // the terminal entry must never be read
    traj.states = {0, 1, 2};
    traj.actions = {0, 1};
    traj.rewards = {1.0, 2.0};
  }
};

constexpr double kTau = 0.5, kGamma = 0.9;

}  // namespace

TEST(Estimators, TdErrorsByHand) {
  Fixture f;
  const auto d = td_errors(f.mdp, f.traj, f.pi, f.V, f.pi_b, {kTau, kGamma});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NEAR(d[0], 0.45 - 0.5 * std::log(1.6), 1e-14);
  EXPECT_NEAR(d[1], 1.5 - 0.5 * std::log(1.5), 1e-14);

  QTable Q = QTable::zeros(3, 2);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a = 0; a < 2; ++a) Q(s, a) = decomposed_q(f.pi, f.V, f.pi_b, kTau, s, a);
  const auto e = td_errors_expected_form(f.mdp, f.traj, f.pi, Q, f.pi_b, {kTau, kGamma});
  for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(e[t], d[t], 1e-14);
}

TEST(Estimators, LambdaTargetsByHand) {
  Fixture f;
  const double d0 = 0.45 - 0.5 * std::log(1.6), d1 = 1.5 - 0.5 * std::log(1.5);
  const double q0 = 0.5 * std::log(1.6) + 1.0, q1 = 0.5 * std::log(1.5) + 0.5;
  const auto g = lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {0.5, 0.5, kGamma}, kTau);
  EXPECT_NEAR(g[1], 0.5 * d1 + q1, 1e-14);
  EXPECT_NEAR(g[0], 0.5 * (d0 + 0.45 * d1) + q0, 1e-14);
  // lambda = 1, alpha = 1: the Monte Carlo return, KL-penalised from the
  // second action on (Q(s, a) does not pay for a itself)
  const auto mc = lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {1.0, 1.0, kGamma}, kTau);
  EXPECT_NEAR(mc[0], 1.0 + kGamma * (2.0 - 0.5 * std::log(1.5)), 1e-14);
}

TEST(Estimators, GaeAndValueTargetsByHand) {
  Fixture f;
  const auto adj = adjusted_rewards(f.traj, f.pi, f.pi_b, kTau);
  const double r0 = 1.0 - 0.5 * std::log(1.6), r1 = 2.0 - 0.5 * std::log(1.5);
  EXPECT_NEAR(adj[0], r0, 1e-15);
  EXPECT_NEAR(adj[1], r1, 1e-15);
  const auto a = gae_advantages(f.mdp, f.traj, f.V, adj, kGamma, 0.5);
  const double g0 = r0 + kGamma * 0.5 - 1.0, g1 = r1 - 0.5;
  EXPECT_NEAR(a[1], g1, 1e-14);
  EXPECT_NEAR(a[0], g0 + 0.45 * g1, 1e-14);
  const auto vt = ppo_value_targets(f.mdp, f.traj, f.V, adj, kGamma);
  EXPECT_NEAR(vt[1], r1, 1e-14);
  EXPECT_NEAR(vt[0], r0 + kGamma * r1, 1e-14);
}

TEST(Estimators, TruncatedEpisodesBootstrap) {
  Fixture f;
  Trajectory cut;
  cut.states = {0, 1};
  cut.actions = {0};
  cut.rewards = {1.0};
  const auto adj = adjusted_rewards(cut, f.pi, f.pi_b, kTau);
  EXPECT_NEAR(ppo_value_targets(f.mdp, cut, f.V, adj, kGamma)[0], adj[0] + kGamma * 0.5, 1e-14);
}

TEST(Estimators, BatchTargetsAgreeWithPerTrajectoryFunctions) {
  Fixture f;
  TrajectoryBatch b;
  b.trajectories = {f.traj, f.traj};
  const LambdaParams lp{0.5, 0.5, kGamma};
  const auto tb = compute_targets(f.mdp, b, f.pi, f.V, f.pi_b, lp, kTau, true, 7);
  ASSERT_EQ(tb.size(), 2u);
  EXPECT_EQ(tb.snapshot_tag, 7u);
  const auto g = lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, lp, kTau);
  for (std::size_t t = 0; t < 2; ++t) EXPECT_DOUBLE_EQ(tb.per_trajectory[1].target[t], g[t]);
  EXPECT_EQ(tb.per_trajectory[0].advantage.size(), 2u);
}

TEST(Estimators, RejectsOutOfSupportActionsAndBadParameters) {
  Fixture f;
  Matrix p(3, 2);
  p << 1.0, 0.0, 0.5, 0.5, 0.5, 0.5;
  const auto pb = PolicyTable::from_probs(p);
  Trajectory t;
  t.states = {0, 2};
  t.actions = {1};
  t.rewards = {0.0};
  EXPECT_THROW(adjusted_rewards(t, f.pi, pb, kTau), SupportError);
  EXPECT_NO_THROW(adjusted_rewards(t, f.pi, pb, 0.0));
  EXPECT_THROW(lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {1.5, 1.0, 0.9}, kTau), UsageError);
  EXPECT_THROW(lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {0.5, 0.0, 0.9}, kTau), UsageError);
}

TEST(Estimators, LimitingCases) {
  Fixture f;
  // one-step target: r + gamma V(s')
  const auto g0 = lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {0.0, 1.0, kGamma}, kTau);
  EXPECT_NEAR(g0[0], 1.0 + kGamma * 0.5, 1e-14);
  EXPECT_NEAR(g0[1], 2.0, 1e-14);  // terminal bootstrap is 0
  // maximally conservative: the target collapses onto Q
  const auto gc = lambda_targets(f.mdp, f.traj, f.pi, f.V, f.pi_b, {0.5, 1e-12, kGamma}, kTau);
  EXPECT_NEAR(gc[0], 0.5 * std::log(1.6) + 1.0, 1e-9);
  // V = 0, gamma = lambda = 1: GAE is the suffix sum of adjusted rewards
  const auto adj = adjusted_rewards(f.traj, f.pi, f.pi_b, kTau);
  const auto a = gae_advantages(f.mdp, f.traj, VTable::zeros(3), adj, 1.0, 1.0);
  EXPECT_NEAR(a[0], adj[0] + adj[1], 1e-14);
}

TEST(Estimators, AdjustedRewardExample) {
  Matrix p(1, 2), b(1, 2);
  p << 0.8, 0.2;
  b << 0.4, 0.6;
  Trajectory t;
  t.states = {0, 0};
  t.actions = {0};
  t.rewards = {0.0};
  EXPECT_NEAR(adjusted_rewards(t, PolicyTable::from_probs(p), PolicyTable::from_probs(b), 0.05)[0],
              -0.05 * std::log(2.0), 1e-15);
}

TEST(Verify, MonteCarloEstimatorProperties) {
  EXPECT_TRUE(check_td_zero_mean(4, 20000).passed);
  EXPECT_TRUE(check_target_unbiased(4, 2000).passed);
}
