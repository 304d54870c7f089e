#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "klq/envs.hpp"
#include "klq/learners.hpp"

using namespace klq;

namespace {

// One state, two actions, pi = (0.25, 0.75), V = 0.2.
ParamState two_arm_params() {
  ParamState p;
  p.logits = Matrix(1, 2);
  p.logits << 0.0, std::log(3.0);
  p.value = Vector::Constant(1, 0.2);
  return p;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.tau = 1.0;
  c.learning_rate = 0.1;
  c.rollouts_per_batch = 32;
  c.minibatch_size = 8;
  c.total_episodes = 32 * 5;
  return c;
}

}  // namespace

TEST(Losses, KlqByHand) {
  const auto p = two_arm_params();
  const auto pi_b = PolicyTable::uniform(1, 2);
  StepSample st;
  st.action = 1;
  st.target = 1.0;
  const auto ev = klq_loss(p, std::span<const StepSample>(&st, 1), pi_b, 0.5);
  const double res = 0.5 * std::log(1.5) + 0.2 - 1.0;
  EXPECT_NEAR(ev.loss, res * res, 1e-14);
  EXPECT_NEAR(ev.grad.value(0), 2.0 * res, 1e-14);
  EXPECT_NEAR(ev.grad.logits(0, 0), 2.0 * res * 0.5 * -0.25, 1e-14);
  EXPECT_NEAR(ev.grad.logits(0, 1), 2.0 * res * 0.5 * 0.25, 1e-14);
}

TEST(Losses, PpoClipByHand) {
  const auto p = two_arm_params();
  TrainConfig cfg;
  cfg.value_coef = 0.5;
  StepSample st;
  st.action = 1;
  st.old_log_prob = std::log(0.5);  // rho = 1.5, outside [0.8, 1.2]
  st.old_value = 0.0;
  st.value_target = 1.0;
  st.advantage = 1.0;
  auto ev = ppo_clip_loss(p, std::span<const StepSample>(&st, 1), cfg);
  EXPECT_NEAR(ev.policy_loss, -1.2, 1e-14);  // clipped: no policy gradient
  EXPECT_EQ(ev.grad.logits(0, 0), 0.0);
  // value: v = 0.2 clipped to 0.2 (eta 0.2) -> both branches equal (0.64)
  EXPECT_NEAR(ev.value_loss, 0.64, 1e-14);

  st.advantage = -1.0;  // unclipped branch is the max
  ev = ppo_clip_loss(p, std::span<const StepSample>(&st, 1), cfg);
  EXPECT_NEAR(ev.policy_loss, 1.5, 1e-14);
  EXPECT_NEAR(ev.grad.logits(0, 1), 1.5 * 0.25, 1e-14);
  EXPECT_NEAR(ev.grad.logits(0, 0), -1.5 * 0.25, 1e-14);
}

TEST(Losses, ClippedValueLossTakesTheWorseBranch) {
  // v = 0.2, old 0, target 1, eta 0.1: clipped value 0.1 is worse -> flat.
  const auto [l, g] = detail::clipped_value_loss(0.2, 0.0, 1.0, 0.1);
  EXPECT_NEAR(l, 0.81, 1e-14);
  EXPECT_EQ(g, 0.0);
  const auto [l2, g2] = detail::clipped_value_loss(0.05, 0.0, 1.0, 0.1);
  EXPECT_NEAR(l2, 0.9025, 1e-14);
  EXPECT_NEAR(g2, -1.9, 1e-14);
}

TEST(Losses, PenaltyVanishesAtTheReference) {
  const auto pi_b = PolicyTable::uniform(1, 2);
  ParamState p = ParamState::from_reference(pi_b);
  TrainConfig cfg;
  StepSample st;
  st.old_log_prob = std::log(0.5);
  for (auto dir : {KlDirection::Forward, KlDirection::Reverse}) {
    cfg.kl_direction = dir;
    const auto ev = ppo_penalty_loss(p, std::span<const StepSample>(&st, 1), pi_b, pi_b, cfg);
    EXPECT_NEAR(ev.policy_loss, 0.0, 1e-15);
    EXPECT_NEAR(ev.grad.logits.cwiseAbs().maxCoeff(), 0.0, 1e-15);
  }
}

TEST(Losses, EmptyMinibatchIsRejected) {
  const auto p = two_arm_params();
  EXPECT_THROW(klq_loss(p, {}, PolicyTable::uniform(1, 2), 1.0), UsageError);
}

TEST(Training, DeterministicForAFixedSeed) {
  const auto mdp = build_random_mdp({4, 3, 0.9, 0.0, 1, 5});
  const auto pi_b = PolicyTable::uniform(4, 3);
  TrainConfig cfg = quick_config();
  cfg.gamma = 0.9;
  cfg.horizon_cap = 50;
  for (Algo algo : {Algo::Klq, Algo::PpoClip, Algo::PpoPenalty}) {
    const auto a = train(algo, mdp, pi_b, cfg), b = train(algo, mdp, pi_b, cfg);
    ASSERT_EQ(a.metrics.size(), 5u);
    for (std::size_t k = 0; k < a.metrics.size(); ++k)
      EXPECT_EQ(format_metrics_row(a.metrics[k]), format_metrics_row(b.metrics[k]));
    EXPECT_EQ(a.final_params.logits, b.final_params.logits);
    cfg.seed = 1;
    const auto c = train(algo, mdp, pi_b, cfg);
    EXPECT_NE(a.final_params.logits, c.final_params.logits);
    cfg.seed = 0;
  }
}

TEST(Training, LinearDecayAndMetrics) {
  const auto mdp = make_bandit_mdp({1.0, 0.0});
  const auto r = train(Algo::Klq, mdp, PolicyTable::uniform(2, 2), quick_config());
  EXPECT_DOUBLE_EQ(r.metrics[0].lr, 0.1);
  EXPECT_NEAR(r.metrics[4].lr, 0.1 * (1.0 - 4.0 / 5.0), 1e-15);
  EXPECT_EQ(r.metrics[4].episodes, 160u);
  // first batch: pi = pi_b, so no KL and the score is the arm frequency
  EXPECT_EQ(r.metrics[0].mean_kl, 0.0);
  EXPECT_DOUBLE_EQ(r.metrics[0].rlhf_reward, r.metrics[0].mean_score);
}

TEST(Training, KlqConvergesOnTheBandit) {
  const auto mdp = make_bandit_mdp({1.0, 0.0});
  const auto pi_b = PolicyTable::uniform(2, 2);
  TrainConfig cfg = quick_config();
  cfg.rollouts_per_batch = 192;
  cfg.minibatch_size = 192;
  cfg.total_episodes = 192 * 100;
  const auto r = train(Algo::Klq, mdp, pi_b, cfg);
  const double p_star = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(r.final_params.policy().prob(0, 0), p_star, 0.03);
}

TEST(Training, RejectsInconsistentConfigs) {
  const auto mdp = make_bandit_mdp({1.0, 0.0});
  const auto pi_b = PolicyTable::uniform(2, 2);
  TrainConfig cfg = quick_config();
  cfg.gamma = 0.5;
  EXPECT_THROW(train(Algo::Klq, mdp, pi_b, cfg), ConfigError);
  cfg = quick_config();
  cfg.total_episodes = 3;
  EXPECT_THROW(train(Algo::Klq, mdp, pi_b, cfg), ConfigError);
  EXPECT_THROW(train(Algo::Klq, mdp, PolicyTable::uniform(3, 2), quick_config()), UsageError);
  EXPECT_THROW(algo_from_string("sac"), ConfigError);
}

TEST(Training, WriterProducesRunDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "klq_unit_run";
  std::filesystem::remove_all(dir);
  {
    RunWriter w(dir);
    train(Algo::PpoClip, make_bandit_mdp({1.0, 0.0}), PolicyTable::uniform(2, 2), quick_config(), &w);
  }
  std::ifstream is(dir / "metrics.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5u);
  EXPECT_TRUE(std::filesystem::exists(dir / "final_policy.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "seed.txt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "ERROR"));
  std::filesystem::remove_all(dir);
}
