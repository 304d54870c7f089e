#include <gtest/gtest.h>

#include <sstream>

#include "klq/config.hpp"
#include "klq/table_io.hpp"

using namespace klq;

TEST(Config, DefaultsAndOverrides) {
  const auto c = parse_config_text(R"({"algo": "ppo-clip", "seed": 7,
    "env": {"type": "bandit", "rewards": [1, 0, 0.5]},
    "train": {"tau": 0.5, "rollouts_per_batch": 4, "minibatch_size": 2, "total_episodes": 8}})");
  EXPECT_EQ(c.algo, Algo::PpoClip);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.env.kind, EnvKind::Bandit);
  EXPECT_EQ(c.env.rewards.size(), 3u);
  EXPECT_EQ(c.train.tau, 0.5);
  EXPECT_EQ(c.train.num_batches(), 2u);
  const auto env = build_env(c);
  EXPECT_EQ(env.mdp.num_actions(), 3u);
  EXPECT_FALSE(env.token.has_value());
}

TEST(Config, StrictKeysAndTypes) {
  EXPECT_THROW(parse_config_text(R"({"trian": {}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train": {"tua": 1}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train": {"tau": "big"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train": {"tau": -1}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"algo": "dqn"})"), ConfigError);
  EXPECT_THROW(parse_config_text("{"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/klq.json"), ConfigError);
}

TEST(Config, RoundTripsThroughJson) {
  const auto c = parse_config_text(R"({"env": {"type": "token_task", "alphabet_size": 3, "target": "AB",
    "max_length": 3, "train_prompts": ["", "A"], "validation_prompts": ["B"]},
    "sweep": {"tau": [0.1, 0.2]}})");
  const Json j = to_json(c);
  EXPECT_EQ(to_json(parse_config(j)).dump(), j.dump());
}

TEST(Config, SweepChildrenAreNamedAndPlaced) {
  const auto c = parse_config_text(R"({"out": "runs/s", "sweep": {"tau": [0.05, 1], "learning_rate": [0.5]}})");
  const auto kids = expand_sweep(c);
  ASSERT_EQ(kids.size(), 2u);
  EXPECT_EQ(kids[0].name, "tau=0.05_lr=0.5");
  EXPECT_EQ(kids[1].config.out, "runs/s/tau=1_lr=0.5");
  EXPECT_EQ(kids[1].config.train.tau, 1.0);
  EXPECT_TRUE(kids[0].config.sweep.empty());
  EXPECT_EQ(expand_sweep(parse_config(Json::object())).size(), 1u);
}

TEST(Config, TokenEnvironmentWithValidationPrompts) {
  const auto c = parse_config_text(R"({"env": {"type": "token_task", "alphabet_size": 3, "target": "AB",
    "max_length": 3, "train_prompts": ["", "A"], "validation_prompts": ["B"]}})");
  const auto env = build_env(c);
  ASSERT_TRUE(env.token.has_value());
  ASSERT_TRUE(env.validation.has_value());
  EXPECT_EQ(env.token->roots.size(), 3u);
  EXPECT_EQ(env.mdp.initial_distribution()(static_cast<Eigen::Index>(env.token->roots[2])), 0.0);
  EXPECT_EQ(env.validation->initial_distribution()(static_cast<Eigen::Index>(env.token->roots[2])), 1.0);
}

TEST(TableIo, RoundTripIsExact) {
  Matrix p(2, 3);
  p << 0.2, 0.3, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0;
  const auto pi = PolicyTable::from_probs(p);
  std::stringstream ss;
  write_policy(ss, pi);
  const auto back = read_policy(ss);
  EXPECT_EQ(back.probs(), pi.probs());
  EXPECT_EQ(back.log_probs(), pi.log_probs());

  QTable q = QTable::zeros(2, 2);
  q(1, 0) = -1e-310;
  q(0, 1) = 1.0 / 7.0;
  std::stringstream qs;
  write_q(qs, q);
  EXPECT_EQ(read_q(qs).values, q.values);
}

TEST(TableIo, MalformedTablesAreRejected) {
  auto bad = [](const std::string& text) {
    std::istringstream is(text);
    return read_q(is);
  };
  EXPECT_THROW(bad(""), ConfigError);
  EXPECT_THROW(bad("klq-v 1 1\n0 0\n"), ConfigError);
  EXPECT_THROW(bad("klq-q 1 1 2\n0 0 1\n"), ConfigError);         // missing entry
  EXPECT_THROW(bad("klq-q 1 1 1\n0 0 1\n0 0 2\n"), ConfigError);  // duplicate
  EXPECT_THROW(bad("klq-q 1 1 1\n0 3 1\n"), ConfigError);         // out of range
  EXPECT_THROW(bad("klq-q 1 1 1\n0 0 x\n"), ConfigError);
  std::istringstream unnorm("klq-policy 1 1 2\n0 0 0.5 -0.6931471805599453\n0 1 0.6 -0.5108256237659907\n");
  EXPECT_THROW(read_policy(unnorm), ConfigError);
  EXPECT_THROW(load_policy("/nonexistent/policy.txt"), Error);
}
