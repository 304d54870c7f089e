#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "klq/envs.hpp"
#include "klq/soft_rl.hpp"
#include "klq/token_task.hpp"

using namespace klq;

TEST(Tokens, StringRoundTrip) {
  const Tokens t = parse_token_string("AB C$", 4);
  EXPECT_EQ(t, (Tokens{0, 1, 2, 3}));
  EXPECT_EQ(tokens_to_string(t, 4), "ABC$");
  EXPECT_EQ(parse_token_string("ab", 4), (Tokens{0, 1}));
  EXPECT_THROW(parse_token_string("AE", 4), ConfigError);
  EXPECT_THROW(parse_token_string("A1", 4), ConfigError);
}

TEST(TokenTask, PrefixTreeOfTheExactTask) {
  const auto ts = default_exact_task();
  const auto tm = prefix_tree_expand(ts.task, make_scorer(ts.reward), 0);
  // 364 decision prefixes (3^0 + ... + 3^5), one EOS leaf each, 3^6 truncation leaves.
  EXPECT_EQ(tm.mdp.num_states(), 364u + 364u + 729u);
  EXPECT_EQ(prefix_tree_size(ts.task), 1457.0);
  EXPECT_EQ(tm.num_decision_states(), 364u);
  EXPECT_TRUE(tm.mdp.is_episodic());
  EXPECT_EQ(tm.mdp.depth_bound(), 6u);
}

TEST(TokenTask, RewardsAndTruncation) {
  const auto ts = default_exact_task(0.7);
  const auto tm = prefix_tree_expand(ts.task, make_scorer(ts.reward), 0);
  const std::size_t eos = 3;
  // "AB" then EOS: 2 matching characters
  const auto ab = tm.state_of(0, parse_token_string("AB", 4));
  const auto t = tm.mdp.transitions(ab, eos);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_DOUBLE_EQ(t[0].reward, 2.0);
  EXPECT_TRUE(tm.mdp.is_terminal(t[0].next));
  // "ABCAB" + "C" hits max_length without EOS: 5 - omega
  const auto full = tm.state_of(0, parse_token_string("ABCAB", 4));
  EXPECT_DOUBLE_EQ(tm.mdp.transitions(full, 2)[0].reward, 5.0 - 0.7);
  // intermediate steps carry no reward
  EXPECT_DOUBLE_EQ(tm.mdp.transitions(tm.roots[0], 0)[0].reward, 0.0);
}

TEST(TokenTask, ScoringKinds) {
  RewardModelSpec s;
  s.kind = RewardKind::PrefixCount;
  s.token = 1;
  s.scale = 0.5;
  const Tokens c = {1, 0, 1};
  EXPECT_DOUBLE_EQ(score_completion(s, {}, c), 1.0);
  EXPECT_DOUBLE_EQ(score_completion(s, {}, c, 2.0, true), -1.0);
  s.kind = RewardKind::Table;
  s.table[{1, 0, 1}] = 3.0;
  EXPECT_DOUBLE_EQ(score_completion(s, {}, c), 1.5);
  EXPECT_THROW(score_completion(s, {}, Tokens{0}), UsageError);
}

TEST(TokenTask, SmallTaskPrefersTargetAtLowTemperature) {
  const auto ts = build_target_string_task(3, parse_token_string("AB", 3), {}, 4, 1.0);
  const auto tm = prefix_tree_expand(ts.task, make_scorer(ts.reward), 0);
  const auto pi_b = PolicyTable::uniform(tm.mdp.num_states(), 3);
  const auto sol = solve_soft_optimal(tm.mdp, pi_b, {0.05, 1.0});
  const auto root = tm.roots[0];
  EXPECT_GT(sol.policy.prob(root, 0), sol.policy.prob(root, 1));
  EXPECT_GT(sol.policy.prob(root, 0), sol.policy.prob(root, 2));
  const auto hot = solve_soft_optimal(tm.mdp, pi_b, {1e6, 1.0});
  for (auto s : tm.mdp.non_terminal_states()) EXPECT_LT(total_variation(hot.policy.row(s), pi_b.row(s)), 1e-5);
}

TEST(TokenTask, BudgetAndPreconditions) {
  TokenTaskSpec big;
  big.alphabet_size = 8;
  big.max_length = 8;
  EXPECT_THROW(prefix_tree_expand(big, [](auto, auto) { return 0.0; }, 0), BudgetError);
  EXPECT_THROW(build_target_string_task(4, parse_token_string("ABCAB", 4), {}, 5, 1.0), UsageError);
}

TEST(TokenTask, PromptForestAndRollouts) {
  auto ts = build_target_string_task(3, parse_token_string("AB", 3), {Tokens{}, Tokens{0}}, 3, 1.0);
  const auto tm = expand_task_forest(ts.task, make_scorer(ts.reward), {0, 1}, {3.0, 1.0});
  ASSERT_EQ(tm.roots.size(), 2u);
  EXPECT_DOUBLE_EQ(tm.mdp.initial_distribution()(static_cast<Eigen::Index>(tm.roots[0])), 0.75);
  EXPECT_EQ(tm.context(tm.roots[1]), Tokens{0});
  const auto pi = PolicyTable::uniform(tm.mdp.num_states(), 3);
  const auto batch = rollout_token_batch(tm, pi, 5, 200);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& tr = batch.trajectories[i];
    EXPECT_LE(tr.length(), 3u);
    EXPECT_TRUE(tm.mdp.is_terminal(tr.final_state()));
    EXPECT_EQ(batch.prompt_ids[i], tm.prompt_of_state[tr.states.front()]);
    EXPECT_EQ(tr.terminated_by_eos, tr.actions.back() == 2u);
  }
}

TEST(Envs, RandomMdpsAreDeterministicAndValid) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto m = build_random_mdp({1 + seed % 6, 1 + seed % 4, 0.9, (seed % 3) * 0.3, seed % 6 ? 0u : 0u, seed});
    (void)m;  // the constructor validates every invariant
  }
  const auto a = build_random_mdp({5, 3, 0.9, 0.2, 1, 77}), b = build_random_mdp({5, 3, 0.9, 0.2, 1, 77});
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t act = 0; act < 3; ++act) {
      const auto ta = a.transitions(s, act), tb = b.transitions(s, act);
      ASSERT_EQ(ta.size(), tb.size());
      for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(ta[i].next, tb[i].next);
        EXPECT_EQ(ta[i].prob, tb[i].prob);
        EXPECT_EQ(ta[i].reward, tb[i].reward);
      }
    }
  const auto one = build_random_mdp({1, 1, 0.5, 0.0, 0, 1});
  EXPECT_EQ(one.transitions(0, 0)[0].next, 0u);
  EXPECT_THROW(build_random_mdp({3, 2, 1.0, 0.0, 0, 1}), UsageError);
}

TEST(Envs, BigramReferenceWithAddOneSmoothing) {
  const auto ts = build_target_string_task(3, parse_token_string("AB", 3), {}, 3, 1.0);
  const auto tm = prefix_tree_expand(ts.task, make_scorer(ts.reward), 0);
  std::istringstream corpus("AB\n");
  ReferencePolicySpec spec{ReferenceKind::Bigram, 1.0, parse_corpus(corpus, 3), 0};
  const auto pi_b = build_reference_policy(spec, tm);
  const auto root = tm.roots[0];
  // start row: A seen once -> (2, 1, 1) / 4
  EXPECT_DOUBLE_EQ(pi_b.prob(root, 0), 0.5);
  EXPECT_DOUBLE_EQ(pi_b.prob(root, 1), 0.25);
  // after A: B seen once
  const auto a = tm.state_of(0, {0});
  EXPECT_DOUBLE_EQ(pi_b.prob(a, 1), 0.5);
  // after B: implicit EOS seen once
  const auto ab = tm.state_of(0, {0, 1});
  EXPECT_DOUBLE_EQ(pi_b.prob(ab, 2), 0.5);
  pi_b.check_valid();
}

TEST(Envs, DirichletReferenceHasFullSupport) {
  const auto m = build_random_mdp({6, 4, 0.9, 0.0, 2, 3});
  const auto pi_b = build_reference_policy({ReferenceKind::DirichletRandom, 0.05, {}, 9}, m);
  pi_b.check_valid(1e-12);
  EXPECT_GE(pi_b.probs().minCoeff(), kSupportFloor * 0.999);
}
