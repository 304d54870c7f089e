#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "klq/envs.hpp"
#include "klq/mdp.hpp"

using namespace klq;

namespace {

// s0 --a0--> s1 (r=1) --any--> s2 terminal (r=2); s0 --a1--> s2 (r=0).
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

}  // namespace

TEST(FiniteMdp, StructureOfAChain) {
  const auto m = chain();
  EXPECT_TRUE(m.is_episodic());
  EXPECT_EQ(m.depth_bound(), 2u);
  ASSERT_EQ(m.topological_order().size(), 2u);
  EXPECT_EQ(m.topological_order()[0], 0u);
  EXPECT_DOUBLE_EQ(m.expected_reward(1, 0), 2.0);
  // terminal rows are rewritten as absorbing self-loops
  const auto t = m.transitions(2, 1);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].next, 2u);
  EXPECT_EQ(t[0].reward, 0.0);
}

TEST(FiniteMdp, RejectsBrokenKernels) {
  Vector init = Vector::Ones(1);
  EXPECT_THROW(FiniteMdp(1, 1, 0.9, {{{0, 0.5, 0.0}}}, {false}, init), UsageError);
  EXPECT_THROW(FiniteMdp(1, 1, 0.9, {{{3, 1.0, 0.0}}}, {false}, init), UsageError);
  EXPECT_THROW(FiniteMdp(1, 1, 1.5, {{{0, 1.0, 0.0}}}, {false}, init), UsageError);
  EXPECT_THROW(FiniteMdp(1, 1, 0.9, {{{0, 1.0, 0.0}}}, {false}, Vector::Zero(1)), UsageError);
  const FiniteMdp loop(1, 1, 0.9, {{{0, 1.0, 0.0}}}, {false}, init);
  EXPECT_FALSE(loop.is_episodic());
}

TEST(Rollout, FirstActionAndHorizon) {
  const auto m = chain();
  const auto pi = PolicyTable::uniform(3, 2);
  Rng rng = make_substream(0, 0);
  const auto t = rollout_episode(m, pi, rng, 0, 10, std::size_t{0});
  ASSERT_EQ(t.length(), 2u);
  EXPECT_EQ(t.actions[0], 0u);
  EXPECT_DOUBLE_EQ(t.total_reward(), 3.0);
  EXPECT_EQ(t.final_state(), 2u);
  Rng rng2 = make_substream(0, 0);
  EXPECT_EQ(rollout_episode(m, pi, rng2, 0, 1, std::size_t{0}).length(), 1u);
}

TEST(Rollout, BatchesAreDeterministic) {
  const auto m = build_random_mdp({4, 3, 0.9, 0.0, 1, 5});
  const auto pi = PolicyTable::uniform(4, 3);
  const auto a = rollout_batch(m, pi, 42, 20, 50), b = rollout_batch(m, pi, 42, 20, 50);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.trajectories[i].states, b.trajectories[i].states);
    EXPECT_EQ(a.trajectories[i].actions, b.trajectories[i].actions);
  }
}

TEST(Visitation, MatchesHandComputation) {
  const auto m = chain();
  const auto pi = PolicyTable::uniform(3, 2);
  const Vector d = visitation_distribution(m, pi);
  // expected visits: s0 once, s1 with prob 1/2
  EXPECT_NEAR(d(0) / d(1), 2.0, 1e-12);
}

TEST(MdpIo, RoundTrip) {
  const auto m = build_random_mdp({5, 2, 0.8, 0.3, 1, 9});
  std::stringstream ss;
  write_mdp(ss, m);
  const auto back = read_mdp(ss);
  ASSERT_EQ(back.num_states(), m.num_states());
  EXPECT_EQ(back.gamma(), m.gamma());
  for (std::size_t s = 0; s < 5; ++s) {
    EXPECT_EQ(back.is_terminal(s), m.is_terminal(s));
    for (std::size_t a = 0; a < 2; ++a) EXPECT_EQ(back.expected_reward(s, a), m.expected_reward(s, a));
  }
  std::stringstream bad("klq-mdp 1\nstates 2\n");
  EXPECT_ANY_THROW(read_mdp(bad));
}
