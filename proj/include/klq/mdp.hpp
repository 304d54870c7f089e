#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "klq/error.hpp"
#include "klq/rng.hpp"
#include "klq/tables.hpp"

namespace klq {

inline constexpr std::size_t kDefaultHorizonCap = 1000;

/// Dense solves are limited to this many non-terminal (state, action) pairs.
inline constexpr std::size_t kDenseSolveBudget = 5000;

/// One outcome of taking an action: next state, its probability and the
/// reward r(s, a, s').
struct Transition {
  std::size_t next = 0;
  double prob = 0.0;
  double reward = 0.0;
};

/// Finite MDP with a sparse transition kernel.
///
/// Terminal states are absorbing: they transition to themselves with
/// probability 1 and reward 0, and carry V = Q = 0. The object is immutable
/// after construction; the constructor validates every invariant.
class FiniteMdp {
 public:
  FiniteMdp() = default;

  /// `rows` is indexed by s * num_actions + a. Rows of terminal states may be
  /// left empty; they are replaced by the absorbing self-loop.
  FiniteMdp(std::size_t num_states, std::size_t num_actions, double gamma,
            std::vector<std::vector<Transition>> rows, std::vector<bool> terminal, Vector initial)
      : num_states_(num_states),
        num_actions_(num_actions),
        gamma_(gamma),
        rows_(std::move(rows)),
        terminal_(std::move(terminal)),
        initial_(std::move(initial)) {
    validate();
    analyse_structure();
  }

  std::size_t num_states() const { return num_states_; }
  std::size_t num_actions() const { return num_actions_; }
  double gamma() const { return gamma_; }
  bool is_terminal(std::size_t s) const { return terminal_[s]; }
  const Vector& initial_distribution() const { return initial_; }

  std::span<const Transition> transitions(std::size_t s, std::size_t a) const {
    return rows_[s * num_actions_ + a];
  }

  double expected_reward(std::size_t s, std::size_t a) const {
    double r = 0.0;
    for (const auto& t : transitions(s, a)) r += t.prob * t.reward;
    return r;
  }

  /// True when no non-terminal state can reach itself, so every policy ends
  /// in a terminal state within num_states steps.
  bool is_episodic() const { return episodic_; }

  /// Non-terminal states, each listed before all of its successors. Only
  /// meaningful when is_episodic().
  const std::vector<std::size_t>& topological_order() const { return topo_; }

  const std::vector<std::size_t>& non_terminal_states() const { return non_terminal_; }

  /// Longest path (in steps) from any non-terminal state to a terminal one.
  /// Only meaningful when is_episodic().
  std::size_t depth_bound() const { return depth_bound_; }

  FiniteMdp with_gamma(double gamma) const {
    FiniteMdp copy = *this;
    copy.gamma_ = gamma;
    copy.validate();
    return copy;
  }

  FiniteMdp with_initial(Vector initial) const {
    FiniteMdp copy = *this;
    copy.initial_ = std::move(initial);
    copy.validate();
    return copy;
  }

 private:
  void validate() {
    if (num_states_ == 0 || num_actions_ == 0) throw UsageError("MDP needs at least one state and action");
    if (!(gamma_ >= 0.0 && gamma_ <= 1.0)) throw UsageError("gamma must lie in [0, 1]");
    if (rows_.size() != num_states_ * num_actions_) throw UsageError("transition table has wrong size");
    if (terminal_.size() != num_states_) throw UsageError("terminal flags have wrong size");
    if (static_cast<std::size_t>(initial_.size()) != num_states_)
      throw UsageError("initial distribution has wrong size");
    for (std::size_t s = 0; s < num_states_; ++s) {
      for (std::size_t a = 0; a < num_actions_; ++a) {
        auto& row = rows_[s * num_actions_ + a];
        if (terminal_[s]) {
          row = {Transition{s, 1.0, 0.0}};
          continue;
        }
        double sum = 0.0;
        for (const auto& t : row) {
          if (t.next >= num_states_) throw UsageError("transition to unknown state");
          if (!(t.prob >= 0.0)) throw UsageError("negative transition probability");
          if (!std::isfinite(t.reward)) throw UsageError("non-finite reward");
          sum += t.prob;
        }
        if (std::abs(sum - 1.0) > 1e-12)
          throw UsageError("transition row (" + std::to_string(s) + ", " + std::to_string(a) +
                           ") sums to " + std::to_string(sum));
      }
    }
    if (initial_.minCoeff() < 0.0 || std::abs(initial_.sum() - 1.0) > 1e-12)
      throw UsageError("initial distribution is not a probability vector");
  }

  // Kahn's algorithm over the non-terminal subgraph.
  void analyse_structure() {
    non_terminal_.clear();
    std::vector<std::size_t> indegree(num_states_, 0);
    std::vector<std::vector<std::size_t>> succ(num_states_);
    for (std::size_t s = 0; s < num_states_; ++s) {
      if (terminal_[s]) continue;
      non_terminal_.push_back(s);
      for (std::size_t a = 0; a < num_actions_; ++a)
        for (const auto& t : transitions(s, a))
          if (t.prob > 0.0 && !terminal_[t.next]) succ[s].push_back(t.next);
      std::sort(succ[s].begin(), succ[s].end());
      succ[s].erase(std::unique(succ[s].begin(), succ[s].end()), succ[s].end());
      for (auto n : succ[s]) ++indegree[n];
    }
    topo_.clear();
    std::vector<std::size_t> frontier;
    for (auto s : non_terminal_)
      if (indegree[s] == 0) frontier.push_back(s);
    while (!frontier.empty()) {
      const auto s = frontier.back();
      frontier.pop_back();
      topo_.push_back(s);
      for (auto n : succ[s])
        if (--indegree[n] == 0) frontier.push_back(n);
    }
    episodic_ = topo_.size() == non_terminal_.size();
    depth_bound_ = 0;
    if (episodic_) {
      std::vector<std::size_t> depth(num_states_, 0);
      for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
        std::size_t d = 0;
        for (auto n : succ[*it]) d = std::max(d, depth[n]);
        depth[*it] = d + 1;
        depth_bound_ = std::max(depth_bound_, depth[*it]);
      }
    } else {
      topo_.clear();
    }
  }

  std::size_t num_states_ = 0;
  std::size_t num_actions_ = 0;
  double gamma_ = 1.0;
  std::vector<std::vector<Transition>> rows_;
  std::vector<bool> terminal_;
  Vector initial_;
  bool episodic_ = false;
  std::size_t depth_bound_ = 0;
  std::vector<std::size_t> topo_;
  std::vector<std::size_t> non_terminal_;
};

struct StepOutcome {
  std::size_t next = 0;
  double reward = 0.0;
  bool done = false;
};

inline StepOutcome sample_step(const FiniteMdp& mdp, std::size_t s, std::size_t a, Rng& rng) {
  if (s >= mdp.num_states()) throw UsageError("state out of range");
  if (a >= mdp.num_actions()) throw UsageError("action out of range");
  if (mdp.is_terminal(s)) throw UsageError("cannot step from terminal state " + std::to_string(s));
  const auto row = mdp.transitions(s, a);
  const double u = uniform01(rng);
  double acc = 0.0;
  const Transition* chosen = nullptr;
  for (const auto& t : row) {
    if (t.prob <= 0.0) continue;
    chosen = &t;
    acc += t.prob;
    if (u < acc) break;
  }
  return {chosen->next, chosen->reward, mdp.is_terminal(chosen->next)};
}

/// One episode: states s_0..s_T, actions a_0..a_{T-1}, rewards r_1..r_T.
struct Trajectory {
  std::vector<std::size_t> states;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
  bool terminated_by_eos = false;
  std::vector<double> behavior_log_probs;

  std::size_t length() const { return actions.size(); }
  std::size_t final_state() const { return states.back(); }
  double total_reward() const {
    double r = 0.0;
    for (double x : rewards) r += x;
    return r;
  }
};

struct TrajectoryBatch {
  std::vector<Trajectory> trajectories;
  std::vector<std::size_t> prompt_ids;
  std::uint64_t rng_seed = 0;

  std::size_t size() const { return trajectories.size(); }
  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
  }
};

/// Rolls out one episode from `start`. If `first_action` is given it is taken
/// at s_0 instead of sampling from the policy. Stops at a terminal state or
/// after `horizon_cap` steps.
inline Trajectory rollout_episode(const FiniteMdp& mdp, const PolicyTable& policy, Rng& rng,
                                  std::size_t start, std::size_t horizon_cap,
                                  std::optional<std::size_t> first_action = std::nullopt) {
  Trajectory traj;
  traj.states.push_back(start);
  std::size_t s = start;
  while (!mdp.is_terminal(s) && traj.length() < horizon_cap) {
    const std::size_t a = (traj.length() == 0 && first_action)
                              ? *first_action
                              : sample_categorical(policy.row(s), rng);
    const auto out = sample_step(mdp, s, a, rng);
    traj.actions.push_back(a);
    traj.behavior_log_probs.push_back(policy.log_prob(s, a));
    traj.rewards.push_back(out.reward);
    traj.states.push_back(out.next);
    s = out.next;
  }
  return traj;
}

/// Samples `n_episodes` episodes. Episode i uses substream i of `seed`, so the
/// batch is identical whatever order (or thread) the episodes run in.
inline TrajectoryBatch rollout_batch(const FiniteMdp& mdp, const PolicyTable& policy,
                                     std::uint64_t seed, std::size_t n_episodes,
                                     std::size_t horizon_cap = kDefaultHorizonCap) {
  detail::require(horizon_cap >= 1, "horizon_cap must be >= 1");
  detail::require(policy.num_states() == mdp.num_states() && policy.num_actions() == mdp.num_actions(),
                  "policy shape does not match MDP");
  TrajectoryBatch batch;
  batch.rng_seed = seed;
  batch.trajectories.resize(n_episodes);
  batch.prompt_ids.resize(n_episodes);
  const auto& init = mdp.initial_distribution();
  const std::span<const double> init_span{init.data(), static_cast<std::size_t>(init.size())};
  for (std::size_t i = 0; i < n_episodes; ++i) {
    Rng rng = make_substream(seed, i);
    const std::size_t start = sample_categorical(init_span, rng);
    batch.prompt_ids[i] = start;
    batch.trajectories[i] = rollout_episode(mdp, policy, rng, start, horizon_cap);
  }
  return batch;
}

/// P_pi(s, s') = sum_a pi(a|s) P(s'|s, a), dense.
inline Matrix state_transition_matrix(const FiniteMdp& mdp, const PolicyTable& policy) {
  const auto n = static_cast<Eigen::Index>(mdp.num_states());
  Matrix P = Matrix::Zero(n, n);
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      const double pa = policy.prob(s, a);
      if (pa == 0.0) continue;
      for (const auto& t : mdp.transitions(s, a))
        P(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t.next)) += pa * t.prob;
    }
  return P;
}

/// State-visitation distribution of `policy`.
///
/// gamma < 1: normalised discounted occupancy (1 - gamma) sum_t gamma^t P(s_t = s),
/// terminal states included. gamma = 1: expected visit counts of non-terminal
/// states normalised to sum to 1 (terminal entries are 0); requires an
/// episodic MDP.
inline Vector visitation_distribution(const FiniteMdp& mdp, const PolicyTable& policy) {
  const double g = mdp.gamma();
  const auto n = static_cast<Eigen::Index>(mdp.num_states());
  if (g < 1.0) {
    const Matrix P = state_transition_matrix(mdp, policy);
    const Matrix A = Matrix::Identity(n, n) - g * P.transpose();
    Vector d = A.partialPivLu().solve(mdp.initial_distribution());
    return (1.0 - g) * d;
  }
  if (!mdp.is_episodic()) throw UsageError("gamma = 1 occupancy requires an episodic MDP");
  Vector visits = Vector::Zero(n);
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    if (!mdp.is_terminal(s)) visits(static_cast<Eigen::Index>(s)) = mdp.initial_distribution()(static_cast<Eigen::Index>(s));
  for (auto s : mdp.topological_order()) {
    const double mass = visits(static_cast<Eigen::Index>(s));
    if (mass == 0.0) continue;
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      const double pa = policy.prob(s, a);
      if (pa == 0.0) continue;
      for (const auto& t : mdp.transitions(s, a))
        if (!mdp.is_terminal(t.next)) visits(static_cast<Eigen::Index>(t.next)) += mass * pa * t.prob;
    }
  }
  const double total = visits.sum();
  if (total <= 0.0) throw UsageError("initial distribution puts no mass on non-terminal states");
  return visits / total;
}

// ---------------------------------------------------------------------------
// Plain-text MDP format:
//
//   klq-mdp 1
//   states <S>
//   actions <A>
//   gamma <g>
//   terminal <s> <s> ...
//   initial <p_0> ... <p_{S-1}>
//   t <s> <a> <s'> <prob> <reward>     (one line per kernel entry)
//
// Numbers are written with 17 significant digits, so files round-trip
// bit-exactly. Lines starting with '#' are comments.
// ---------------------------------------------------------------------------

inline void write_mdp(std::ostream& os, const FiniteMdp& mdp) {
  os << std::setprecision(17);
  os << "klq-mdp 1\n";
  os << "states " << mdp.num_states() << "\nactions " << mdp.num_actions() << "\ngamma " << mdp.gamma() << "\n";
  os << "terminal";
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    if (mdp.is_terminal(s)) os << ' ' << s;
  os << "\ninitial";
  for (Eigen::Index s = 0; s < mdp.initial_distribution().size(); ++s) os << ' ' << mdp.initial_distribution()(s);
  os << "\n";
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    if (mdp.is_terminal(s)) continue;
    for (std::size_t a = 0; a < mdp.num_actions(); ++a)
      for (const auto& t : mdp.transitions(s, a))
        os << "t " << s << ' ' << a << ' ' << t.next << ' ' << t.prob << ' ' << t.reward << "\n";
  }
}

inline FiniteMdp read_mdp(std::istream& is) {
  std::string line;
  std::size_t S = 0, A = 0;
  double gamma = 1.0;
  std::vector<std::size_t> terminals;
  std::vector<double> initial;
  std::vector<std::vector<Transition>> rows;
  bool header = false;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError("MDP file line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!header) {
      int version = 0;
      if (key != "klq-mdp" || !(ls >> version) || version != 1) fail("expected 'klq-mdp 1' header");
      header = true;
    } else if (key == "states") {
      if (!(ls >> S)) fail("bad state count");
    } else if (key == "actions") {
      if (!(ls >> A)) fail("bad action count");
      rows.assign(S * A, {});
    } else if (key == "gamma") {
      if (!(ls >> gamma)) fail("bad gamma");
    } else if (key == "terminal") {
      std::size_t s;
      while (ls >> s) terminals.push_back(s);
    } else if (key == "initial") {
      double p;
      while (ls >> p) initial.push_back(p);
    } else if (key == "t") {
      std::size_t s, a, n;
      double p, r;
      if (!(ls >> s >> a >> n >> p >> r)) fail("bad transition line");
      if (s >= S || a >= A) fail("transition index out of range");
      rows[s * A + a].push_back({n, p, r});
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!header) throw ConfigError("empty MDP file");
  if (initial.size() != S) throw ConfigError("initial distribution has " + std::to_string(initial.size()) + " entries, expected " + std::to_string(S));
  std::vector<bool> term(S, false);
  for (auto s : terminals) {
    if (s >= S) throw ConfigError("terminal state out of range");
    term[s] = true;
  }
  Vector init(static_cast<Eigen::Index>(S));
  for (std::size_t i = 0; i < S; ++i) init(static_cast<Eigen::Index>(i)) = initial[i];
  try {
    return FiniteMdp(S, A, gamma, std::move(rows), std::move(term), std::move(init));
  } catch (const UsageError& e) {
    throw ConfigError(std::string("invalid MDP file: ") + e.what());
  }
}

}  // namespace klq
