#pragma once

// Token-level MDPs: states are (prompt, partial completion) prefixes, actions
// are next tokens, and the completion is scored once at the end.

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "klq/error.hpp"
#include "klq/mdp.hpp"

namespace klq {

using Tokens = std::vector<std::size_t>;

/// Default cap on the number of states a prefix tree may intern.
inline constexpr std::size_t kDefaultStateBudget = 200'000;

struct TokenTaskSpec {
  std::size_t alphabet_size = 4;  // includes EOS, which is always the last index
  std::vector<Tokens> prompts{Tokens{}};
  std::size_t max_length = 6;     // maximum completion length T_max
  std::string reward_model_id = "target_match";
  double length_penalty = 1.0;    // omega, charged when T_max is hit without EOS

  std::size_t eos() const { return alphabet_size - 1; }

  void validate() const {
    if (alphabet_size < 2) throw UsageError("alphabet needs at least one token plus EOS");
    if (max_length < 1) throw UsageError("max_length must be >= 1");
    if (prompts.empty()) throw UsageError("task needs at least one prompt");
    if (!(length_penalty >= 0.0)) throw UsageError("length penalty must be >= 0");
    for (const auto& p : prompts)
      for (auto tok : p)
        if (tok >= alphabet_size) throw UsageError("prompt token outside the alphabet");
  }
};

/// Letters A, B, C, ... for ordinary tokens and '$' for EOS.
inline std::string tokens_to_string(std::span<const std::size_t> toks, std::size_t alphabet_size) {
  std::string out;
  for (auto t : toks) out += (t + 1 == alphabet_size) ? '$' : static_cast<char>('A' + t);
  return out;
}

inline Tokens parse_token_string(const std::string& text, std::size_t alphabet_size) {
  Tokens out;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    std::size_t tok;
    if (c == '$') tok = alphabet_size - 1;
    else if (c >= 'A' && c <= 'Z') tok = static_cast<std::size_t>(c - 'A');
    else if (c >= 'a' && c <= 'z') tok = static_cast<std::size_t>(c - 'a');
    else throw ConfigError(std::string("bad token character '") + c + "'");
    if (tok >= alphabet_size) throw ConfigError(std::string("token '") + c + "' outside the alphabet");
    out.push_back(tok);
  }
  return out;
}

/// Base preference score of a completion (EOS excluded from `completion`).
using CompletionScorer = std::function<double(std::span<const std::size_t> prompt,
                                              std::span<const std::size_t> completion)>;

/// A prefix-tree MDP plus the prefix <-> state-id maps.
struct TokenMdp {
  FiniteMdp mdp;
  TokenTaskSpec task;
  std::vector<std::size_t> prompt_of_state;
  std::vector<Tokens> emitted;               // completion tokens per state, EOS included for EOS leaves
  std::vector<std::size_t> roots;            // root state of each prompt
  std::map<std::pair<std::size_t, Tokens>, std::size_t> state_ids;

  std::size_t state_of(std::size_t prompt_index, const Tokens& emitted_tokens) const {
    auto it = state_ids.find({prompt_index, emitted_tokens});
    if (it == state_ids.end()) throw UsageError("unknown prefix");
    return it->second;
  }

  /// Context (prompt followed by emitted tokens) of a state.
  Tokens context(std::size_t s) const {
    Tokens ctx = task.prompts[prompt_of_state[s]];
    ctx.insert(ctx.end(), emitted[s].begin(), emitted[s].end());
    return ctx;
  }

  std::size_t num_decision_states() const { return mdp.non_terminal_states().size(); }
};

/// Number of states in the prefix tree of one prompt, as a double so that
/// oversize trees can be reported without overflow.
inline double prefix_tree_size(const TokenTaskSpec& task) {
  const double branch = static_cast<double>(task.alphabet_size - 1);
  double interior = 0.0, level = 1.0;
  for (std::size_t d = 0; d < task.max_length; ++d) {
    interior += level;
    level *= branch;
  }
  // Each interior state has one EOS leaf; the last level adds truncation leaves.
  return 2.0 * interior + level;
}

/// Expands the prefix trees of `prompt_indices` into one MDP whose initial
/// distribution is `initial_weights` (normalised) over the listed roots.
inline TokenMdp expand_task_forest(const TokenTaskSpec& task, const CompletionScorer& scorer,
                                   const std::vector<std::size_t>& prompt_indices,
                                   std::vector<double> initial_weights = {}, double gamma = 1.0,
                                   std::size_t state_budget = kDefaultStateBudget) {
  task.validate();
  if (prompt_indices.empty()) throw UsageError("no prompts to expand");
  const double required = prefix_tree_size(task) * static_cast<double>(prompt_indices.size());
  if (required > static_cast<double>(state_budget))
    throw BudgetError("prefix tree needs " + std::to_string(static_cast<unsigned long long>(required)) +
                      " states; budget is " + std::to_string(state_budget));
  if (initial_weights.empty()) initial_weights.assign(prompt_indices.size(), 1.0);
  if (initial_weights.size() != prompt_indices.size()) throw UsageError("one initial weight per prompt");

  const std::size_t N = task.alphabet_size, eos = task.eos();
  TokenMdp out;
  out.task = task;
  std::vector<std::vector<Transition>> rows;
  std::vector<bool> terminal;

  auto intern = [&](std::size_t prompt, Tokens emitted, bool is_terminal) {
    const std::size_t id = out.emitted.size();
    out.state_ids.emplace(std::make_pair(prompt, emitted), id);
    out.emitted.push_back(std::move(emitted));
    out.prompt_of_state.push_back(prompt);
    terminal.push_back(is_terminal);
    rows.resize(rows.size() + N);
    return id;
  };

  for (auto p : prompt_indices) {
    if (p >= task.prompts.size()) throw UsageError("prompt index out of range");
    const auto& prompt = task.prompts[p];
    out.roots.push_back(intern(p, {}, false));
    // Breadth-first; `frontier` holds interior states of the current depth.
    std::vector<std::size_t> frontier{out.roots.back()};
    for (std::size_t depth = 0; depth < task.max_length; ++depth) {
      std::vector<std::size_t> next_frontier;
      for (auto s : frontier) {
        const Tokens base = out.emitted[s];
        for (std::size_t a = 0; a < N; ++a) {
          Tokens child = base;
          child.push_back(a);
          std::size_t id;
          double reward = 0.0;
          if (a == eos) {
            reward = scorer(prompt, base);
            id = intern(p, std::move(child), true);
          } else if (depth + 1 == task.max_length) {
            reward = scorer(prompt, child) - task.length_penalty;
            id = intern(p, std::move(child), true);
          } else {
            id = intern(p, std::move(child), false);
            next_frontier.push_back(id);
          }
          rows[s * N + a] = {Transition{id, 1.0, reward}};
        }
      }
      frontier = std::move(next_frontier);
    }
  }

  const std::size_t S = out.emitted.size();
  Vector init = Vector::Zero(static_cast<Eigen::Index>(S));
  double wsum = 0.0;
  for (double w : initial_weights) wsum += w;
  if (!(wsum > 0.0)) throw UsageError("initial weights must have positive mass");
  for (std::size_t i = 0; i < out.roots.size(); ++i)
    init(static_cast<Eigen::Index>(out.roots[i])) += initial_weights[i] / wsum;
  out.mdp = FiniteMdp(S, N, gamma, std::move(rows), std::move(terminal), std::move(init));
  return out;
}

/// Prefix tree of a single prompt.
inline TokenMdp prefix_tree_expand(const TokenTaskSpec& task, const CompletionScorer& scorer,
                                   std::size_t prompt_index, double gamma = 1.0,
                                   std::size_t state_budget = kDefaultStateBudget) {
  return expand_task_forest(task, scorer, {prompt_index}, {}, gamma, state_budget);
}

/// Completion tokens (EOS stripped) and truncation flag of a finished episode.
inline std::pair<Tokens, bool> completion_of(const TokenMdp& tm, const Trajectory& traj) {
  Tokens c = tm.emitted[traj.final_state()];
  const bool eos = !c.empty() && c.back() == tm.task.eos();
  if (eos) c.pop_back();
  return {c, !eos && tm.mdp.is_terminal(traj.final_state())};
}

/// rollout_batch on a token MDP, with prompt ids and EOS flags filled in.
inline TrajectoryBatch rollout_token_batch(const TokenMdp& tm, const PolicyTable& policy, std::uint64_t seed,
                                           std::size_t n_episodes) {
  TrajectoryBatch batch = rollout_batch(tm.mdp, policy, seed, n_episodes, tm.task.max_length);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& traj = batch.trajectories[i];
    batch.prompt_ids[i] = tm.prompt_of_state[traj.states.front()];
    traj.terminated_by_eos = !traj.actions.empty() && traj.actions.back() == tm.task.eos();
  }
  return batch;
}

}  // namespace klq
