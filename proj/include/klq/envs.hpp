#pragma once

// Synthetic stand-ins for a preference model, an SFT reference policy and
// the task generators used by tests and experiments.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "klq/error.hpp"
#include "klq/mdp.hpp"
#include "klq/rng.hpp"
#include "klq/token_task.hpp"

namespace klq {

enum class RewardKind { TargetMatch, PrefixCount, Table };

struct RewardModelSpec {
  RewardKind kind = RewardKind::TargetMatch;
  Tokens target;                    // target_match
  std::size_t token = 0;            // prefix_count: the token being counted
  std::map<Tokens, double> table;   // table: completion -> score
  double scale = 1.0;
};

inline std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::TargetMatch: return "target_match";
    case RewardKind::PrefixCount: return "prefix_count";
    case RewardKind::Table: return "table";
  }
  return "?";
}

inline RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "target_match") return RewardKind::TargetMatch;
  if (s == "prefix_count") return RewardKind::PrefixCount;
  if (s == "table") return RewardKind::Table;
  throw ConfigError("unknown reward kind '" + s + "'");
}

/// Preference score of `completion` (EOS excluded) minus omega when the
/// completion was truncated at T_max.
inline double score_completion(const RewardModelSpec& spec, std::span<const std::size_t> /*prompt*/,
                               std::span<const std::size_t> completion, double omega = 0.0,
                               bool truncated = false) {
  double base = 0.0;
  switch (spec.kind) {
    case RewardKind::TargetMatch: {
      const std::size_t n = std::min(completion.size(), spec.target.size());
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) hits += completion[i] == spec.target[i];
      base = spec.scale * static_cast<double>(hits);
      break;
    }
    case RewardKind::PrefixCount:
      base = spec.scale * static_cast<double>(std::count(completion.begin(), completion.end(), spec.token));
      break;
    case RewardKind::Table: {
      auto it = spec.table.find(Tokens(completion.begin(), completion.end()));
      if (it == spec.table.end()) throw UsageError("reward table has no entry for this completion");
      base = spec.scale * it->second;
      break;
    }
  }
  return truncated ? base - omega : base;
}

inline CompletionScorer make_scorer(RewardModelSpec spec) {
  return [spec = std::move(spec)](std::span<const std::size_t> prompt, std::span<const std::size_t> completion) {
    return score_completion(spec, prompt, completion);
  };
}

// --------------------------------------------------------------------------
// Reference policies

enum class ReferenceKind { Uniform, DirichletRandom, Bigram };

struct ReferencePolicySpec {
  ReferenceKind kind = ReferenceKind::Uniform;
  double concentration = 1.0;
  std::vector<Tokens> corpus;
  std::uint64_t seed = 0;
};

inline ReferenceKind reference_kind_from_string(const std::string& s) {
  if (s == "uniform") return ReferenceKind::Uniform;
  if (s == "dirichlet_random") return ReferenceKind::DirichletRandom;
  if (s == "bigram") return ReferenceKind::Bigram;
  throw ConfigError("unknown reference policy kind '" + s + "'");
}

/// Mixes each non-terminal row with the uniform distribution just enough that
/// every entry is at least kSupportFloor.
inline Matrix apply_support_floor(Matrix probs) {
  const double A = static_cast<double>(probs.cols());
  for (Eigen::Index s = 0; s < probs.rows(); ++s) {
    if (probs.row(s).minCoeff() >= kSupportFloor) continue;
    probs.row(s) = (1.0 - A * kSupportFloor) * probs.row(s).array() + kSupportFloor;
  }
  return probs;
}

namespace detail {

inline Matrix dirichlet_rows(std::size_t S, std::size_t A, double concentration, std::uint64_t seed) {
  if (!(concentration > 0.0)) throw UsageError("Dirichlet concentration must be > 0");
  Matrix probs(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
  for (std::size_t s = 0; s < S; ++s) {
    Rng rng = make_substream(seed, s);
    std::gamma_distribution<double> g(concentration, 1.0);
    double sum = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      const double x = g(rng);
      probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = x;
      sum += x;
    }
    if (sum <= 0.0) {
      probs.row(static_cast<Eigen::Index>(s)).setConstant(1.0 / static_cast<double>(A));
      continue;
    }
    probs.row(static_cast<Eigen::Index>(s)) /= sum;
  }
  return probs;
}

}  // namespace detail

inline PolicyTable build_reference_policy(const ReferencePolicySpec& spec, const FiniteMdp& mdp) {
  const std::size_t S = mdp.num_states(), A = mdp.num_actions();
  switch (spec.kind) {
    case ReferenceKind::Uniform:
      return PolicyTable::uniform(S, A);
    case ReferenceKind::DirichletRandom: {
      Matrix probs = detail::dirichlet_rows(S, A, spec.concentration, spec.seed);
      for (std::size_t s = 0; s < S; ++s)
        if (mdp.is_terminal(s)) probs.row(static_cast<Eigen::Index>(s)).setConstant(1.0 / static_cast<double>(A));
      return PolicyTable::from_probs(apply_support_floor(std::move(probs)));
    }
    case ReferenceKind::Bigram:
      throw UsageError("bigram reference policies need a token MDP");
  }
  throw UsageError("unknown reference kind");
}

/// Bigram next-token model with add-one smoothing. The context of a state is
/// the last token of prompt + completion; an empty context uses the
/// distribution of first tokens of corpus lines. Every corpus line implicitly
/// ends in EOS.
inline PolicyTable build_reference_policy(const ReferencePolicySpec& spec, const TokenMdp& tm) {
  if (spec.kind != ReferenceKind::Bigram) return build_reference_policy(spec, tm.mdp);
  if (spec.corpus.empty()) throw UsageError("bigram reference policy needs a non-empty corpus");
  const std::size_t N = tm.task.alphabet_size, eos = tm.task.eos();
  // counts[c][t]: row c < N is "after token c", row N is start-of-sequence.
  std::vector<std::vector<double>> counts(N + 1, std::vector<double>(N, 1.0));
  for (const auto& line : spec.corpus) {
    std::size_t prev = N;
    for (auto t : line) {
      if (t >= N) throw UsageError("corpus token outside the alphabet");
      counts[prev][t] += 1.0;
      prev = t;
      if (t == eos) break;
    }
    if (line.empty() || line.back() != eos) counts[prev][eos] += 1.0;
  }
  const std::size_t S = tm.mdp.num_states();
  Matrix probs(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(N));
  for (std::size_t s = 0; s < S; ++s) {
    const Tokens ctx = tm.context(s);
    const std::size_t c = ctx.empty() ? N : ctx.back();
    double total = 0.0;
    for (double x : counts[c]) total += x;
    for (std::size_t a = 0; a < N; ++a)
      probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) =
          tm.mdp.is_terminal(s) ? 1.0 / static_cast<double>(N) : counts[c][a] / total;
  }
  return PolicyTable::from_probs(std::move(probs));
}

/// Token corpus: one sequence per line; whitespace-separated token ids, or
/// letters ('$' for EOS) written with or without spaces.
inline std::vector<Tokens> parse_corpus(std::istream& is, std::size_t alphabet_size) {
  std::vector<Tokens> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string piece;
    Tokens seq;
    while (ls >> piece) {
      if (std::all_of(piece.begin(), piece.end(), [](unsigned char c) { return std::isdigit(c); })) {
        const auto tok = static_cast<std::size_t>(std::stoull(piece));
        if (tok >= alphabet_size) throw ConfigError("corpus token id " + piece + " outside the alphabet");
        seq.push_back(tok);
      } else {
        const Tokens t = parse_token_string(piece, alphabet_size);
        seq.insert(seq.end(), t.begin(), t.end());
      }
    }
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<Tokens> load_corpus(const std::string& path, std::size_t alphabet_size) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus file " + path);
  return parse_corpus(in, alphabet_size);
}

// --------------------------------------------------------------------------
// Task generators

struct RandomMdpSpec {
  std::size_t num_states = 5;
  std::size_t num_actions = 3;
  double gamma = 0.9;
  double sparsity = 0.0;         // fraction of kernel entries forced to zero
  std::size_t num_terminal = 0;  // the last num_terminal states are terminal
  std::uint64_t seed = 0;
};

/// Dirichlet(1) kernel rows over a random support, rewards uniform in [-1, 1],
/// initial distribution uniform over non-terminal states.
inline FiniteMdp build_random_mdp(const RandomMdpSpec& spec) {
  const std::size_t S = spec.num_states, A = spec.num_actions;
  if (S == 0 || A == 0) throw UsageError("random MDP needs at least one state and action");
  if (S * A > kDenseSolveBudget)
    throw BudgetError("random MDP exceeds the dense-solve budget");
  if (spec.num_terminal >= S) throw UsageError("random MDP needs a non-terminal state");
  if (!(spec.sparsity >= 0.0 && spec.sparsity < 1.0)) throw UsageError("sparsity must lie in [0, 1)");
  if (!(spec.gamma >= 0.0 && spec.gamma < 1.0)) throw UsageError("random MDPs require gamma < 1");
  Rng rng = make_substream(spec.seed, 0x5eed);
  std::gamma_distribution<double> unit_gamma(1.0, 1.0);
  std::vector<std::vector<Transition>> rows(S * A);
  std::vector<bool> terminal(S, false);
  for (std::size_t s = S - spec.num_terminal; s < S; ++s) terminal[s] = true;
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      auto& row = rows[s * A + a];
      if (terminal[s]) continue;
      std::vector<double> w(S, 0.0);
      double sum = 0.0;
      for (std::size_t n = 0; n < S; ++n) {
        if (uniform01(rng) < spec.sparsity) continue;
        w[n] = unit_gamma(rng);
        sum += w[n];
      }
      if (sum <= 0.0) {
        const auto keep = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(S));
        w[keep] = 1.0;
        sum = 1.0;
      }
      for (std::size_t n = 0; n < S; ++n) {
        if (w[n] == 0.0) continue;
        row.push_back({n, w[n] / sum, 2.0 * uniform01(rng) - 1.0});
      }
      // Force an exact row sum of 1 by assigning the rounding residue.
      double acc = 0.0;
      for (std::size_t i = 0; i + 1 < row.size(); ++i) acc += row[i].prob;
      row.back().prob = 1.0 - acc;
    }
  }
  Vector init = Vector::Zero(static_cast<Eigen::Index>(S));
  const double nt = static_cast<double>(S - spec.num_terminal);
  for (std::size_t s = 0; s + spec.num_terminal < S; ++s) init(static_cast<Eigen::Index>(s)) = 1.0 / nt;
  return FiniteMdp(S, A, spec.gamma, std::move(rows), std::move(terminal), std::move(init));
}

/// One decision state whose actions each end the episode with the given reward.
inline FiniteMdp make_bandit_mdp(const std::vector<double>& rewards, double gamma = 1.0) {
  const std::size_t A = rewards.size();
  if (A == 0) throw UsageError("bandit needs at least one arm");
  std::vector<std::vector<Transition>> rows(2 * A);
  for (std::size_t a = 0; a < A; ++a) rows[a] = {Transition{1, 1.0, rewards[a]}};
  Vector init(2);
  init << 1.0, 0.0;
  return FiniteMdp(2, A, gamma, std::move(rows), {false, true}, std::move(init));
}

struct TargetStringTask {
  TokenTaskSpec task;
  RewardModelSpec reward;
};

inline TargetStringTask build_target_string_task(std::size_t alphabet_size, const Tokens& target,
                                                 std::vector<Tokens> prompts, std::size_t max_length,
                                                 double omega, RewardKind kind = RewardKind::TargetMatch,
                                                 double scale = 1.0) {
  for (auto t : target)
    if (t + 1 >= alphabet_size) throw UsageError("target must use non-EOS alphabet tokens");
  if (max_length < target.size() + 1) throw UsageError("max_length must leave room for target + EOS");
  TargetStringTask out;
  out.task.alphabet_size = alphabet_size;
  out.task.prompts = prompts.empty() ? std::vector<Tokens>{Tokens{}} : std::move(prompts);
  out.task.max_length = max_length;
  out.task.reward_model_id = to_string(kind);
  out.task.length_penalty = omega;
  out.task.validate();
  out.reward.kind = kind;
  out.reward.target = target;
  out.reward.scale = scale;
  if (kind == RewardKind::PrefixCount) out.reward.token = target.empty() ? 0 : target.front();
  return out;
}

/// Exact-oracle toy task: alphabet {A, B, C, EOS}, completions of at most 6
/// tokens, target "ABCAB", one empty prompt.
inline TargetStringTask default_exact_task(double omega = 1.0) {
  return build_target_string_task(4, parse_token_string("ABCAB", 4), {Tokens{}}, 6, omega);
}

}  // namespace klq
