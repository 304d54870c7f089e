#pragma once

// Tabular softmax policy with a value head, the KLQ and PPO losses with
// analytic gradients, and the on-policy training loops.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "klq/error.hpp"
#include "klq/estimators.hpp"
#include "klq/mdp.hpp"
#include "klq/rng.hpp"
#include "klq/soft_rl.hpp"
#include "klq/table_io.hpp"
#include "klq/tables.hpp"
#include "klq/token_task.hpp"

namespace klq {

enum class Algo { Klq, PpoClip, PpoPenalty };

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::Klq: return "klq";
    case Algo::PpoClip: return "ppo-clip";
    case Algo::PpoPenalty: return "ppo-penalty";
  }
  return "?";
}

inline Algo algo_from_string(const std::string& s) {
  if (s == "klq") return Algo::Klq;
  if (s == "ppo-clip") return Algo::PpoClip;
  if (s == "ppo-penalty") return Algo::PpoPenalty;
  throw ConfigError("unknown algorithm '" + s + "'");
}

/// Direction of the previous-iterate KL in the penalty objective.
///   Reverse: D(pi || pi_old)   Forward: D(pi_old || pi)
enum class KlDirection { Reverse, Forward };

inline std::string to_string(KlDirection d) { return d == KlDirection::Reverse ? "reverse" : "forward"; }

inline KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "reverse") return KlDirection::Reverse;
  if (s == "forward") return KlDirection::Forward;
  throw ConfigError("unknown KL direction '" + s + "'");
}

struct TrainConfig {
  double tau = 0.05;
  double gamma = 1.0;
  double lambda = 0.95;
  double alpha = 1.0;
  double learning_rate = 1.41e-5;
  bool linear_decay = true;
  std::size_t epochs_per_batch = 4;
  std::size_t rollouts_per_batch = 192;
  std::size_t minibatch_size = 192;  // trajectories per minibatch
  std::size_t total_episodes = 192;
  double clip_eps = 0.2;
  double value_clip = 0.2;
  double value_coef = 0.1;
  double length_penalty = 1.0;
  double beta = 0.05;  // ppo-penalty previous-iterate KL weight
  KlDirection kl_direction = KlDirection::Forward;
  bool whiten_advantages = false;  // ppo only
  bool random_value_init = false;
  double value_init_scale = 0.01;
  bool report_post_step_loss = false;
  std::size_t horizon_cap = kDefaultHorizonCap;  // non-token MDPs only
  std::uint64_t seed = 0;

  std::size_t num_batches() const { return total_episodes / rollouts_per_batch; }

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (epochs_per_batch == 0) throw ConfigError("epochs_per_batch must be >= 1");
    if (rollouts_per_batch == 0) throw ConfigError("rollouts_per_batch must be >= 1");
    if (minibatch_size == 0) throw ConfigError("minibatch_size must be >= 1");
    if (total_episodes < rollouts_per_batch) throw ConfigError("total_episodes must be >= rollouts_per_batch");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps must lie in (0, 1)");
    if (!(value_clip > 0.0)) throw ConfigError("value_clip must be > 0");
    if (!(value_coef >= 0.0)) throw ConfigError("value_coef must be >= 0");
    if (!(length_penalty >= 0.0)) throw ConfigError("length_penalty must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(value_init_scale >= 0.0)) throw ConfigError("value_init_scale must be >= 0");
    if (horizon_cap == 0) throw ConfigError("horizon_cap must be >= 1");
  }
};

/// Frozen (pi_old, V_old) used for rollouts and targets of one batch.
struct ParamSnapshot {
  PolicyTable policy;
  VTable value;
  std::uint64_t tag = 0;
};

/// Trainable parameters: per-state logits (pi = softmax) and a value head.
struct ParamState {
  Matrix logits;
  Vector value;

  /// Policy initialised to pi_b, value head to zeros (or small noise).
  static ParamState from_reference(const PolicyTable& pi_b, bool random_value = false, double scale = 0.0,
                                   std::uint64_t seed = 0) {
    ParamState p;
    p.logits = pi_b.log_probs();
    p.value = Vector::Zero(static_cast<Eigen::Index>(pi_b.num_states()));
    if (random_value) {
      Rng rng = make_substream(seed, 0x5eed);
      std::normal_distribution<double> nd(0.0, scale);
      for (Eigen::Index s = 0; s < p.value.size(); ++s) p.value(s) = nd(rng);
    }
    return p;
  }

  std::size_t num_states() const { return static_cast<std::size_t>(logits.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(logits.cols()); }

  PolicyTable policy() const { return PolicyTable::from_logits(logits); }
  VTable value_table() const { return VTable{value}; }
  ParamSnapshot freeze(std::uint64_t tag) const { return {policy(), value_table(), tag}; }

  double log_prob(std::size_t s, std::size_t a) const {
    const auto row = logits.row(static_cast<Eigen::Index>(s));
    const double m = row.maxCoeff();
    return row(static_cast<Eigen::Index>(a)) - m - std::log((row.array() - m).exp().sum());
  }
};

struct Gradient {
  Matrix logits;
  Vector value;

  static Gradient zeros_like(const ParamState& p) {
    return {Matrix::Zero(p.logits.rows(), p.logits.cols()), Vector::Zero(p.value.size())};
  }
};

/// One step of a trajectory with everything the losses need, computed from
/// the frozen snapshot.
struct StepSample {
  std::size_t state = 0;
  std::size_t action = 0;
  double target = 0.0;        // KLQ lambda-return target
  double advantage = 0.0;     // PPO advantage
  double value_target = 0.0;  // PPO value regression target
  double old_log_prob = 0.0;
  double old_value = 0.0;
};

struct LossEval {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  Gradient grad;
};

namespace detail {

inline void softmax_row(const ParamState& p, std::size_t s, std::vector<double>& probs,
                        std::vector<double>& logp) {
  const std::size_t A = p.num_actions();
  probs.resize(A);
  logp.resize(A);
  const auto row = p.logits.row(static_cast<Eigen::Index>(s));
  const double m = row.maxCoeff();
  double z = 0.0;
  for (std::size_t a = 0; a < A; ++a) z += std::exp(row(static_cast<Eigen::Index>(a)) - m);
  const double lz = m + std::log(z);
  for (std::size_t a = 0; a < A; ++a) {
    logp[a] = row(static_cast<Eigen::Index>(a)) - lz;
    probs[a] = std::exp(logp[a]);
  }
}

inline void check_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + what);
}

inline void check_finite(const Gradient& g) {
  if (!g.logits.allFinite() || !g.value.allFinite()) throw NumericError("non-finite gradient");
}

// Adds c * d log pi(a|s) / d logits(s, .) to grad.
inline void add_log_prob_grad(Gradient& g, std::size_t s, std::size_t a, const std::vector<double>& probs,
                              double c) {
  const auto r = static_cast<Eigen::Index>(s);
  for (std::size_t j = 0; j < probs.size(); ++j) g.logits(r, static_cast<Eigen::Index>(j)) -= c * probs[j];
  g.logits(r, static_cast<Eigen::Index>(a)) += c;
}

inline double clip_value(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// Clipped value loss max((V - y)^2, (clip(V, V_old - eta, V_old + eta) - y)^2)
// and its derivative with respect to V.
inline std::pair<double, double> clipped_value_loss(double v, double old_v, double y, double eta) {
  const double l1 = (v - y) * (v - y);
  const double vc = clip_value(v, old_v - eta, old_v + eta);
  const double l2 = (vc - y) * (vc - y);
  if (l1 >= l2) return {l1, 2.0 * (v - y)};
  return {l2, 0.0};
}

}  // namespace detail

/// mean over steps of (tau log(pi(a|s)/pi_b(a|s)) + V(s) - G)^2 and its
/// gradient.
inline LossEval klq_loss(const ParamState& p, std::span<const StepSample> steps, const PolicyTable& pi_b,
                         double tau) {
  if (steps.empty()) throw UsageError("empty minibatch");
  LossEval out;
  out.grad = Gradient::zeros_like(p);
  std::vector<double> probs, logp;
  const double n = static_cast<double>(steps.size());
  for (const auto& st : steps) {
    detail::softmax_row(p, st.state, probs, logp);
    const double res = tau * (logp[st.action] - pi_b.log_prob(st.state, st.action)) +
                       p.value(static_cast<Eigen::Index>(st.state)) - st.target;
    out.loss += res * res / n;
    const double c = 2.0 * res / n;
    out.grad.value(static_cast<Eigen::Index>(st.state)) += c;
    detail::add_log_prob_grad(out.grad, st.state, st.action, probs, c * tau);
  }
  out.policy_loss = out.loss;
  detail::check_finite(out.loss, "KLQ loss");
  detail::check_finite(out.grad);
  return out;
}

/// PPO-clip: mean(max(-rho A, -clip(rho) A)) + zeta mean(clipped value loss).
inline LossEval ppo_clip_loss(const ParamState& p, std::span<const StepSample> steps, const TrainConfig& cfg) {
  if (steps.empty()) throw UsageError("empty minibatch");
  LossEval out;
  out.grad = Gradient::zeros_like(p);
  std::vector<double> probs, logp;
  const double n = static_cast<double>(steps.size());
  for (const auto& st : steps) {
    detail::softmax_row(p, st.state, probs, logp);
    const double rho = std::exp(logp[st.action] - st.old_log_prob);
    const double adv = st.advantage;
    const double l1 = -rho * adv;
    const double l2 = -detail::clip_value(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
    if (l1 >= l2) {
      out.policy_loss += l1 / n;
      // d(-rho A)/d log pi = -rho A
      detail::add_log_prob_grad(out.grad, st.state, st.action, probs, -rho * adv / n);
    } else {
      out.policy_loss += l2 / n;
    }
    const auto [vl, dv] = detail::clipped_value_loss(p.value(static_cast<Eigen::Index>(st.state)), st.old_value,
                                                     st.value_target, cfg.value_clip);
    out.value_loss += vl / n;
    out.grad.value(static_cast<Eigen::Index>(st.state)) += cfg.value_coef * dv / n;
  }
  out.loss = out.policy_loss + cfg.value_coef * out.value_loss;
  detail::check_finite(out.loss, "PPO loss");
  detail::check_finite(out.grad);
  return out;
}

/// KL penalty terms of one state and their logit gradients:
///   beta D_dir(pi, pi_old)(s) + tau D(pi || pi_b)(s).
inline double penalty_at_state(const std::vector<double>& probs, const std::vector<double>& logp,
                               const PolicyTable& pi_old, const PolicyTable& pi_b, std::size_t s, double beta,
                               double tau, KlDirection dir, std::vector<double>* grad) {
  const std::size_t A = probs.size();
  double d_ref = 0.0, d_old = 0.0;
  for (std::size_t a = 0; a < A; ++a) {
    if (probs[a] > 0.0) d_ref += probs[a] * (logp[a] - pi_b.log_prob(s, a));
    if (dir == KlDirection::Reverse) {
      if (probs[a] > 0.0) d_old += probs[a] * (logp[a] - pi_old.log_prob(s, a));
    } else {
      const double q = pi_old.prob(s, a);
      if (q > 0.0) d_old += q * (pi_old.log_prob(s, a) - logp[a]);
    }
  }
  if (grad) {
    grad->assign(A, 0.0);
    for (std::size_t j = 0; j < A; ++j) {
      // d D(pi||q) / d logit_j = pi_j (log pi_j - log q_j - D(pi||q))
      double g = tau * probs[j] * (logp[j] - pi_b.log_prob(s, j) - d_ref);
      if (dir == KlDirection::Reverse)
        g += beta * probs[j] * (logp[j] - pi_old.log_prob(s, j) - d_old);
      else
        g += beta * (probs[j] - pi_old.prob(s, j));  // d D(q||pi) / d logit_j = pi_j - q_j
      (*grad)[j] = g;
    }
  }
  return beta * d_old + tau * d_ref;
}

/// PPO-penalty: mean(-rho A + beta D_dir(s) + tau D(pi||pi_b)(s)) + zeta mean(value loss).
inline LossEval ppo_penalty_loss(const ParamState& p, std::span<const StepSample> steps, const PolicyTable& pi_old,
                                 const PolicyTable& pi_b, const TrainConfig& cfg) {
  if (steps.empty()) throw UsageError("empty minibatch");
  LossEval out;
  out.grad = Gradient::zeros_like(p);
  std::vector<double> probs, logp, pg;
  const double n = static_cast<double>(steps.size());
  for (const auto& st : steps) {
    detail::softmax_row(p, st.state, probs, logp);
    const double rho = std::exp(logp[st.action] - st.old_log_prob);
    const double pen = penalty_at_state(probs, logp, pi_old, pi_b, st.state, cfg.beta, cfg.tau, cfg.kl_direction, &pg);
    out.policy_loss += (-rho * st.advantage + pen) / n;
    detail::add_log_prob_grad(out.grad, st.state, st.action, probs, -rho * st.advantage / n);
    for (std::size_t j = 0; j < pg.size(); ++j)
      out.grad.logits(static_cast<Eigen::Index>(st.state), static_cast<Eigen::Index>(j)) += pg[j] / n;
    const auto [vl, dv] = detail::clipped_value_loss(p.value(static_cast<Eigen::Index>(st.state)), st.old_value,
                                                     st.value_target, cfg.value_clip);
    out.value_loss += vl / n;
    out.grad.value(static_cast<Eigen::Index>(st.state)) += cfg.value_coef * dv / n;
  }
  out.loss = out.policy_loss + cfg.value_coef * out.value_loss;
  detail::check_finite(out.loss, "PPO-penalty loss");
  detail::check_finite(out.grad);
  return out;
}

/// Penalised surrogate averaged over `state_weights`:
///   sum_s w(s) [ sum_a pi(a|s) A(s,a) - beta D_dir(s) - tau D(pi||pi_b)(s) ].
/// sum_a pi_old (pi/pi_old) A is evaluated as sum_a pi A.
inline double ppo_penalty_objective_eval(const PolicyTable& candidate, const PolicyTable& pi_old,
                                         const QTable& advantage, double beta, double tau,
                                         const PolicyTable& pi_b, const Vector& state_weights,
                                         KlDirection dir = KlDirection::Reverse) {
  const std::size_t S = candidate.num_states(), A = candidate.num_actions();
  if (static_cast<std::size_t>(state_weights.size()) != S) throw UsageError("state weights have wrong size");
  double total = 0.0;
  std::vector<double> probs(A), logp(A);
  for (std::size_t s = 0; s < S; ++s) {
    const double w = state_weights(static_cast<Eigen::Index>(s));
    if (w == 0.0) continue;
    double surrogate = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      probs[a] = candidate.prob(s, a);
      logp[a] = candidate.log_prob(s, a);
      if (probs[a] > 0.0) surrogate += probs[a] * advantage(s, a);
      if (pi_b.prob(s, a) == 0.0 && probs[a] > 0.0) throw SupportError("candidate puts mass outside pi_b support");
    }
    if (dir == KlDirection::Forward || beta > 0.0)
      for (std::size_t a = 0; a < A; ++a)
        if (pi_old.prob(s, a) == 0.0 && probs[a] > 0.0 && beta > 0.0)
          throw SupportError("candidate puts mass outside pi_old support");
    total += w * (surrogate - penalty_at_state(probs, logp, pi_old, pi_b, s, beta, tau, dir, nullptr));
  }
  return total;
}

/// Plain gradient step; throws NumericError if parameters become non-finite.
inline void apply_gradient(ParamState& p, const Gradient& g, double lr) {
  p.logits -= lr * g.logits;
  p.value -= lr * g.value;
  if (!p.logits.allFinite() || !p.value.allFinite()) throw NumericError("parameters became non-finite");
}

struct UpdateResult {
  double loss = 0.0;  // pre-step (or post-step when requested)
  double policy_loss = 0.0;
  double value_loss = 0.0;
};

inline UpdateResult klq_minibatch_update(ParamState& p, std::span<const StepSample> steps, const PolicyTable& pi_b,
                                         const TrainConfig& cfg, double lr) {
  const auto ev = klq_loss(p, steps, pi_b, cfg.tau);
  apply_gradient(p, ev.grad, lr);
  if (cfg.report_post_step_loss) {
    const auto post = klq_loss(p, steps, pi_b, cfg.tau);
    return {post.loss, post.loss, 0.0};
  }
  return {ev.loss, ev.loss, 0.0};
}

inline UpdateResult ppo_clip_minibatch_update(ParamState& p, std::span<const StepSample> steps,
                                              const TrainConfig& cfg, double lr) {
  const auto ev = ppo_clip_loss(p, steps, cfg);
  apply_gradient(p, ev.grad, lr);
  if (cfg.report_post_step_loss) {
    const auto post = ppo_clip_loss(p, steps, cfg);
    return {post.loss, post.policy_loss, post.value_loss};
  }
  return {ev.loss, ev.policy_loss, ev.value_loss};
}

inline UpdateResult ppo_penalty_minibatch_update(ParamState& p, std::span<const StepSample> steps,
                                                 const PolicyTable& pi_old, const PolicyTable& pi_b,
                                                 const TrainConfig& cfg, double lr) {
  const auto ev = ppo_penalty_loss(p, steps, pi_old, pi_b, cfg);
  apply_gradient(p, ev.grad, lr);
  if (cfg.report_post_step_loss) {
    const auto post = ppo_penalty_loss(p, steps, pi_old, pi_b, cfg);
    return {post.loss, post.policy_loss, post.value_loss};
  }
  return {ev.loss, ev.policy_loss, ev.value_loss};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::size_t batch = 0;
  std::size_t episodes = 0;
  double mean_score = 0.0;
  double mean_kl = 0.0;
  double rlhf_reward = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

inline const char* kMetricsHeader = "batch,episodes,mean_score,mean_kl,rlhf_reward,loss,lr";

inline std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.batch << ',' << r.episodes << ',' << r.mean_score << ',' << r.mean_kl << ','
     << r.rlhf_reward << ',' << r.loss << ',' << r.lr;
  return os.str();
}

struct RunReport {
  std::vector<MetricsRow> metrics;
  ParamState final_params;
  double wall_seconds = 0.0;
};

/// Run directory: metrics.csv (flushed per row), final tables, seed record
/// and an ERROR marker on abort.
class RunWriter {
 public:
  explicit RunWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    std::filesystem::remove(dir_ / "ERROR");
    metrics_.open(dir_ / "metrics.csv", std::ios::trunc);
    if (!metrics_) throw Error("cannot open " + (dir_ / "metrics.csv").string());
    metrics_ << kMetricsHeader << '\n';
    metrics_.flush();
  }

  const std::filesystem::path& dir() const { return dir_; }

  void append(const MetricsRow& row) {
    metrics_ << format_metrics_row(row) << '\n';
    metrics_.flush();
  }

  void write_text(const std::string& name, const std::string& content) const {
    std::ofstream os(dir_ / name, std::ios::trunc);
    if (!os) throw Error("cannot write " + (dir_ / name).string());
    os << content;
  }

  void write_final(const ParamState& p) const {
    save_table((dir_ / "final_policy.txt").string(), p.policy(), [](std::ostream& os, const PolicyTable& t) {
      write_policy(os, t);
    });
    save_table((dir_ / "final_value.txt").string(), p.value_table(),
               [](std::ostream& os, const VTable& t) { write_v(os, t); });
  }

  void write_seed(std::uint64_t seed) const { write_text("seed.txt", std::to_string(seed) + "\n"); }

  void mark_error(const std::string& message) const { write_text("ERROR", message + "\n"); }

 private:
  std::filesystem::path dir_;
  std::ofstream metrics_;
};

/// What `train` rolls out on: a plain MDP (with a horizon cap) or a token MDP.
struct TrainingEnv {
  const FiniteMdp* mdp = nullptr;
  const TokenMdp* token = nullptr;
  std::size_t horizon = kDefaultHorizonCap;

  static TrainingEnv of(const FiniteMdp& m, std::size_t horizon = kDefaultHorizonCap) { return {&m, nullptr, horizon}; }
  static TrainingEnv of(const TokenMdp& t) { return {&t.mdp, &t, t.task.max_length}; }

  TrajectoryBatch rollout(const PolicyTable& pi, std::uint64_t seed, std::size_t n) const {
    if (token) return rollout_token_batch(*token, pi, seed, n);
    return rollout_batch(*mdp, pi, seed, n, horizon);
  }
};

namespace detail {

inline MetricsRow batch_metrics(const TrainingEnv& env, const TrajectoryBatch& batch, const PolicyTable& pi,
                                const PolicyTable& pi_b, double tau) {
  const Vector kl = kl_per_state(*env.mdp, pi, pi_b);
  MetricsRow row;
  for (const auto& traj : batch.trajectories) {
    row.mean_score += traj.total_reward();
    for (std::size_t t = 0; t < traj.length(); ++t) row.mean_kl += kl(static_cast<Eigen::Index>(traj.states[t]));
  }
  const double n = static_cast<double>(batch.size());
  row.mean_score /= n;
  row.mean_kl /= n;
  row.rlhf_reward = row.mean_score - tau * row.mean_kl;
  return row;
}

inline std::vector<std::vector<StepSample>> build_steps(Algo algo, const TrajectoryBatch& batch,
                                                        const TargetBatch& targets, const ParamSnapshot& snap,
                                                        const PolicyTable& pi_b, const TrainConfig& cfg) {
  std::vector<std::vector<StepSample>> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& traj = batch.trajectories[i];
    const auto& tt = targets.per_trajectory[i];
    out[i].resize(traj.length());
    for (std::size_t t = 0; t < traj.length(); ++t) {
      auto& st = out[i][t];
      st.state = traj.states[t];
      st.action = traj.actions[t];
      st.target = tt.target[t];
      st.old_log_prob = traj.behavior_log_probs[t];
      st.old_value = snap.value(st.state);
      if (algo != Algo::Klq) {
        st.advantage = tt.advantage[t];
        // The penalty objective charges the current-state KL explicitly, so
        // the sampled log-ratio of the current step is removed from A.
        if (algo == Algo::PpoPenalty)
          st.advantage += cfg.tau * (snap.policy.log_prob(st.state, st.action) - pi_b.log_prob(st.state, st.action));
        st.value_target = tt.value_target[t];
      }
    }
  }
  if (algo != Algo::Klq && cfg.whiten_advantages) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const auto& v : out)
      for (const auto& st : v) {
        sum += st.advantage;
        sq += st.advantage * st.advantage;
        n += 1.0;
      }
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(sq / n - mean * mean, 0.0));
    for (auto& v : out)
      for (auto& st : v) st.advantage = (st.advantage - mean) / (sd + 1e-8);
  }
  return out;
}

}  // namespace detail

/// On-policy training loop: for each batch, roll out the frozen snapshot,
/// compute targets without touching the parameters, then run
/// `epochs_per_batch` passes of shuffled minibatch updates.
inline RunReport train(Algo algo, const TrainingEnv& env, const PolicyTable& pi_b, const TrainConfig& cfg,
                       RunWriter* writer = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const FiniteMdp& mdp = *env.mdp;
  if (cfg.gamma != mdp.gamma()) throw ConfigError("config gamma differs from the MDP discount");
  if (pi_b.num_states() != mdp.num_states() || pi_b.num_actions() != mdp.num_actions())
    throw UsageError("reference policy shape does not match the MDP");
  if (writer) writer->write_seed(cfg.seed);

  RunReport report;
  ParamState params = ParamState::from_reference(pi_b, cfg.random_value_init, cfg.value_init_scale, cfg.seed);
  const std::size_t n_batches = cfg.num_batches();
  const LambdaParams lp{cfg.lambda, cfg.alpha, cfg.gamma};
  try {
    for (std::size_t k = 0; k < n_batches; ++k) {
      const double lr = cfg.linear_decay
                            ? cfg.learning_rate * (1.0 - static_cast<double>(k) / static_cast<double>(n_batches))
                            : cfg.learning_rate;
      const ParamSnapshot snap = params.freeze(k);
      const std::uint64_t batch_seed = substream_seed(cfg.seed, 2 * k);
      const TrajectoryBatch batch = env.rollout(snap.policy, batch_seed, cfg.rollouts_per_batch);
      MetricsRow row = detail::batch_metrics(env, batch, snap.policy, pi_b, cfg.tau);
      row.batch = k;
      row.episodes = (k + 1) * cfg.rollouts_per_batch;
      row.lr = lr;

      const TargetBatch targets =
          compute_targets(mdp, batch, snap.policy, snap.value, pi_b, lp, cfg.tau, algo != Algo::Klq, k);
      const auto steps = detail::build_steps(algo, batch, targets, snap, pi_b, cfg);

      double loss_sum = 0.0;
      std::size_t n_updates = 0;
      std::vector<StepSample> mb;
      for (std::size_t e = 0; e < cfg.epochs_per_batch; ++e) {
        Rng rng = make_substream(substream_seed(cfg.seed, 2 * k + 1), e);
        const auto order = random_permutation(batch.size(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
          mb.clear();
          const std::size_t end = std::min(order.size(), start + cfg.minibatch_size);
          for (std::size_t i = start; i < end; ++i) mb.insert(mb.end(), steps[order[i]].begin(), steps[order[i]].end());
          if (mb.empty()) continue;
          UpdateResult ur;
          switch (algo) {
            case Algo::Klq: ur = klq_minibatch_update(params, mb, pi_b, cfg, lr); break;
            case Algo::PpoClip: ur = ppo_clip_minibatch_update(params, mb, cfg, lr); break;
            case Algo::PpoPenalty: ur = ppo_penalty_minibatch_update(params, mb, snap.policy, pi_b, cfg, lr); break;
          }
          loss_sum += ur.loss;
          ++n_updates;
        }
      }
      row.loss = n_updates ? loss_sum / static_cast<double>(n_updates) : 0.0;
      report.metrics.push_back(row);
      if (writer) writer->append(row);
    }
  } catch (const std::exception& e) {
    if (writer) writer->mark_error(std::string("training aborted at batch ") +
                                   std::to_string(report.metrics.size()) + ": " + e.what());
    throw;
  }
  report.final_params = std::move(params);
  if (writer) writer->write_final(report.final_params);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline RunReport train(Algo algo, const FiniteMdp& mdp, const PolicyTable& pi_b, const TrainConfig& cfg,
                       RunWriter* writer = nullptr) {
  return train(algo, TrainingEnv::of(mdp, cfg.horizon_cap), pi_b, cfg, writer);
}

inline RunReport train(Algo algo, const TokenMdp& tm, const PolicyTable& pi_b, const TrainConfig& cfg,
                       RunWriter* writer = nullptr) {
  return train(algo, TrainingEnv::of(tm), pi_b, cfg, writer);
}

}  // namespace klq
