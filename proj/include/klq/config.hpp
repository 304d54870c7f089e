#pragma once

// Experiment configuration: strict JSON (unknown keys are errors at every
// level), environment construction and sweep expansion.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "klq/envs.hpp"
#include "klq/equivalence.hpp"
#include "klq/error.hpp"
#include "klq/learners.hpp"
#include "klq/mdp.hpp"
#include "klq/token_task.hpp"

namespace klq {

using Json = nlohmann::ordered_json;

enum class EnvKind { Bandit, RandomMdp, TokenTask, MdpFile };

inline std::string to_string(EnvKind k) {
  switch (k) {
    case EnvKind::Bandit: return "bandit";
    case EnvKind::RandomMdp: return "random_mdp";
    case EnvKind::TokenTask: return "token_task";
    case EnvKind::MdpFile: return "mdp_file";
  }
  return "?";
}

struct EnvConfig {
  EnvKind kind = EnvKind::Bandit;
  // bandit
  std::vector<double> rewards{1.0, 0.0};
  // random_mdp
  RandomMdpSpec random;
  // token_task
  std::size_t alphabet_size = 4;
  std::string target = "ABCAB";
  std::size_t max_length = 6;
  RewardKind reward_kind = RewardKind::TargetMatch;
  double reward_scale = 1.0;
  std::string reward_token;                              // prefix_count, one letter
  std::vector<std::pair<std::string, double>> reward_table;  // table
  std::vector<std::string> train_prompts{""};
  std::vector<std::string> validation_prompts;
  std::size_t state_budget = kDefaultStateBudget;
  // mdp_file
  std::string path;
  // bandit / token_task discount (random_mdp and mdp_file carry their own)
  double gamma = 1.0;
};

struct ReferenceConfig {
  ReferenceKind kind = ReferenceKind::Uniform;
  double concentration = 1.0;
  std::string corpus;  // path, bigram only
  std::uint64_t seed = 0;
};

struct VerifyConfig {
  std::string suite = "all";
  std::size_t num_mdps = 20;
};

struct EvalConfig {
  std::string policy;  // path written by train/solve
  std::size_t episodes = 1000;
  std::string prompts = "validation";  // or "train"
};

struct SweepConfig {
  std::vector<double> tau, lambda, learning_rate;
  bool empty() const { return tau.empty() && lambda.empty() && learning_rate.empty(); }
};

struct ExperimentConfig {
  Algo algo = Algo::Klq;
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  EnvConfig env;
  ReferenceConfig reference;
  TrainConfig train;
  VerifyConfig verify;
  EquivalenceConfig equivalence;
  EvalConfig eval;
  SweepConfig sweep;
};

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

namespace detail {

/// Reads keys of one JSON object and rejects any key it was not asked about.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string name(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void get(const std::string& key, double& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
    out = v.get<double>();
  }
  void get(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(name(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get(const std::string& key, bool& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(name(key) + " must be a boolean");
    out = v.get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
    out = v.get<std::string>();
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(name(key) + " must be an array of numbers");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError(name(key) + " must be an array of numbers");
      out.push_back(x.get<double>());
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(name(key) + " must be an array of strings");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_string()) throw ConfigError(name(key) + " must be an array of strings");
      out.push_back(x.get<std::string>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + name(it.key()) + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void parse_env(StrictObject& o, EnvConfig& env) {
  std::string kind = "bandit";
  o.get("type", kind);
  if (kind == "bandit") {
    env.kind = EnvKind::Bandit;
    o.get("rewards", env.rewards);
    o.get("gamma", env.gamma);
  } else if (kind == "random_mdp") {
    env.kind = EnvKind::RandomMdp;
    o.get("num_states", env.random.num_states);
    o.get("num_actions", env.random.num_actions);
    o.get("gamma", env.random.gamma);
    o.get("sparsity", env.random.sparsity);
    o.get("num_terminal", env.random.num_terminal);
    o.get("seed", env.random.seed);
  } else if (kind == "token_task") {
    env.kind = EnvKind::TokenTask;
    o.get("alphabet_size", env.alphabet_size);
    o.get("target", env.target);
    o.get("max_length", env.max_length);
    o.get("gamma", env.gamma);
    o.get("train_prompts", env.train_prompts);
    o.get("validation_prompts", env.validation_prompts);
    o.get("state_budget", env.state_budget);
    if (o.has("reward")) {
      StrictObject r(o.at("reward"), o.name("reward"));
      std::string rk = "target_match";
      r.get("kind", rk);
      env.reward_kind = reward_kind_from_string(rk);
      r.get("scale", env.reward_scale);
      r.get("token", env.reward_token);
      if (r.has("table")) {
        const Json& t = r.at("table");
        if (!t.is_object()) throw ConfigError(r.name("table") + " must map completions to scores");
        env.reward_table.clear();
        for (auto it = t.begin(); it != t.end(); ++it) {
          if (!it.value().is_number()) throw ConfigError(r.name("table") + " scores must be numbers");
          env.reward_table.emplace_back(it.key(), it.value().get<double>());
        }
      }
      r.finish();
    }
  } else if (kind == "mdp_file") {
    env.kind = EnvKind::MdpFile;
    o.get("path", env.path);
    if (env.path.empty()) throw ConfigError(o.name("path") + " is required for mdp_file");
  } else {
    throw ConfigError("unknown env type '" + kind + "'");
  }
  o.finish();
}

inline void parse_train(StrictObject& o, TrainConfig& t) {
  o.get("tau", t.tau);
  o.get("lambda", t.lambda);
  o.get("alpha", t.alpha);
  o.get("learning_rate", t.learning_rate);
  o.get("linear_decay", t.linear_decay);
  o.get("epochs_per_batch", t.epochs_per_batch);
  o.get("rollouts_per_batch", t.rollouts_per_batch);
  o.get("minibatch_size", t.minibatch_size);
  o.get("total_episodes", t.total_episodes);
  o.get("clip_eps", t.clip_eps);
  o.get("value_clip", t.value_clip);
  o.get("value_coef", t.value_coef);
  o.get("length_penalty", t.length_penalty);
  o.get("beta", t.beta);
  std::string dir = to_string(t.kl_direction);
  o.get("kl_direction", dir);
  t.kl_direction = kl_direction_from_string(dir);
  o.get("whiten_advantages", t.whiten_advantages);
  o.get("random_value_init", t.random_value_init);
  o.get("value_init_scale", t.value_init_scale);
  o.get("report_post_step_loss", t.report_post_step_loss);
  o.get("horizon_cap", t.horizon_cap);
  o.finish();
}

}  // namespace detail

/// Parses and validates; every failure is a ConfigError naming the key.
inline ExperimentConfig parse_config(const Json& j) {
  ExperimentConfig c;
  detail::StrictObject root(j, "");
  std::string algo = to_string(c.algo);
  root.get("algo", algo);
  try {
    c.algo = algo_from_string(algo);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  root.get("seed", c.seed);
  root.get("out", c.out);
  if (root.has("env")) {
    detail::StrictObject o(root.at("env"), "env");
    detail::parse_env(o, c.env);
  }
  if (root.has("reference")) {
    detail::StrictObject o(root.at("reference"), "reference");
    std::string kind = "uniform";
    o.get("kind", kind);
    c.reference.kind = reference_kind_from_string(kind);
    o.get("concentration", c.reference.concentration);
    o.get("corpus", c.reference.corpus);
    o.get("seed", c.reference.seed);
    o.finish();
  }
  if (root.has("train")) {
    detail::StrictObject o(root.at("train"), "train");
    detail::parse_train(o, c.train);
  }
  if (root.has("verify")) {
    detail::StrictObject o(root.at("verify"), "verify");
    o.get("suite", c.verify.suite);
    o.get("num_mdps", c.verify.num_mdps);
    o.finish();
  }
  if (root.has("equivalence")) {
    detail::StrictObject o(root.at("equivalence"), "equivalence");
    auto& e = c.equivalence;
    o.get("alphas", e.alphas);
    o.get("lambdas", e.lambdas);
    o.get("num_mdps", e.num_mdps);
    o.get("num_states", e.num_states);
    o.get("num_actions", e.num_actions);
    o.get("gamma", e.gamma);
    o.get("tau", e.tau);
    o.get("iterations", e.iterations);
    o.get("dominance_samples", e.dominance_samples);
    if (o.has("corrupt_v_iteration")) {
      std::size_t k = 0;
      o.get("corrupt_v_iteration", k);
      e.corrupt_v_iteration = k;
    }
    o.finish();
  }
  if (root.has("eval")) {
    detail::StrictObject o(root.at("eval"), "eval");
    o.get("policy", c.eval.policy);
    o.get("episodes", c.eval.episodes);
    o.get("prompts", c.eval.prompts);
    o.finish();
  }
  if (root.has("sweep")) {
    detail::StrictObject o(root.at("sweep"), "sweep");
    o.get("tau", c.sweep.tau);
    o.get("lambda", c.sweep.lambda);
    o.get("learning_rate", c.sweep.learning_rate);
    o.finish();
  }
  root.finish();

  c.train.seed = c.seed;
  c.train.gamma = c.env.kind == EnvKind::RandomMdp ? c.env.random.gamma : c.env.gamma;
  c.train.validate();
  if (c.env.kind == EnvKind::Bandit && c.env.rewards.empty()) throw ConfigError("env.rewards must not be empty");
  if (c.verify.suite != "all" && c.verify.suite != "operators" && c.verify.suite != "estimators" &&
      c.verify.suite != "gradients")
    throw ConfigError("verify.suite must be one of operators, estimators, gradients, all");
  if (c.eval.prompts != "validation" && c.eval.prompts != "train")
    throw ConfigError("eval.prompts must be 'train' or 'validation'");
  if (c.eval.episodes == 0) throw ConfigError("eval.episodes must be >= 1");
  for (double a : c.equivalence.alphas)
    if (!(a > 0.0 && a <= 1.0)) throw ConfigError("equivalence.alphas must lie in (0, 1]");
  for (double l : c.equivalence.lambdas)
    if (!(l >= 0.0 && l < 1.0)) throw ConfigError("equivalence.lambdas must lie in [0, 1)");
  if (!(c.equivalence.gamma >= 0.0 && c.equivalence.gamma < 1.0))
    throw ConfigError("equivalence.gamma must lie in [0, 1)");
  if (!(c.equivalence.tau > 0.0)) throw ConfigError("equivalence.tau must be > 0");
  for (double x : c.sweep.tau)
    if (!(x > 0.0)) throw ConfigError("sweep.tau values must be > 0");
  for (double x : c.sweep.lambda)
    if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("sweep.lambda values must lie in [0, 1]");
  for (double x : c.sweep.learning_rate)
    if (!(x > 0.0)) throw ConfigError("sweep.learning_rate values must be > 0");
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig c = parse_config_text(ss.str());
  // Input data paths are relative to the config file; outputs stay relative to the cwd.
  const auto base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&c.reference.corpus, &c.env.path})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

/// Full, explicit form of a config; parse_config(to_json(c)) reproduces c.
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["algo"] = to_string(c.algo);
  j["seed"] = c.seed;
  j["out"] = c.out;
  Json env;
  env["type"] = to_string(c.env.kind);
  switch (c.env.kind) {
    case EnvKind::Bandit:
      env["rewards"] = c.env.rewards;
      env["gamma"] = c.env.gamma;
      break;
    case EnvKind::RandomMdp:
      env["num_states"] = c.env.random.num_states;
      env["num_actions"] = c.env.random.num_actions;
      env["gamma"] = c.env.random.gamma;
      env["sparsity"] = c.env.random.sparsity;
      env["num_terminal"] = c.env.random.num_terminal;
      env["seed"] = c.env.random.seed;
      break;
    case EnvKind::TokenTask: {
      env["alphabet_size"] = c.env.alphabet_size;
      env["target"] = c.env.target;
      env["max_length"] = c.env.max_length;
      env["gamma"] = c.env.gamma;
      env["train_prompts"] = c.env.train_prompts;
      env["validation_prompts"] = c.env.validation_prompts;
      env["state_budget"] = c.env.state_budget;
      Json r;
      r["kind"] = to_string(c.env.reward_kind);
      r["scale"] = c.env.reward_scale;
      r["token"] = c.env.reward_token;
      Json table = Json::object();
      for (const auto& [k, v] : c.env.reward_table) table[k] = v;
      r["table"] = table;
      env["reward"] = r;
      break;
    }
    case EnvKind::MdpFile: env["path"] = c.env.path; break;
  }
  j["env"] = env;
  const char* ref_kinds[] = {"uniform", "dirichlet_random", "bigram"};
  j["reference"] = {{"kind", ref_kinds[static_cast<int>(c.reference.kind)]},
                    {"concentration", c.reference.concentration},
                    {"corpus", c.reference.corpus},
                    {"seed", c.reference.seed}};
  const TrainConfig& t = c.train;
  j["train"] = {{"tau", t.tau},
                {"lambda", t.lambda},
                {"alpha", t.alpha},
                {"learning_rate", t.learning_rate},
                {"linear_decay", t.linear_decay},
                {"epochs_per_batch", t.epochs_per_batch},
                {"rollouts_per_batch", t.rollouts_per_batch},
                {"minibatch_size", t.minibatch_size},
                {"total_episodes", t.total_episodes},
                {"clip_eps", t.clip_eps},
                {"value_clip", t.value_clip},
                {"value_coef", t.value_coef},
                {"length_penalty", t.length_penalty},
                {"beta", t.beta},
                {"kl_direction", to_string(t.kl_direction)},
                {"whiten_advantages", t.whiten_advantages},
                {"random_value_init", t.random_value_init},
                {"value_init_scale", t.value_init_scale},
                {"report_post_step_loss", t.report_post_step_loss},
                {"horizon_cap", t.horizon_cap}};
  j["verify"] = {{"suite", c.verify.suite}, {"num_mdps", c.verify.num_mdps}};
  const auto& e = c.equivalence;
  Json eq = {{"alphas", e.alphas},
             {"lambdas", e.lambdas},
             {"num_mdps", e.num_mdps},
             {"num_states", e.num_states},
             {"num_actions", e.num_actions},
             {"gamma", e.gamma},
             {"tau", e.tau},
             {"iterations", e.iterations},
             {"dominance_samples", e.dominance_samples}};
  if (e.corrupt_v_iteration) eq["corrupt_v_iteration"] = *e.corrupt_v_iteration;
  j["equivalence"] = eq;
  j["eval"] = {{"policy", c.eval.policy}, {"episodes", c.eval.episodes}, {"prompts", c.eval.prompts}};
  if (!c.sweep.empty())
    j["sweep"] = {{"tau", c.sweep.tau}, {"lambda", c.sweep.lambda}, {"learning_rate", c.sweep.learning_rate}};
  return j;
}

/// Shortest round-tripping decimal, used in sweep directory names.
inline std::string short_number(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

struct SweepChild {
  std::string name;  // e.g. "tau=0.05_lambda=0.95"; empty without a sweep
  ExperimentConfig config;
};

/// Cartesian product over the sweep axes (tau outermost). Children run in
/// <out>/<name>; the sweep block itself is dropped from the children.
inline std::vector<SweepChild> expand_sweep(const ExperimentConfig& base) {
  if (base.sweep.empty()) return {{"", base}};
  const std::vector<double> taus = base.sweep.tau.empty() ? std::vector<double>{base.train.tau} : base.sweep.tau;
  const std::vector<double> lams =
      base.sweep.lambda.empty() ? std::vector<double>{base.train.lambda} : base.sweep.lambda;
  const std::vector<double> lrs =
      base.sweep.learning_rate.empty() ? std::vector<double>{base.train.learning_rate} : base.sweep.learning_rate;
  std::vector<SweepChild> out;
  for (double tau : taus)
    for (double lam : lams)
      for (double lr : lrs) {
        SweepChild ch;
        ch.config = base;
        ch.config.sweep = {};
        ch.config.train.tau = tau;
        ch.config.train.lambda = lam;
        ch.config.train.learning_rate = lr;
        std::string name;
        auto add = [&](const char* key, double v, bool swept) {
          if (!swept) return;
          if (!name.empty()) name += "_";
          name += std::string(key) + "=" + short_number(v);
        };
        add("tau", tau, !base.sweep.tau.empty());
        add("lambda", lam, !base.sweep.lambda.empty());
        add("lr", lr, !base.sweep.learning_rate.empty());
        ch.name = name;
        ch.config.out = base.out + "/" + name;
        ch.config.train.validate();
        out.push_back(std::move(ch));
      }
  return out;
}

/// The environment a config describes, with its reference policy.
struct BuiltEnv {
  FiniteMdp mdp;                   // training distribution
  std::optional<TokenMdp> token;   // set for token tasks (token->mdp == mdp)
  std::optional<FiniteMdp> validation;  // token tasks with validation prompts
  PolicyTable pi_b;

  TrainingEnv training(std::size_t horizon_cap) const {
    return token ? TrainingEnv::of(*token) : TrainingEnv::of(mdp, horizon_cap);
  }
};

namespace detail {

inline std::vector<Tokens> parse_prompts(const std::vector<std::string>& prompts, std::size_t alphabet) {
  std::vector<Tokens> out;
  for (const auto& p : prompts) out.push_back(parse_token_string(p, alphabet));
  return out;
}

}  // namespace detail

inline BuiltEnv build_env(const ExperimentConfig& c) {
  BuiltEnv out;
  const EnvConfig& e = c.env;
  switch (e.kind) {
    case EnvKind::Bandit: out.mdp = make_bandit_mdp(e.rewards, e.gamma); break;
    case EnvKind::RandomMdp: out.mdp = build_random_mdp(e.random); break;
    case EnvKind::MdpFile: {
      std::ifstream is(e.path);
      if (!is) throw ConfigError("cannot open MDP file " + e.path);
      out.mdp = read_mdp(is);
      break;
    }
    case EnvKind::TokenTask: {
      const std::size_t N = e.alphabet_size;
      auto train_prompts = detail::parse_prompts(e.train_prompts, N);
      auto val_prompts = detail::parse_prompts(e.validation_prompts, N);
      if (train_prompts.empty()) throw ConfigError("env.train_prompts must not be empty");
      std::vector<Tokens> all = train_prompts;
      all.insert(all.end(), val_prompts.begin(), val_prompts.end());
      TargetStringTask ts = build_target_string_task(N, parse_token_string(e.target, N), all, e.max_length,
                                                     c.train.length_penalty, e.reward_kind, e.reward_scale);
      if (e.reward_kind == RewardKind::PrefixCount && !e.reward_token.empty()) {
        const Tokens t = parse_token_string(e.reward_token, N);
        if (t.size() != 1) throw ConfigError("env.reward.token must be a single token");
        ts.reward.token = t.front();
      }
      for (const auto& [k, v] : e.reward_table) ts.reward.table[parse_token_string(k, N)] = v;
      std::vector<std::size_t> idx(all.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::vector<double> w(all.size(), 0.0);
      std::fill(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(train_prompts.size()), 1.0);
      TokenMdp tm = expand_task_forest(ts.task, make_scorer(ts.reward), idx, w, e.gamma, e.state_budget);
      if (!val_prompts.empty()) {
        Vector init = Vector::Zero(static_cast<Eigen::Index>(tm.mdp.num_states()));
        for (std::size_t i = train_prompts.size(); i < all.size(); ++i)
          init(static_cast<Eigen::Index>(tm.roots[i])) = 1.0 / static_cast<double>(val_prompts.size());
        out.validation = tm.mdp.with_initial(init);
      }
      out.mdp = tm.mdp;
      out.token = std::move(tm);
      break;
    }
  }
  ReferencePolicySpec ref{c.reference.kind, c.reference.concentration, {}, c.reference.seed};
  if (c.reference.kind == ReferenceKind::Bigram) {
    if (!out.token) throw ConfigError("bigram reference policy needs a token task");
    if (c.reference.corpus.empty()) throw ConfigError("bigram reference policy needs reference.corpus");
    ref.corpus = load_corpus(c.reference.corpus, e.alphabet_size);
  }
  out.pi_b = out.token ? build_reference_policy(ref, *out.token) : build_reference_policy(ref, out.mdp);
  return out;
}

}  // namespace klq
