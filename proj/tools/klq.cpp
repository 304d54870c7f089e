// klq: train / solve / verify / equivalence / eval on finite token-level MDPs.
//
// Exit codes: 0 success, 1 a check or report failed, 2 bad config or usage,
// 3 runtime failure (training diverged, budget exceeded, ...).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "klq/config.hpp"
#include "klq/equivalence.hpp"
#include "klq/learners.hpp"
#include "klq/soft_rl.hpp"
#include "klq/table_io.hpp"
#include "klq/verify.hpp"

namespace fs = std::filesystem;
using namespace klq;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory (overrides the config)");
  cmd->add_flag("--quiet", c.quiet, "only errors on stderr");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? parse_config(Json::object()) : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

void write_snapshot(const fs::path& dir, const ExperimentConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream os(dir / "config.json");
  os << to_json(cfg).dump(2) << "\n";
}

int cmd_train(const Common& c) {
  const ExperimentConfig base = resolve(c);
  for (const auto& child : expand_sweep(base)) {
    const ExperimentConfig& cfg = child.config;
    const BuiltEnv env = build_env(cfg);
    write_snapshot(cfg.out, cfg);
    RunWriter writer(cfg.out);
    const RunReport rep = train(cfg.algo, env.training(cfg.train.horizon_cap), env.pi_b, cfg.train, &writer);
    if (!c.quiet) {
      const auto& last = rep.metrics.back();
      std::cout << std::setprecision(6) << to_string(cfg.algo) << (child.name.empty() ? "" : " " + child.name)
                << ": " << rep.metrics.size() << " batches, last mean_score " << last.mean_score << ", mean_kl "
                << last.mean_kl << ", rlhf_reward " << last.rlhf_reward << " -> " << cfg.out << "\n";
    }
  }
  return 0;
}

int cmd_solve(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const BuiltEnv env = build_env(cfg);
  const SoftRlParams params{cfg.train.tau, env.mdp.gamma()};
  const auto sol = solve_soft_optimal(env.mdp, env.pi_b, params);
  const fs::path dir = cfg.out;
  write_snapshot(dir, cfg);
  save_table((dir / "q_star.txt").string(), sol.q, [](std::ostream& os, const QTable& t) { write_q(os, t); });
  save_table((dir / "policy_star.txt").string(), sol.policy,
             [](std::ostream& os, const PolicyTable& t) { write_policy(os, t); });
  save_table((dir / "v_star.txt").string(), sol.value, [](std::ostream& os, const VTable& t) { write_v(os, t); });
  const double v_init = env.mdp.initial_distribution().dot(sol.value.values);
  std::ostringstream summary;
  summary << std::setprecision(17) << "states " << env.mdp.num_states() << "\nactions " << env.mdp.num_actions()
          << "\ntau " << params.tau << "\ngamma " << params.gamma << "\nv_star_initial " << v_init
          << "\niterations " << sol.iterations << "\nresidual " << sol.residual << "\n";
  std::ofstream(dir / "solve.txt") << summary.str();
  if (!c.quiet)
    std::cout << std::setprecision(10) << "V*(initial) = " << v_init << " (" << env.mdp.num_states()
              << " states) -> " << dir.string() << "\n";
  return 0;
}

int cmd_verify(const Common& c, std::string suite) {
  const ExperimentConfig cfg = resolve(c);
  if (suite.empty()) suite = cfg.verify.suite;
  std::ostringstream report;
  bool ok = true;
  for (const auto& rep : run_verify(suite, cfg.verify.num_mdps)) {
    report << "[" << rep.suite << "]\n";
    for (const auto& chk : rep.checks) report << "  " << format_check(chk) << "\n";
    ok = ok && rep.passed();
  }
  report << (ok ? "ALL PASS" : "FAILURES") << "\n";
  if (!c.quiet) std::cout << report.str();
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "verify_report.txt") << report.str();
  }
  return ok ? 0 : 1;
}

int cmd_equivalence(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path dir = cfg.out;
  write_snapshot(dir, cfg);
  const auto grid = run_equivalence_grid(cfg.equivalence, cfg.seed);
  std::ofstream summary(dir / "equivalence_summary.csv");
  summary << "mdp,alpha,lambda,max_discrepancy,max_ascent_tv,dominance,final_residual,envelope_holds,"
             "worst_envelope_ratio,first_bad_iteration,passed\n"
          << std::setprecision(17);
  bool ok = true;
  for (const auto& e : grid) {
    const auto& r = e.report;
    std::ostringstream stem;
    stem << "mdp" << e.mdp_index << "_alpha" << short_number(r.alpha) << "_lambda" << short_number(r.lambda);
    {
      std::ofstream txt(dir / (stem.str() + ".txt"));
      write_equivalence_report(txt, r);
      std::ofstream csv(dir / (stem.str() + ".csv"));
      write_equivalence_csv(csv, r);
    }
    double md = 0.0, mt = 0.0;
    for (const auto& it : r.per_iteration) {
      md = std::max(md, it.discrepancy);
      mt = std::max(mt, it.ascent_tv);
    }
    summary << e.mdp_index << ',' << short_number(r.alpha) << ',' << short_number(r.lambda) << ',' << md << ',' << mt << ','
            << (r.dominance_ok ? 1 : 0) << ',' << r.final_residual << ',' << (r.envelope_holds ? 1 : 0) << ','
            << r.worst_envelope_ratio << ',' << (r.first_bad_iteration ? std::to_string(*r.first_bad_iteration) : "")
            << ',' << (r.passed ? 1 : 0) << '\n';
    if (!c.quiet) {
      std::cout << std::setprecision(3) << (r.passed ? "PASS " : "FAIL ") << stem.str() << "  discrepancy " << md
                << "  ascent TV " << mt << "  envelope " << (r.envelope_holds ? "holds" : "violated");
      if (r.first_bad_iteration) std::cout << "  first bad iteration " << *r.first_bad_iteration;
      std::cout << "\n";
    }
    ok = ok && r.passed;
  }
  if (!c.quiet) std::cout << (ok ? "ALL PASS" : "FAILURES") << " (" << grid.size() << " runs) -> " << dir.string() << "\n";
  return ok ? 0 : 1;
}

int cmd_eval(const Common& c, std::string policy_path) {
  const ExperimentConfig cfg = resolve(c);
  if (policy_path.empty()) policy_path = cfg.eval.policy;
  if (policy_path.empty()) throw ConfigError("eval needs a policy (--policy or eval.policy)");
  if (!fs::exists(policy_path)) throw Error("policy file not found: " + policy_path);
  const BuiltEnv env = build_env(cfg);
  const PolicyTable pi = load_policy(policy_path);
  if (pi.num_states() != env.mdp.num_states() || pi.num_actions() != env.mdp.num_actions())
    throw ConfigError("policy shape does not match the configured environment");

  std::optional<TokenMdp> held_out;
  const bool use_validation = cfg.eval.prompts == "validation" && env.validation;
  if (env.token && use_validation) {
    held_out = *env.token;
    held_out->mdp = *env.validation;
  }
  const TrainingEnv tenv = held_out ? TrainingEnv::of(*held_out) : env.training(cfg.train.horizon_cap);
  const auto batch = tenv.rollout(pi, substream_seed(cfg.seed, 0xe7a1), cfg.eval.episodes);
  const MetricsRow m = detail::batch_metrics(tenv, batch, pi, env.pi_b, cfg.train.tau);

  const fs::path dir = cfg.out;
  write_snapshot(dir, cfg);
  std::ofstream os(dir / "eval.csv");
  os << "prompts,episodes,mean_score,mean_kl,rlhf_reward\n"
     << std::setprecision(17) << (use_validation ? "validation" : "train") << ',' << cfg.eval.episodes << ','
     << m.mean_score << ',' << m.mean_kl << ',' << m.rlhf_reward << '\n';
  if (!c.quiet)
    std::cout << std::setprecision(6) << "mean_score " << m.mean_score << "  mean_kl " << m.mean_kl
              << "  rlhf_reward " << m.rlhf_reward << "  (" << cfg.eval.episodes << " episodes, "
              << (use_validation ? "validation" : "train") << " prompts)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KL-regularised Q-learning / PPO lab on finite token MDPs"};
  app.require_subcommand(1);
  Common common;
  std::string suite, policy;
  auto* train_cmd = app.add_subcommand("train", "run KLQ or PPO and write metrics.csv");
  auto* solve_cmd = app.add_subcommand("solve", "exact soft-optimal Q*, pi*, V*");
  auto* verify_cmd = app.add_subcommand("verify", "property suites");
  auto* eq_cmd = app.add_subcommand("equivalence", "Q-space vs (pi, V)-space updates over a grid");
  auto* eval_cmd = app.add_subcommand("eval", "score a stored policy");
  for (auto* cmd : {train_cmd, solve_cmd, verify_cmd, eq_cmd, eval_cmd}) add_common(cmd, common);
  verify_cmd->add_option("--suite", suite, "operators | estimators | gradients | all");
  eval_cmd->add_option("--policy", policy, "policy table written by train or solve");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*solve_cmd) return cmd_solve(common);
    if (*verify_cmd) return cmd_verify(common, suite);
    if (*eq_cmd) return cmd_equivalence(common);
    if (*eval_cmd) return cmd_eval(common, policy);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
