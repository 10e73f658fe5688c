#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "qcplan/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"qcplan: margin losses, magnitude planning and their numerical checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", qcplan::kToolVersion);

  double l_a = 0.0, u_a = 0.0;
  auto* solve = app.add_subcommand("solve-k", "balance k for magnitude bounds and print the z* anchors");
  solve->add_option("--la", l_a, "lower magnitude bound")->required();
  solve->add_option("--ua", u_a, "upper magnitude bound")->required();

  std::string grad_config;
  std::size_t instances = 100;
  bool inject_fault = false;
  auto* grad = app.add_subcommand("check-grad", "finite-difference check of every analytic gradient");
  grad->add_option("--config", grad_config, "experiment config (JSON)")->required();
  grad->add_option("--instances", instances, "random instances per loss")->capture_default_str();
  // perturbs the analytic gradient so the failure path can be exercised
  grad->add_flag("--inject-fault", inject_fault)->group("");

  std::string plan_config;
  std::string plan_out;
  auto* plan = app.add_subcommand("plan", "train on synthetic data and write the run files");
  plan->add_option("--config", plan_config, "experiment config (JSON)")->required();
  plan->add_option("--output-dir", plan_out, "overrides output_dir from the config");

  std::string run_dir, emit, pair;
  auto* analyze = app.add_subcommand("analyze", "projection and verification metrics for a finished run");
  analyze->add_option("--run", run_dir, "run directory")->required();
  analyze->add_option("--emit", emit, "comma list of projection,metrics")->required();
  analyze->add_option("--pair", pair, "class pair for the projection plane (default 0,1)");

  std::string sweep_config, param, values, sweep_out;
  auto* sweep = app.add_subcommand("sweep", "one run per value of a numeric config field");
  sweep->add_option("--config", sweep_config, "experiment config (JSON)")->required();
  sweep->add_option("--param", param, "dotted path, e.g. loss.s")->required();
  sweep->add_option("--values", values, "comma list of values")->required();
  sweep->add_option("--output-dir", sweep_out, "overrides output_dir from the config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : qcplan::kExitUsage;
  }

  auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::string>(s); };
  if (*solve) return qcplan::cmd_solve_k(l_a, u_a, std::cout, std::cerr);
  if (*grad) return qcplan::cmd_check_grad(grad_config, instances, inject_fault, std::cout, std::cerr);
  if (*plan) return qcplan::cmd_plan(plan_config, opt(plan_out), std::cout, std::cerr);
  if (*analyze) return qcplan::cmd_analyze(run_dir, emit, opt(pair), std::cout, std::cerr);
  return qcplan::cmd_sweep(sweep_config, param, values, opt(sweep_out), std::cout, std::cerr);
}
