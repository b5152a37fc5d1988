#include "ibdr/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate particle ensembles with interactive distributionally robust updates"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, data, in_data, ood_data, thresholds = "0:1:0.05", param, values;
  std::uint64_t seed = 0;
  double tol = 1e-4;

  auto* train = app.add_subcommand("train", "Train an ensemble and write metrics.csv, checkpoint/ and resolved_config.json");
  train->add_option("--config", config, "JSON run configuration")->required();
  train->add_option("--out", out, "Run directory (overrides output.dir)");
  auto* train_seed = train->add_option("--seed", seed, "Override train.seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a JSON report");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", data, "Data spec, e.g. blobs:n=800,classes=8,dim=8,part=test")->required();
  eval->add_option("--out", out, "Output JSON path")->required();

  auto* ood = app.add_subcommand("ood-scan", "Fraction flagged as out of distribution per confidence threshold");
  ood->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ood->add_option("--in-data", in_data, "In-distribution data spec")->required();
  ood->add_option("--ood-data", ood_data, "Shifted data spec")->required();
  ood->add_option("--thresholds", thresholds, "Grid as start:stop:step")->capture_default_str();
  ood->add_option("--out", out, "Output CSV path")->required();

  auto* sweep = app.add_subcommand("sweep", "Train once per value of alpha, rho or K and tabulate test metrics");
  sweep->add_option("--config", config, "JSON run configuration")->required();
  sweep->add_option("--param", param, "alpha, rho or K")->required();
  auto* sweep_values = sweep->add_option("--values", values, "Comma list; defaults depend on --param");
  sweep->add_option("--out", out, "Output CSV path")->required();

  auto* grad = app.add_subcommand("grad-check", "Compare tape gradients with central finite differences");
  grad->add_option("--seed", seed, "Seed for the check inputs");
  grad->add_option("--tol", tol, "Largest accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ibdr::exit_code::kConfig;
  }

  if (train->parsed()) {
    std::optional<std::uint64_t> seed_override;
    if (train_seed->count() > 0) seed_override = seed;
    return ibdr::cmd_train(config, out, seed_override, std::cerr);
  }
  if (eval->parsed()) return ibdr::cmd_eval(checkpoint, data, out, std::cerr);
  if (ood->parsed()) return ibdr::cmd_ood_scan(checkpoint, in_data, ood_data, thresholds, out, std::cerr);
  if (sweep->parsed()) {
    std::optional<std::string> v;
    if (sweep_values->count() > 0) v = values;
    return ibdr::cmd_sweep(config, param, v, out, std::cerr);
  }
  return ibdr::cmd_grad_check(seed, tol, std::cout);
}
