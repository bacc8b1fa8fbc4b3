#include "lightattn/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{"light transformer experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int seed_override = -1;
  int threads = 0;
  bool corrupt_backward = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--out", out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", seed_override, "seed override");
    cmd->add_option("--threads", threads, "worker threads (0 = hardware)");
  };

  CLI::App* train = app.add_subcommand("train", "train one model, write checkpoint + metrics");
  CLI::App* curve = app.add_subcommand("curve", "learning-curve sweep over folds and variants");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every op");
  CLI::App* params = app.add_subcommand("params", "parameter-count table per variant");
  CLI::App* bench = app.add_subcommand("bench", "score-tensor memory and timing sweep");
  for (auto* cmd : {train, curve, gradcheck, params, bench}) add_common(cmd);
  gradcheck
      ->add_flag("--self-test-corrupt", corrupt_backward,
                 "deliberately corrupt one backward rule (negative control)")
      ->group("");

  CLI11_PARSE(app, argc, argv);

  lightattn::exp::CliOptions opts;
  opts.config_path = config_path;
  opts.out_dir = out_dir;
  opts.seed_override = seed_override;
  opts.threads = threads;
  opts.corrupt_backward = corrupt_backward;

  try {
    if (train->parsed()) return lightattn::exp::cmd_train(opts);
    if (curve->parsed()) return lightattn::exp::cmd_learning_curve(opts);
    if (gradcheck->parsed()) return lightattn::exp::cmd_gradcheck(opts);
    if (params->parsed()) return lightattn::exp::cmd_params(opts);
    if (bench->parsed()) return lightattn::exp::cmd_bench(opts);
  } catch (const lightattn::exp::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
