#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "lrdg/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Two-stage domain generalization: training, evaluation and divergence analysis"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

  lrdg::RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "Run the leave-one-domain-out protocol described by a config");
  run_cmd->add_option("config", run.config, "YAML config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--set", run.overrides, "Override a config value, e.g. --set train.epochs_invariant=5");

  lrdg::PadOptions pad;
  auto* pad_cmd = app.add_subcommand("pad", "PAD report and scatter plot for baseline vs LRDG checkpoints");
  pad_cmd->add_option("config", pad.config, "YAML config file")->required()->check(CLI::ExistingFile);
  pad_cmd->add_option("--set", pad.overrides, "Override a config value");
  pad_cmd->add_option("--target", pad.target, "Target domain name")->required();
  pad_cmd->add_option("--baseline", pad.baseline, "Baseline classifier checkpoint")->required()->check(CLI::ExistingFile);
  pad_cmd->add_option("--mapper", pad.mapper, "Mapper checkpoint")->required()->check(CLI::ExistingFile);
  pad_cmd->add_option("--invariant", pad.invariant, "Domain-invariant classifier checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  pad_cmd->add_option("-o,--output", pad.output, "Output directory");

  lrdg::InspectOptions inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Image grid of x and M(x) with change statistics");
  inspect_cmd->add_option("--mapper", inspect.mapper, "Mapper checkpoint")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--images", inspect.images, "Image file or directory")->check(CLI::ExistingPath);
  inspect_cmd->add_option("--config", inspect.config, "Config whose dataset supplies the images")
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--set", inspect.overrides, "Override a config value");
  inspect_cmd->add_option("--domain", inspect.domain, "Domain to draw images from (with --config)");
  inspect_cmd->add_option("-n,--count", inspect.count, "Images in the grid")->capture_default_str()->check(CLI::PositiveNumber);
  inspect_cmd->add_option("-o,--output", inspect.output, "PNG path (a .json sidecar is written next to it)");

  lrdg::SynthGenOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-gen", "Export the synthetic benchmark as an image folder");
  synth_cmd->add_option("config", synth.config, "YAML config file")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--set", synth.overrides, "Override a config value");
  synth_cmd->add_option("-o,--output", synth.output, "Output directory");

  lrdg::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on one domain");
  eval_cmd->add_option("config", eval.config, "YAML config file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--set", eval.overrides, "Override a config value");
  eval_cmd->add_option("--classifier", eval.classifier, "Classifier checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--mapper", eval.mapper, "Mapper checkpoint: evaluate F(M(x))")->check(CLI::ExistingFile);
  eval_cmd->add_option("--domain", eval.domain, "Domain name")->required();
  eval.split = "all";
  eval_cmd->add_option("--split", eval.split, "train, val, test or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*run_cmd) return lrdg::cmd_run(run);
    if (*pad_cmd) return lrdg::cmd_pad(pad);
    if (*inspect_cmd) return lrdg::cmd_inspect(inspect);
    if (*synth_cmd) return lrdg::cmd_synth_gen(synth);
    if (*eval_cmd) return lrdg::cmd_eval(eval);
  } catch (const lrdg::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
