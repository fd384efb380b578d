#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bifair/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Group-fair training of a projector over frozen semantic item embeddings"};
  app.require_subcommand(1, 1);

  std::string config;
  std::vector<std::string> overrides;
  for (const char* name : {"synth", "prep", "train", "eval", "compare"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", config, "JSON run config")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override, e.g. train.inner_lr=0.01 (repeatable)");
  }
  app.get_subcommand("synth")->description("generate a synthetic interaction log, metadata and embeddings");
  app.get_subcommand("prep")->description("filter and split raw interactions into a dataset directory");
  app.get_subcommand("train")->description("train a model and write a checkpoint with its history");
  app.get_subcommand("eval")->description("evaluate a checkpoint and write report.json/report.csv");
  app.get_subcommand("compare")->description("train and evaluate every method over a seed list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return bifair::run_command(app.get_subcommands().front()->get_name(), config, overrides);
}
