#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifair/bilevel.hpp"
#include "bifair/dataio.hpp"
#include "bifair/evalmetrics.hpp"
#include "bifair/synthetic.hpp"

namespace bifair {

struct SynthSection {
  SyntheticConfig generator;  // generator.seed defaults to the top-level seed
  // Per-coordinate embedding noise by group of `noise_grouping`; groups are
  // matched to scales in ascending label order.
  std::vector<double> noise_scales{0.05, 0.2, 0.4, 0.6};
  std::string noise_grouping = "genre";
};

struct DataSection {
  std::filesystem::path interactions;  // default <workdir>/raw/interactions.csv
  std::filesystem::path metadata;      // default <workdir>/raw/metadata.csv
  std::filesystem::path embeddings;    // default <workdir>/raw/embeddings.bin
  std::filesystem::path dataset_dir;   // default <workdir>/dataset
  char delimiter = ',';
  bool normalize_embeddings = true;
};

struct GroupsSection {
  std::string train = "genre";
  std::vector<std::string> eval{"popularity", "genre"};
};

struct EvalSection {
  EvalOptions options;
  EvalSplit split = EvalSplit::Test;
  std::filesystem::path checkpoint;  // default <workdir>/checkpoint
  std::filesystem::path output_dir;  // default <workdir>/eval
};

struct CompareSection {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> methods{"plain", "reweight", "groupdro", "bifair"};
  // Train one model per evaluated grouping, each grouping's columns taken
  // from the model trained on it. Otherwise train once on groups.train.
  bool per_grouping = true;
  std::filesystem::path output_dir;  // default <workdir>/compare
};

struct RunConfig {
  nlohmann::json input;  // as read, with --set overrides applied
  std::filesystem::path workdir = "run";
  std::uint64_t seed = 0;
  SynthSection synth;
  DataSection data;
  PreprocessConfig preprocess;  // preprocess.seed defaults to derive_seed(seed, preprocess)
  GroupsSection groups;
  TrainConfig train;  // train.seed defaults to the top-level seed
  EvalSection eval;
  CompareSection compare;

  void validate() const;
};

// Parses a JSON document into a RunConfig; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
// "a.b.c=value"; value is parsed as JSON and falls back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

nlohmann::ordered_json resolved_json(const RunConfig& cfg);
// Input config with every path field made absolute.
nlohmann::json echo_json(const RunConfig& cfg);

// Group assignment by name: "popularity" or an item metadata attribute.
NamedGrouping build_grouping(const std::string& name, const Dataset& ds, const RunConfig& cfg);

struct CompareCell {
  std::string method;
  std::uint64_t seed = 0;
  std::string train_grouping;
  nlohmann::ordered_json report;
};

struct CompareResult {
  std::vector<CompareCell> cells;
  // method -> column -> median over seeds
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, double>>>> table;
};

// Commands. Each writes its artifacts plus config.echo.json,
// config.resolved.json and timing.json into its output directory.
void run_synth(const RunConfig& cfg);
void run_prep(const RunConfig& cfg);
TrainedModel run_train(const RunConfig& cfg);
nlohmann::ordered_json run_eval(const RunConfig& cfg);
CompareResult run_compare(const RunConfig& cfg);

// Dispatches by name and returns the process exit status. Errors are written
// to stderr as a JSON object; ConfigError maps to 2, other failures to 1.
int run_command(const std::string& command, const std::filesystem::path& config_path,
                const std::vector<std::string>& overrides);

TrainConfig method_config(TrainConfig cfg, const std::string& method);

}  // namespace bifair
