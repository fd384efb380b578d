#include <doctest.h>

#include <fstream>
#include <sstream>

#include "bifair/report.hpp"
#include "bifair/runner.hpp"
#include "fixtures.hpp"

using namespace bifair;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kDesk = fs::path(BIFAIR_SOURCE_DIR) / "configs" / "desk.json";

RunConfig desk(const std::string& name, std::vector<std::string> extra = {}) {
  const auto dir = fixture::scratch_dir(name);
  extra.insert(extra.begin(), "workdir=" + dir.string());
  return load_run_config(kDesk, extra);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("overrides") {
  json j = {{"train", {{"inner_lr", 0.1}}}};
  apply_override(j, "train.inner_lr=0.5");
  apply_override(j, "eval.ks=[5,10]");
  apply_override(j, "groups.train=popularity");
  apply_override(j, "compare.per_grouping=false");
  CHECK(j["train"]["inner_lr"] == 0.5);
  CHECK(j["eval"]["ks"] == json::array({5, 10}));
  CHECK(j["groups"]["train"] == "popularity");
  CHECK(j["compare"]["per_grouping"] == false);
  CHECK_THROWS_AS(apply_override(j, "no_equals"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "train..x=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "train.inner_lr.x=1"), ConfigError);
}

TEST_CASE("strict config parsing") {
  CHECK(config_error({{"bogus", 1}}).find("unknown top-level option 'bogus'") != std::string::npos);
  CHECK(config_error({{"train", {{"lr", 1}}}}).find("unknown train option 'lr'") != std::string::npos);
  CHECK(config_error({{"synth", {{"users", 1}}}}).find("unknown synth option 'users'") != std::string::npos);
  CHECK(config_error({{"train", {{"inner_lr", 0.0}}}}).find("inner_lr must be > 0") != std::string::npos);
  CHECK(config_error({{"eval", {{"epsilons", {0.0}}}}}).find("epsilons") != std::string::npos);
  CHECK(config_error({{"compare", {{"methods", {"magic"}}}}}).find("unknown compare method 'magic'") !=
        std::string::npos);
  CHECK(config_error({{"seed", "x"}}).find("seed") != std::string::npos);
  CHECK(config_error({{"description", "ok"}}).empty());
}

TEST_CASE("seed defaults") {
  const auto c = run_config_from_json({{"seed", 11}});
  CHECK(c.synth.generator.seed == 11);
  CHECK(c.train.seed == 11);
  CHECK(c.preprocess.seed == derive_seed(11, seed_role::kPreprocess));
  const auto d = run_config_from_json({{"seed", 11}, {"train", {{"seed", 4}}}});
  CHECK(d.train.seed == 4);
}

TEST_CASE("resolved config round trip") {
  const auto c = desk("resolved");
  const auto r = resolved_json(c);
  CHECK(fs::path(r["workdir"].get<std::string>()).is_absolute());
  const auto again = run_config_from_json(json::parse(r.dump()));
  CHECK(resolved_json(again).dump() == r.dump());
  const auto echo = echo_json(c);
  CHECK(echo["description"] == "tiny smoke configuration");
  CHECK(fs::path(echo["workdir"].get<std::string>()).is_absolute());
}

TEST_CASE("method configs") {
  TrainConfig base;
  CHECK(method_config(base, "bifair").fairness == FairnessMode::BiFair);
  CHECK(method_config(base, "separate").separate);
  const auto p = method_config(base, "plain");
  CHECK(p.fairness == FairnessMode::Plain);
  CHECK_FALSE(p.train_z);
  CHECK(method_config(base, "groupdro").fairness == FairnessMode::GroupDro);
  CHECK_THROWS_AS(method_config(base, "nope"), ConfigError);
}

TEST_CASE("report validation catches structural problems") {
  json r = json::parse(R"({
    "format": "bifair-report", "version": 1, "split": "test", "method": "plain", "diagnostics": {},
    "cutoffs": [{"k": 20, "overall": {"recall": 0.5, "ndcg": 0.4, "hr": 0.9},
                 "groupings": [{"name": "genre", "metric": "recall", "labels": ["a", "b"],
                                "utilities": [0.2, null], "cv": null, "min_bottom": 0.2,
                                "epsilon_if": [{"epsilon": 0.1, "satisfied": null}]}]}]})");
  CHECK(validate_report(r).empty());
  auto bad = r;
  bad["cutoffs"][0]["overall"]["recall"] = 1.5;
  CHECK_FALSE(validate_report(bad).empty());
  bad = r;
  bad["cutoffs"][0]["groupings"][0]["utilities"] = {0.1};
  CHECK_FALSE(validate_report(bad).empty());
  bad = r;
  bad.erase("format");
  CHECK_FALSE(validate_report(bad).empty());
  bad = r;
  bad["cutoffs"] = json::array();
  CHECK_FALSE(validate_report(bad).empty());
}

TEST_CASE("desk pipeline end to end") {
  auto c = desk("pipeline", {"compare.seeds=[0]", "compare.methods=[\"plain\",\"bifair\"]"});
  run_synth(c);
  CHECK(fs::exists(c.data.interactions));
  CHECK(fs::exists(c.data.embeddings));
  run_prep(c);
  CHECK(fs::exists(c.data.dataset_dir / "config.echo.json"));
  const auto model = run_train(c);
  CHECK_FALSE(model.history.empty());
  CHECK(fs::exists(c.eval.checkpoint / "history.jsonl"));
  const auto report = run_eval(c);
  CHECK(validate_report(json::parse(report.dump())).empty());
  CHECK(fs::exists(c.eval.output_dir / "report.csv"));
  CHECK(validate_report(read_json_file(c.eval.output_dir / "report.json")).empty());
  const auto cmp = run_compare(c);
  CHECK(cmp.cells.size() == 2);
  CHECK(cmp.table.size() == 2);
  CHECK(fs::exists(c.compare.output_dir / "summary.json"));
  CHECK(fs::exists(c.compare.output_dir / "table.csv"));
  for (const auto& cell : cmp.cells) CHECK(validate_report(json::parse(cell.report.dump())).empty());

  // same config again gives byte-identical artifacts
  const auto history = slurp(c.eval.checkpoint / "history.jsonl");
  const auto rep = slurp(c.eval.output_dir / "report.json");
  run_train(c);
  run_eval(c);
  CHECK(slurp(c.eval.checkpoint / "history.jsonl") == history);
  CHECK(slurp(c.eval.output_dir / "report.json") == rep);
}

TEST_CASE("run_command exit codes") {
  const auto dir = fixture::scratch_dir("exit_codes");
  CHECK(run_command("train", dir / "missing.json", {}) == 2);
  CHECK(run_command("fly", kDesk, {"workdir=" + dir.string()}) == 2);
  CHECK(run_command("eval", kDesk, {"workdir=" + dir.string()}) == 1);  // no checkpoint yet
}
