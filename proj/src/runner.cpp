#include "bifair/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "bifair/baselines.hpp"
#include "bifair/embed.hpp"
#include "bifair/report.hpp"

namespace bifair {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

template <typename T>
T as(const json& v, const std::string& where) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + " has the wrong type");
  }
}

std::size_t as_count(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
  if (v.get<long long>() < 0) throw ConfigError(where + " must be >= 0");
  return v.get<std::size_t>();
}

const json& object_or_empty(const json& j, const char* key) {
  static const json empty = json::object();
  if (!j.contains(key)) return empty;
  const json& v = j.at(key);
  if (!v.is_object()) throw ConfigError(std::string(key) + " must be an object");
  return v;
}

[[noreturn]] void unknown(const std::string& section, const std::string& key) {
  throw ConfigError("unknown " + section + " option '" + key + "'");
}

std::string split_name(EvalSplit s) { return s == EvalSplit::Test ? "test" : "val"; }

EvalSplit split_from_string(const std::string& s) {
  if (s == "test") return EvalSplit::Test;
  if (s == "val") return EvalSplit::Val;
  throw ConfigError("unknown eval split '" + s + "'");
}

const std::set<std::string>& known_methods() {
  static const std::set<std::string> m{"plain", "reweight", "groupdro", "bifair", "separate"};
  return m;
}

double median(std::vector<double> v) {
  std::erase_if(v, [](double x) { return !std::isfinite(x); });
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ordered_json number_or_null(double x) { return std::isfinite(x) ? ordered_json(x) : ordered_json(nullptr); }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_provenance(const RunConfig& cfg, const fs::path& dir, const std::string& command, double seconds,
                      const ordered_json& extra_timing = ordered_json::object()) {
  fs::create_directories(dir);
  write_json_file(echo_json(cfg), dir / "config.echo.json");
  write_json_file(resolved_json(cfg), dir / "config.resolved.json");
  ordered_json t;
  t["command"] = command;
  t["seconds"] = seconds;
  for (const auto& [k, v] : extra_timing.items()) t[k] = v;
  write_json_file(t, dir / "timing.json");
}

SemanticMatrix load_z0(const RunConfig& cfg, const Dataset& ds) {
  return load_embeddings(cfg.data.embeddings, ds.num_items, cfg.data.normalize_embeddings);
}

std::string method_name(const TrainConfig& c) { return c.separate ? "separate" : to_string(c.fairness); }

}  // namespace

void RunConfig::validate() const {
  synth.generator.validate();
  for (double s : synth.noise_scales) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("synth.noise_scales must be finite and >= 0");
  }
  preprocess.validate();
  train.validate();
  if (groups.eval.empty()) throw ConfigError("groups.eval must not be empty");
  if (eval.options.ks.empty()) throw ConfigError("eval.ks must not be empty");
  for (auto k : eval.options.ks) {
    if (k == 0) throw ConfigError("eval.ks entries must be >= 1");
  }
  for (double e : eval.options.epsilons) {
    if (!(e > 0.0)) throw ConfigError("eval.epsilons entries must be > 0");
  }
  if (!(eval.options.bottom_fraction > 0.0 && eval.options.bottom_fraction <= 1.0)) {
    throw ConfigError("eval.bottom_fraction must lie in (0, 1]");
  }
  if (compare.seeds.empty()) throw ConfigError("compare.seeds must not be empty");
  if (compare.methods.empty()) throw ConfigError("compare.methods must not be empty");
  for (const auto& m : compare.methods) {
    if (!known_methods().contains(m)) throw ConfigError("unknown compare method '" + m + "'");
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  c.input = j;
  static const std::set<std::string> top{"workdir", "seed", "synth", "data", "preprocess", "groups",
                                         "train", "eval", "compare", "description"};
  for (const auto& [key, v] : j.items()) {
    if (!top.contains(key)) unknown("top-level", key);
  }
  if (j.contains("workdir")) c.workdir = as<std::string>(j["workdir"], "workdir");
  if (j.contains("seed")) c.seed = as<std::uint64_t>(j["seed"], "seed");
  c.workdir = fs::absolute(c.workdir).lexically_normal();

  const json& synth = object_or_empty(j, "synth");
  auto& g = c.synth.generator;
  g.seed = c.seed;
  for (const auto& [key, v] : synth.items()) {
    const std::string w = "synth." + key;
    if (key == "num_users") g.num_users = as_count(v, w);
    else if (key == "num_items") g.num_items = as_count(v, w);
    else if (key == "num_topics") g.num_topics = as_count(v, w);
    else if (key == "num_genres") g.num_genres = as_count(v, w);
    else if (key == "d_sem") g.d_sem = as_count(v, w);
    else if (key == "min_history") g.min_history = as_count(v, w);
    else if (key == "max_history") g.max_history = as_count(v, w);
    else if (key == "low_ratings") g.low_ratings = as_count(v, w);
    else if (key == "zipf_exponent") g.zipf_exponent = as<double>(v, w);
    else if (key == "popularity_weight") g.popularity_weight = as<double>(v, w);
    else if (key == "preference_weight") g.preference_weight = as<double>(v, w);
    else if (key == "seed") g.seed = as<std::uint64_t>(v, w);
    else if (key == "noise_scales") c.synth.noise_scales = as<std::vector<double>>(v, w);
    else if (key == "noise_grouping") c.synth.noise_grouping = as<std::string>(v, w);
    else unknown("synth", key);
  }

  const json& data = object_or_empty(j, "data");
  c.data.interactions = c.workdir / "raw" / "interactions.csv";
  c.data.metadata = c.workdir / "raw" / "metadata.csv";
  c.data.embeddings = c.workdir / "raw" / "embeddings.bin";
  c.data.dataset_dir = c.workdir / "dataset";
  for (const auto& [key, v] : data.items()) {
    const std::string w = "data." + key;
    if (key == "interactions") c.data.interactions = fs::absolute(as<std::string>(v, w));
    else if (key == "metadata") c.data.metadata = fs::absolute(as<std::string>(v, w));
    else if (key == "embeddings") c.data.embeddings = fs::absolute(as<std::string>(v, w));
    else if (key == "dataset_dir") c.data.dataset_dir = fs::absolute(as<std::string>(v, w));
    else if (key == "delimiter") {
      const auto d = as<std::string>(v, w);
      if (d.size() != 1) throw ConfigError("data.delimiter must be a single character");
      c.data.delimiter = d[0];
    } else if (key == "normalize_embeddings") c.data.normalize_embeddings = as<bool>(v, w);
    else unknown("data", key);
  }

  const json& prep = object_or_empty(j, "preprocess");
  c.preprocess.seed = derive_seed(c.seed, seed_role::kPreprocess);
  for (const auto& [key, v] : prep.items()) {
    const std::string w = "preprocess." + key;
    if (key == "min_rating") c.preprocess.min_rating = as<double>(v, w);
    else if (key == "min_user_interactions") c.preprocess.min_user_interactions = as_count(v, w);
    else if (key == "split_ratio") c.preprocess.split_ratio = as<std::array<double, 3>>(v, w);
    else if (key == "top_pop_fraction") c.preprocess.top_pop_fraction = as<double>(v, w);
    else if (key == "seed") c.preprocess.seed = as<std::uint64_t>(v, w);
    else if (key == "temporal_split") c.preprocess.temporal_split = as<bool>(v, w);
    else if (key == "fixpoint_filter") c.preprocess.fixpoint_filter = as<bool>(v, w);
    else unknown("preprocess", key);
  }

  const json& groups = object_or_empty(j, "groups");
  for (const auto& [key, v] : groups.items()) {
    if (key == "train") c.groups.train = as<std::string>(v, "groups.train");
    else if (key == "eval") c.groups.eval = as<std::vector<std::string>>(v, "groups.eval");
    else unknown("groups", key);
  }

  const json& train = object_or_empty(j, "train");
  c.train = train_config_from_json(train);
  if (!train.contains("seed")) c.train.seed = c.seed;

  const json& ev = object_or_empty(j, "eval");
  c.eval.checkpoint = c.workdir / "checkpoint";
  c.eval.output_dir = c.workdir / "eval";
  for (const auto& [key, v] : ev.items()) {
    const std::string w = "eval." + key;
    if (key == "ks") c.eval.options.ks = as<std::vector<std::size_t>>(v, w);
    else if (key == "epsilons") c.eval.options.epsilons = as<std::vector<double>>(v, w);
    else if (key == "utility_metric") c.eval.options.utility_metric = metric_kind_from_string(as<std::string>(v, w));
    else if (key == "averaging") c.eval.options.averaging = utility_averaging_from_string(as<std::string>(v, w));
    else if (key == "bottom_fraction") c.eval.options.bottom_fraction = as<double>(v, w);
    else if (key == "split") c.eval.split = split_from_string(as<std::string>(v, w));
    else if (key == "checkpoint") c.eval.checkpoint = fs::absolute(as<std::string>(v, w));
    else if (key == "output_dir") c.eval.output_dir = fs::absolute(as<std::string>(v, w));
    else unknown("eval", key);
  }

  const json& cmp = object_or_empty(j, "compare");
  c.compare.output_dir = c.workdir / "compare";
  for (const auto& [key, v] : cmp.items()) {
    const std::string w = "compare." + key;
    if (key == "seeds") c.compare.seeds = as<std::vector<std::uint64_t>>(v, w);
    else if (key == "methods") c.compare.methods = as<std::vector<std::string>>(v, w);
    else if (key == "per_grouping") c.compare.per_grouping = as<bool>(v, w);
    else if (key == "output_dir") c.compare.output_dir = fs::absolute(as<std::string>(v, w));
    else unknown("compare", key);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

ordered_json resolved_json(const RunConfig& c) {
  ordered_json j;
  j["workdir"] = c.workdir.string();
  j["seed"] = c.seed;
  const auto& g = c.synth.generator;
  j["synth"] = {{"num_users", g.num_users},
                {"num_items", g.num_items},
                {"num_topics", g.num_topics},
                {"num_genres", g.num_genres},
                {"d_sem", g.d_sem},
                {"min_history", g.min_history},
                {"max_history", g.max_history},
                {"low_ratings", g.low_ratings},
                {"zipf_exponent", g.zipf_exponent},
                {"popularity_weight", g.popularity_weight},
                {"preference_weight", g.preference_weight},
                {"seed", g.seed},
                {"noise_scales", c.synth.noise_scales},
                {"noise_grouping", c.synth.noise_grouping}};
  j["data"] = {{"interactions", c.data.interactions.string()},
               {"metadata", c.data.metadata.string()},
               {"embeddings", c.data.embeddings.string()},
               {"dataset_dir", c.data.dataset_dir.string()},
               {"delimiter", std::string(1, c.data.delimiter)},
               {"normalize_embeddings", c.data.normalize_embeddings}};
  const auto& p = c.preprocess;
  j["preprocess"] = {{"min_rating", p.min_rating},
                     {"min_user_interactions", p.min_user_interactions},
                     {"split_ratio", p.split_ratio},
                     {"top_pop_fraction", p.top_pop_fraction},
                     {"seed", p.seed},
                     {"temporal_split", p.temporal_split},
                     {"fixpoint_filter", p.fixpoint_filter}};
  j["groups"] = {{"train", c.groups.train}, {"eval", c.groups.eval}};
  j["train"] = to_json(c.train);
  const auto& o = c.eval.options;
  j["eval"] = {{"ks", o.ks},
               {"epsilons", o.epsilons},
               {"utility_metric", to_string(o.utility_metric)},
               {"averaging", to_string(o.averaging)},
               {"bottom_fraction", o.bottom_fraction},
               {"split", split_name(c.eval.split)},
               {"checkpoint", c.eval.checkpoint.string()},
               {"output_dir", c.eval.output_dir.string()}};
  j["compare"] = {{"seeds", c.compare.seeds},
                  {"methods", c.compare.methods},
                  {"per_grouping", c.compare.per_grouping},
                  {"output_dir", c.compare.output_dir.string()}};
  return j;
}

json echo_json(const RunConfig& cfg) {
  json j = cfg.input;
  auto absolutize = [](json& node) {
    if (node.is_string()) node = fs::absolute(node.get<std::string>()).lexically_normal().string();
  };
  if (j.contains("workdir")) absolutize(j["workdir"]);
  for (const auto& [section, keys] : std::vector<std::pair<std::string, std::vector<std::string>>>{
           {"data", {"interactions", "metadata", "embeddings", "dataset_dir"}},
           {"eval", {"checkpoint", "output_dir"}},
           {"compare", {"output_dir"}}}) {
    if (!j.contains(section) || !j[section].is_object()) continue;
    for (const auto& k : keys) {
      if (j[section].contains(k)) absolutize(j[section][k]);
    }
  }
  return j;
}

NamedGrouping build_grouping(const std::string& name, const Dataset& ds, const RunConfig& cfg) {
  if (name == "popularity") return {name, assign_popularity_groups(ds, cfg.preprocess.top_pop_fraction)};
  return {name, assign_attribute_groups(load_metadata(cfg.data.metadata), ds)};
}

TrainConfig method_config(TrainConfig cfg, const std::string& method) {
  if (method == "bifair") {
    cfg.fairness = FairnessMode::BiFair;
    cfg.separate = false;
    return cfg;
  }
  if (method == "separate") {
    cfg.fairness = FairnessMode::BiFair;
    cfg.separate = true;
    return cfg;
  }
  if (method == "plain" || method == "reweight" || method == "groupdro") {
    cfg.separate = false;
    return baseline_config(cfg, fairness_mode_from_string(method));
  }
  throw ConfigError("unknown method '" + method + "'");
}

void run_synth(const RunConfig& cfg) {
  Stopwatch clock;
  const SyntheticData sd = generate_synthetic(cfg.synth.generator);
  fs::create_directories(cfg.data.interactions.parent_path());
  fs::create_directories(cfg.data.metadata.parent_path());
  write_interactions(sd.raw, cfg.data.interactions);
  write_metadata(sd.metadata, cfg.data.metadata);

  // Embeddings follow the preprocessed item indexing, so the dataset is
  // built here from the file just written.
  const RawInteractions raw = load_interactions(cfg.data.interactions, {','});
  const Dataset ds = preprocess(raw, cfg.preprocess);
  save_dataset(ds, cfg.data.dataset_dir);
  const NamedGrouping grouping = build_grouping(cfg.synth.noise_grouping, ds, cfg);
  if (cfg.synth.noise_scales.size() != grouping.groups.num_groups) {
    throw ConfigError("synth.noise_scales has " + std::to_string(cfg.synth.noise_scales.size()) + " entries but '" +
                      cfg.synth.noise_grouping + "' has " + std::to_string(grouping.groups.num_groups) + " groups");
  }
  std::vector<std::size_t> order(grouping.groups.num_groups);
  for (std::size_t n = 0; n < order.size(); ++n) order[n] = n;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return grouping.groups.labels[a] < grouping.groups.labels[b]; });

  SynthEmbedConfig ec;
  ec.d_sem = cfg.synth.generator.d_sem;
  ec.num_latent_topics = cfg.synth.generator.num_topics;
  ec.seed = derive_seed(cfg.synth.generator.seed, seed_role::kEmbeddings);
  ec.topic_seed = cfg.synth.generator.seed;
  ec.group_noise_scale.assign(order.size(), 0.0);
  ordered_json noise = ordered_json::object();
  for (std::size_t r = 0; r < order.size(); ++r) {
    ec.group_noise_scale[order[r]] = cfg.synth.noise_scales[r];
    noise[grouping.groups.labels[order[r]]] = cfg.synth.noise_scales[r];
  }
  const SemanticMatrix z = synth_embeddings(ds, grouping.groups, ec);
  fs::create_directories(cfg.data.embeddings.parent_path());
  save_embeddings(z, cfg.data.embeddings, cfg.data.embeddings.extension() != ".txt");

  const fs::path dir = cfg.data.interactions.parent_path();
  ordered_json manifest;
  manifest["raw_interactions"] = sd.raw.records.size();
  manifest["num_users"] = ds.num_users;
  manifest["num_items"] = ds.num_items;
  manifest["num_train"] = ds.num_train_interactions();
  manifest["noise_grouping"] = cfg.synth.noise_grouping;
  manifest["noise_scales"] = noise;
  manifest["group_sizes"] = ordered_json::object();
  const auto sizes = grouping.groups.sizes();
  for (std::size_t n = 0; n < sizes.size(); ++n) manifest["group_sizes"][grouping.groups.labels[n]] = sizes[n];
  write_json_file(manifest, dir / "synth.json");
  write_provenance(cfg, dir, "synth", clock.seconds());
  log_info("synth: " + std::to_string(ds.num_users) + " users, " + std::to_string(ds.num_items) + " items -> " +
           dir.string());
}

void run_prep(const RunConfig& cfg) {
  Stopwatch clock;
  const RawInteractions raw = load_interactions(cfg.data.interactions, {cfg.data.delimiter});
  if (raw.malformed_lines > 0) log_warn("prep: skipped " + std::to_string(raw.malformed_lines) + " malformed lines");
  const Dataset ds = preprocess(raw, cfg.preprocess);
  save_dataset(ds, cfg.data.dataset_dir);
  write_provenance(cfg, cfg.data.dataset_dir, "prep", clock.seconds());
  log_info("prep: " + std::to_string(ds.num_users) + " users, " + std::to_string(ds.num_items) + " items, " +
           std::to_string(ds.num_train_interactions()) + " train interactions");
}

TrainedModel run_train(const RunConfig& cfg) {
  Stopwatch clock;
  const Dataset ds = load_dataset(cfg.data.dataset_dir);
  const NamedGrouping grouping = build_grouping(cfg.groups.train, ds, cfg);
  const SemanticMatrix z0 = load_z0(cfg, ds);
  TrainedModel model = train(ds, grouping.groups, z0, cfg.train);
  save_checkpoint(model, cfg.train, cfg.eval.checkpoint);
  write_json_file({{"method", method_name(cfg.train)}, {"train_grouping", cfg.groups.train}},
                  cfg.eval.checkpoint / "run.json");
  write_provenance(cfg, cfg.eval.checkpoint, "train", clock.seconds());
  log_info("train: " + std::to_string(model.history.size()) + " epochs, best epoch " +
           std::to_string(model.best_epoch) + ", stop: " + model.stop_reason);
  return model;
}

ordered_json run_eval(const RunConfig& cfg) {
  Stopwatch clock;
  const Dataset ds = load_dataset(cfg.data.dataset_dir);
  TrainConfig tcfg;
  const TrainedModel model = load_checkpoint(cfg.eval.checkpoint, &tcfg);
  if (model.z.num_items() != ds.num_items) throw Error("eval: checkpoint does not match the dataset's item count");
  std::vector<NamedGrouping> groupings;
  for (const auto& name : cfg.groups.eval) groupings.push_back(build_grouping(name, ds, cfg));
  const EvaluationSummary summary =
      evaluate(model.theta, model.z.z, ds, groupings, cfg.eval.options, tcfg.loss_options(), cfg.eval.split);

  ReportContext ctx;
  ctx.method = method_name(tcfg);
  ctx.seed = tcfg.seed;
  ctx.train_grouping = cfg.groups.train;
  if (fs::exists(cfg.eval.checkpoint / "run.json")) {
    const json run = read_json_file(cfg.eval.checkpoint / "run.json");
    ctx.train_grouping = run.value("train_grouping", ctx.train_grouping);
  }
  ctx.dataset = &ds;
  ctx.model = &model;
  ctx.options = &cfg.eval.options;
  ctx.config = to_json(tcfg);
  const ordered_json report = report_json(summary, ctx);
  const auto problems = validate_report(report);
  if (!problems.empty()) throw Error("eval: report failed validation: " + problems.front());
  fs::create_directories(cfg.eval.output_dir);
  write_json_file(report, cfg.eval.output_dir / "report.json");
  write_report_csv(report, cfg.eval.output_dir / "report.csv");
  write_provenance(cfg, cfg.eval.output_dir, "eval", clock.seconds());
  return report;
}

CompareResult run_compare(const RunConfig& cfg) {
  Stopwatch clock;
  const Dataset ds = load_dataset(cfg.data.dataset_dir);
  const SemanticMatrix z0 = load_z0(cfg, ds);
  std::vector<NamedGrouping> eval_groupings;
  for (const auto& name : cfg.groups.eval) eval_groupings.push_back(build_grouping(name, ds, cfg));

  std::vector<std::string> train_groupings{cfg.groups.train};
  if (cfg.compare.per_grouping) {
    for (const auto& name : cfg.groups.eval) {
      if (std::find(train_groupings.begin(), train_groupings.end(), name) == train_groupings.end()) {
        train_groupings.push_back(name);
      }
    }
  }
  std::map<std::string, NamedGrouping> train_group_map;
  for (const auto& name : train_groupings) train_group_map.emplace(name, build_grouping(name, ds, cfg));

  const auto& ks = cfg.eval.options.ks;
  const std::size_t k = std::find(ks.begin(), ks.end(), cfg.train.eval_k) != ks.end() ? cfg.train.eval_k : ks.front();
  const fs::path out = cfg.compare.output_dir;
  fs::create_directories(out / "cells");
  CompareResult result;
  ordered_json cell_timing = ordered_json::array();
  for (const auto& method : cfg.compare.methods) {
    for (std::uint64_t seed : cfg.compare.seeds) {
      for (const auto& tg : train_groupings) {
        Stopwatch cell_clock;
        TrainConfig tcfg = method_config(cfg.train, method);
        tcfg.seed = seed;
        const TrainedModel model = train(ds, train_group_map.at(tg).groups, z0, tcfg);
        const EvaluationSummary summary =
            evaluate(model.theta, model.z.z, ds, eval_groupings, cfg.eval.options, tcfg.loss_options(), cfg.eval.split);
        ReportContext ctx{method, seed, tg, &ds, &model, &cfg.eval.options, to_json(tcfg)};
        CompareCell cell{method, seed, tg, report_json(summary, ctx)};
        const auto problems = validate_report(cell.report);
        if (!problems.empty()) throw Error("compare: report failed validation: " + problems.front());
        const std::string tag = method + "_s" + std::to_string(seed) + "_" + tg;
        write_json_file(cell.report, out / "cells" / tag / "report.json");
        {
          std::ofstream hist(out / "cells" / tag / "history.jsonl");
          for (const auto& r : model.history) hist << to_json(r).dump() << '\n';
        }
        const double secs = cell_clock.seconds();
        cell_timing.push_back({{"cell", tag}, {"seconds", secs}});
        log_info("compare: " + tag + " done in " + std::to_string(secs) + " s");
        result.cells.push_back(std::move(cell));
      }
    }
  }

  // Column values of one (method, seed): accuracy from the model trained on
  // groups.train, each grouping's fairness from the model trained on it.
  auto cell_for = [&](const std::string& method, std::uint64_t seed, const std::string& tg) -> const CompareCell& {
    for (const auto& c : result.cells) {
      if (c.method == method && c.seed == seed && c.train_grouping == tg) return c;
    }
    throw Error("compare: missing cell");
  };
  auto cutoff_of = [&](const ordered_json& report) -> const ordered_json& {
    for (const auto& c : report["cutoffs"]) {
      if (c["k"].get<std::size_t>() == k) return c;
    }
    throw Error("compare: missing cutoff");
  };
  auto grouping_value = [&](const ordered_json& cutoff, const std::string& name, const char* field) {
    for (const auto& g : cutoff["groupings"]) {
      if (g["name"] == name) return g[field].is_null() ? std::nan("") : g[field].get<double>();
    }
    return std::nan("");
  };

  const auto columns = [&] {
    std::vector<std::string> cols{"recall", "ndcg", "hr"};
    for (const auto& g : cfg.groups.eval) {
      cols.push_back(g + "_cv");
      cols.push_back(g + "_min");
    }
    return cols;
  }();

  std::ofstream cells_csv(out / "cells.csv");
  cells_csv << "method,seed";
  for (const auto& c : columns) cells_csv << ',' << c << '@' << k;
  cells_csv << '\n';
  cells_csv.precision(10);
  std::map<std::string, std::map<std::string, std::vector<double>>> samples;
  for (const auto& method : cfg.compare.methods) {
    for (std::uint64_t seed : cfg.compare.seeds) {
      std::vector<double> row;
      const auto& acc = cutoff_of(cell_for(method, seed, cfg.groups.train).report);
      row.push_back(acc["overall"]["recall"].get<double>());
      row.push_back(acc["overall"]["ndcg"].get<double>());
      row.push_back(acc["overall"]["hr"].get<double>());
      for (const auto& g : cfg.groups.eval) {
        const std::string tg = cfg.compare.per_grouping ? g : cfg.groups.train;
        const auto& cut = cutoff_of(cell_for(method, seed, tg).report);
        row.push_back(grouping_value(cut, g, "cv"));
        row.push_back(grouping_value(cut, g, "min_bottom"));
      }
      cells_csv << method << ',' << seed;
      for (std::size_t i = 0; i < row.size(); ++i) {
        cells_csv << ',';
        if (std::isfinite(row[i])) cells_csv << row[i];
        samples[method][columns[i]].push_back(row[i]);
      }
      cells_csv << '\n';
    }
  }

  std::ofstream table_csv(out / "table.csv");
  table_csv << "method";
  for (const auto& c : columns) table_csv << ',' << c << '@' << k;
  table_csv << '\n';
  table_csv.precision(6);
  ordered_json summary;
  summary["k"] = k;
  summary["statistic"] = "median";
  summary["seeds"] = cfg.compare.seeds;
  summary["per_grouping"] = cfg.compare.per_grouping;
  summary["train_grouping"] = cfg.groups.train;
  summary["columns"] = columns;
  summary["methods"] = ordered_json::object();
  for (const auto& method : cfg.compare.methods) {
    std::vector<std::pair<std::string, double>> row;
    table_csv << method;
    ordered_json mj;
    for (const auto& c : columns) {
      const double m = median(samples[method][c]);
      row.emplace_back(c, m);
      table_csv << ',';
      if (std::isfinite(m)) table_csv << m;
      mj[c] = number_or_null(m);
    }
    table_csv << '\n';
    summary["methods"][method] = mj;
    result.table.emplace_back(method, std::move(row));
  }
  write_json_file(summary, out / "summary.json");
  write_provenance(cfg, out, "compare", clock.seconds(), {{"cells", cell_timing}});
  return result;
}

int run_command(const std::string& command, const fs::path& config_path, const std::vector<std::string>& overrides) {
  auto fail = [&](int code, const std::string& kind, const std::string& msg) {
    ordered_json e;
    e["error"] = msg;
    e["kind"] = kind;
    e["command"] = command;
    e["exit_status"] = code;
    std::cerr << e.dump() << '\n';
    return code;
  };
  try {
    const RunConfig cfg = load_run_config(config_path, overrides);
    if (command == "synth") run_synth(cfg);
    else if (command == "prep") run_prep(cfg);
    else if (command == "train") run_train(cfg);
    else if (command == "eval") run_eval(cfg);
    else if (command == "compare") run_compare(cfg);
    else throw ConfigError("unknown command '" + command + "'");
    return 0;
  } catch (const ConfigError& e) {
    return fail(2, "config", e.what());
  } catch (const std::exception& e) {
    return fail(1, "runtime", e.what());
  }
}

}  // namespace bifair
