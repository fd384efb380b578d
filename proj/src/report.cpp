#include "bifair/report.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace bifair {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json opt_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::string csv_number(const json& v) {
  if (v.is_null()) return "";
  std::ostringstream os;
  os.precision(10);
  os << v.get<double>();
  return os.str();
}

}  // namespace

ordered_json report_json(const EvaluationSummary& summary, const ReportContext& ctx) {
  ordered_json r;
  r["format"] = "bifair-report";
  r["version"] = 1;
  r["split"] = summary.split == EvalSplit::Test ? "test" : "val";
  r["method"] = ctx.method;
  r["seed"] = ctx.seed;
  r["train_grouping"] = ctx.train_grouping;
  if (!ctx.config.is_null()) r["config"] = ctx.config;
  if (ctx.options != nullptr) {
    const EvalOptions& o = *ctx.options;
    r["eval"] = {{"ks", o.ks},
                 {"epsilons", o.epsilons},
                 {"utility_metric", to_string(o.utility_metric)},
                 {"averaging", to_string(o.averaging)},
                 {"bottom_fraction", o.bottom_fraction}};
  }
  if (ctx.dataset != nullptr) {
    const Dataset& ds = *ctx.dataset;
    std::size_t nv = 0, nt = 0;
    for (const auto& v : ds.val) nv += v.size();
    for (const auto& t : ds.test) nt += t.size();
    r["dataset"] = {{"num_users", ds.num_users},
                    {"num_items", ds.num_items},
                    {"num_train", ds.num_train_interactions()},
                    {"num_val", nv},
                    {"num_test", nt}};
  }
  ordered_json cutoffs = ordered_json::array();
  std::vector<std::string> warnings;
  for (const auto& c : summary.cutoffs) {
    ordered_json cj;
    cj["k"] = c.k;
    cj["overall"] = {{"recall", c.overall.recall},
                     {"ndcg", c.overall.ndcg},
                     {"hr", c.overall.hr},
                     {"users", c.overall.users}};
    ordered_json gs = ordered_json::array();
    for (const auto& g : c.groupings) {
      ordered_json gj;
      gj["name"] = g.name;
      gj["metric"] = to_string(g.utilities.metric);
      gj["labels"] = g.labels;
      ordered_json utils = ordered_json::array();
      for (std::size_t n = 0; n < g.utilities.values.size(); ++n) {
        utils.push_back(g.utilities.defined[n] ? ordered_json(g.utilities.values[n]) : ordered_json(nullptr));
      }
      gj["utilities"] = utils;
      gj["users"] = g.utilities.users;
      gj["cv"] = opt_number(g.cv);
      gj["min_bottom"] = opt_number(g.min_bottom);
      ordered_json eps = ordered_json::array();
      for (const auto& [e, ok] : g.epsilon_if) {
        eps.push_back({{"epsilon", e}, {"satisfied", ok ? ordered_json(*ok) : ordered_json(nullptr)}});
      }
      gj["epsilon_if"] = eps;
      gj["warnings"] = g.warnings;
      for (const auto& w : g.warnings) warnings.push_back(g.name + "@" + std::to_string(c.k) + ": " + w);
      gs.push_back(gj);
    }
    cj["groupings"] = gs;
    cutoffs.push_back(cj);
  }
  r["cutoffs"] = cutoffs;

  ordered_json diag;
  if (ctx.model != nullptr) {
    const TrainedModel& m = *ctx.model;
    std::size_t violations = 0;
    for (const auto& h : m.history) violations += h.constraint_violations;
    diag["training"] = {{"epochs_run", m.history.size()},
                        {"best_epoch", m.best_epoch},
                        {"best_val_recall", m.best_val_recall},
                        {"stop_reason", m.stop_reason},
                        {"constraint_violations", violations}};
    r["runtime"] = {{"batches", m.batches},
                    {"theta_evals", m.counters.theta_evals},
                    {"z_evals", m.counters.z_evals},
                    {"forward_passes", m.counters.forward_passes}};
  }
  diag["warnings"] = warnings;
  r["diagnostics"] = diag;
  return r;
}

std::vector<std::string> validate_report(const json& r) {
  std::vector<std::string> errs;
  auto need = [&](const json& obj, const char* key, bool (json::*pred)() const noexcept, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key) || !(obj.at(key).*pred)()) {
      errs.push_back(where + "." + key + " missing or of the wrong type");
      return false;
    }
    return true;
  };
  auto finite_or_null = [&](const json& v, const std::string& where) {
    if (v.is_null()) return;
    if (!v.is_number() || !std::isfinite(v.get<double>())) errs.push_back(where + " must be a finite number or null");
  };
  if (!r.is_object()) return {"report must be an object"};
  if (need(r, "format", &json::is_string, "report") && r["format"] != "bifair-report") {
    errs.push_back("report.format must be 'bifair-report'");
  }
  need(r, "version", &json::is_number_integer, "report");
  if (need(r, "split", &json::is_string, "report") && r["split"] != "test" && r["split"] != "val") {
    errs.push_back("report.split must be 'test' or 'val'");
  }
  need(r, "method", &json::is_string, "report");
  need(r, "diagnostics", &json::is_object, "report");
  if (!need(r, "cutoffs", &json::is_array, "report")) return errs;
  if (r["cutoffs"].empty()) errs.push_back("report.cutoffs must not be empty");
  for (std::size_t i = 0; i < r["cutoffs"].size(); ++i) {
    const json& c = r["cutoffs"][i];
    const std::string where = "cutoffs[" + std::to_string(i) + "]";
    if (need(c, "k", &json::is_number_unsigned, where) && c["k"].get<std::size_t>() == 0) errs.push_back(where + ".k must be >= 1");
    if (need(c, "overall", &json::is_object, where)) {
      for (const char* m : {"recall", "ndcg", "hr"}) {
        if (need(c["overall"], m, &json::is_number, where + ".overall")) {
          const double v = c["overall"][m].get<double>();
          if (!(v >= 0.0 && v <= 1.0)) errs.push_back(where + ".overall." + m + " must lie in [0, 1]");
        }
      }
    }
    if (!need(c, "groupings", &json::is_array, where)) continue;
    for (std::size_t g = 0; g < c["groupings"].size(); ++g) {
      const json& gj = c["groupings"][g];
      const std::string gw = where + ".groupings[" + std::to_string(g) + "]";
      need(gj, "name", &json::is_string, gw);
      need(gj, "metric", &json::is_string, gw);
      const bool has_labels = need(gj, "labels", &json::is_array, gw);
      if (need(gj, "utilities", &json::is_array, gw)) {
        if (has_labels && gj["utilities"].size() != gj["labels"].size()) errs.push_back(gw + ": utilities and labels differ in length");
        for (const auto& u : gj["utilities"]) finite_or_null(u, gw + ".utilities[]");
      }
      if (gj.contains("cv")) finite_or_null(gj["cv"], gw + ".cv");
      else errs.push_back(gw + ".cv missing");
      if (gj.contains("min_bottom")) finite_or_null(gj["min_bottom"], gw + ".min_bottom");
      else errs.push_back(gw + ".min_bottom missing");
      if (need(gj, "epsilon_if", &json::is_array, gw)) {
        for (const auto& e : gj["epsilon_if"]) {
          if (!e.is_object() || !e.contains("epsilon") || !e["epsilon"].is_number() || !e.contains("satisfied") ||
              !(e["satisfied"].is_boolean() || e["satisfied"].is_null())) {
            errs.push_back(gw + ".epsilon_if entries need epsilon and satisfied");
          }
        }
      }
    }
  }
  return errs;
}

void write_report_csv(const ordered_json& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "k,scope,name,metric,value\n";
  for (const auto& c : report.at("cutoffs")) {
    const auto k = c.at("k").get<std::size_t>();
    for (const char* m : {"recall", "ndcg", "hr"}) {
      out << k << ",overall,all," << m << ',' << csv_number(c["overall"][m]) << '\n';
    }
    for (const auto& g : c.at("groupings")) {
      const std::string name = g.at("name").get<std::string>();
      const std::string metric = g.at("metric").get<std::string>();
      for (std::size_t n = 0; n < g["labels"].size(); ++n) {
        out << k << ",group:" << name << ',' << g["labels"][n].get<std::string>() << ',' << metric << ','
            << csv_number(g["utilities"][n]) << '\n';
      }
      out << k << ",grouping," << name << ",cv," << csv_number(g["cv"]) << '\n';
      out << k << ",grouping," << name << ",min_bottom," << csv_number(g["min_bottom"]) << '\n';
      for (const auto& e : g["epsilon_if"]) {
        out << k << ",grouping," << name << ",epsilon_if@" << csv_number(e["epsilon"]) << ','
            << (e["satisfied"].is_null() ? "" : (e["satisfied"].get<bool>() ? "1" : "0")) << '\n';
      }
    }
  }
}

void write_json_file(const ordered_json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace bifair
