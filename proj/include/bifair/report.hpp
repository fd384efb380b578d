#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifair/bilevel.hpp"
#include "bifair/dataio.hpp"
#include "bifair/evalmetrics.hpp"

namespace bifair {

struct ReportContext {
  std::string method;
  std::uint64_t seed = 0;
  std::string train_grouping;
  const Dataset* dataset = nullptr;
  const TrainedModel* model = nullptr;  // optional training diagnostics
  const EvalOptions* options = nullptr;
  nlohmann::ordered_json config;  // training config echo
};

nlohmann::ordered_json report_json(const EvaluationSummary& summary, const ReportContext& ctx);

// Structural check mirroring schemas/report.schema.json. Returns the list of
// problems; empty means valid.
std::vector<std::string> validate_report(const nlohmann::json& report);

// One row per overall metric, per group utility and per grouping summary.
void write_report_csv(const nlohmann::ordered_json& report, const std::filesystem::path& path);

void write_json_file(const nlohmann::ordered_json& j, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace bifair
