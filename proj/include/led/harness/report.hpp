#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "led/detector/detector.hpp"
#include "led/harness/config.hpp"
#include "led/harness/training.hpp"

namespace led {

// JSON-lines report. The first line embeds the resolved config so that a
// run can be repeated from the report alone.
class RunReport {
 public:
  RunReport(std::string kind, const ExperimentConfig& cfg);

  void add(nlohmann::json record);
  const std::vector<nlohmann::json>& records() const { return records_; }
  std::string to_jsonl() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<nlohmann::json> records_;
};

nlohmann::json config_json(const ExperimentConfig& cfg);
// Reads the config record of a report written by RunReport.
ExperimentConfig embedded_config(const std::filesystem::path& report);

nlohmann::json metrics_json(const GroundingMetrics& m);
nlohmann::json step_json(const StepRecord& s);
// Summary of a stage run: losses, frozen-gradient check, metrics.
nlohmann::json stage_json(const StageResult& r);
void add_stage_records(RunReport& report, const StageResult& r);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_string() const;
  void write(const std::filesystem::path& path) const;
};

std::string format_number(double v);

}  // namespace led
