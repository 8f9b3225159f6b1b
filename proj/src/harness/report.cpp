#include "led/harness/report.hpp"

#include <cstdio>
#include <fstream>

namespace led {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : config_entries(cfg)) j[k] = v;
  return j;
}

RunReport::RunReport(std::string kind, const ExperimentConfig& cfg) {
  records_.push_back({{"type", "config"}, {"kind", std::move(kind)}, {"config", config_json(cfg)}});
}

void RunReport::add(nlohmann::json record) { records_.push_back(std::move(record)); }

std::string RunReport::to_jsonl() const {
  std::string out;
  for (const auto& r : records_) out += r.dump() + "\n";
  return out;
}

void RunReport::write(const std::filesystem::path& path) const { write_text(path, to_jsonl()); }

ExperimentConfig embedded_config(const std::filesystem::path& report) {
  std::ifstream in(report);
  std::string first;
  if (!in || !std::getline(in, first)) throw UsageError("cannot read report " + report.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(first);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("report " + report.string() + " does not start with a JSON record: " + e.what());
  }
  if (j.value("type", "") != "config") throw ConfigError("report " + report.string() + " has no config record");
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : j.at("config").items()) kv[k] = v.get<std::string>();
  ExperimentConfig cfg;
  apply_settings(cfg, kv);
  return cfg;
}

nlohmann::json metrics_json(const GroundingMetrics& m) {
  return {{"count", m.count},
          {"accuracy", m.accuracy},
          {"mean_iou", m.mean_iou},
          {"category_count", m.category_count},
          {"category_accuracy", m.category_accuracy},
          {"spatial_count", m.spatial_count},
          {"spatial_accuracy", m.spatial_accuracy}};
}

nlohmann::json step_json(const StepRecord& s) {
  return {{"type", "step"},
          {"step", s.step},
          {"loss", s.loss},
          {"lr_scale", s.lr_scale},
          {"trained_grad_norm", s.trained_grad_norm},
          {"frozen_grad_norm", s.frozen_grad_norm}};
}

nlohmann::json stage_json(const StageResult& r) {
  nlohmann::json j = {{"type", "summary"},
                      {"stage", r.stage},
                      {"steps", r.steps.size()},
                      {"initial_val_loss", r.initial_val_loss},
                      {"final_val_loss", r.final_val_loss},
                      {"max_frozen_grad_norm", r.max_frozen_grad_norm}};
  if (r.val_category) j["val_category"] = metrics_json(*r.val_category);
  if (r.val_spatial) j["val_spatial"] = metrics_json(*r.val_spatial);
  return j;
}

void add_stage_records(RunReport& report, const StageResult& r) {
  for (const auto& s : r.steps) report.add(step_json(s));
  report.add(stage_json(r));
}

std::string CsvTable::to_string() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_cell(cells[i]);
    out += "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const { write_text(path, to_string()); }

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace led
