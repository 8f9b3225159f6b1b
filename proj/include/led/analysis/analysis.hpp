#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "led/harness/config.hpp"
#include "led/harness/report.hpp"
#include "led/harness/training.hpp"
#include "led/mllm/mllm.hpp"

namespace led {

// Median of the values; the mean of the two middle values for even counts.
double median(std::vector<double> values);

// Median pre-softmax score of one decoder layer, per key modality. A
// modality without any visible key (e.g. no text) has no entry.
struct LayerAttention {
  std::size_t layer = 0;  // 1-based
  std::array<std::optional<double>, 3> by_key;  // indexed by Modality

  std::optional<double> vision() const { return by_key[static_cast<int>(Modality::kVision)]; }
};

struct AttentionProfile {
  std::vector<LayerAttention> layers;

  // Columns: layer, modality, median.
  CsvTable table() const;
};

// For each layer, the scaled scores QK^T/sqrt(d_k) over the entries a query
// may attend to (causal, both positions inside the row's length) are grouped
// by the key's modality; the median is taken per (row, head) and averaged.
AttentionProfile attention_medians(const MiniMllm& model, const Tensor& images, const TextBatch& text);

struct AblationResult {
  std::size_t l_lm = 0;
  std::uint64_t seed = 0;
  GroundingMetrics val_category;
  GroundingMetrics val_spatial;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
};

// Trains a fresh stage-3 adapter for every (l_lm, seed) pair, l_lm-major.
// l_lm = 0 reads the embeddings before any decoder layer.
std::vector<AblationResult> layer_sweep(const Stage3Session& session, const std::vector<std::size_t>& l_values,
                                        const std::vector<std::uint64_t>& seeds, const Stage3Run& base);
// Same, from a stage-2 checkpoint directory (UsageError when missing).
std::vector<AblationResult> layer_sweep(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                        const Dataset& data, const std::vector<std::size_t>& l_values,
                                        const std::vector<std::uint64_t>& seeds);

struct LayerMean {
  std::size_t l_lm = 0;
  double spatial_accuracy = 0.0;
  double category_accuracy = 0.0;
  std::size_t rank = 0;  // 1 = best mean spatial accuracy
};
std::vector<LayerMean> layer_means(const std::vector<AblationResult>& results);

CsvTable ablation_table(const std::vector<AblationResult>& results);

struct ComputeRow {
  std::string framework;
  bool delta = false;  // relative to the baseline row
  std::uint64_t params = 0;
  std::uint64_t flops_analytic = 0;
  std::uint64_t flops_metered = 0;
  double latency_ms = 0.0;
};

struct ComputeOptions {
  std::size_t warmup = 5;
  std::size_t repetitions = 50;
};

// Rows: the detector with its vision encoder, then the LED delta and its two
// parts (adapter; projector, system prefix and the first l_lm LLM layers).
struct ComputeReport {
  std::vector<ComputeRow> rows;

  const ComputeRow& row(const std::string& framework) const;
  // Columns: Framework, Params, GFLOPs, Latency.
  CsvTable table() const;
  // Raw numbers, one JSON object per row.
  std::vector<nlohmann::json> records() const;
};

// Single-image forward passes of freshly initialised models built from cfg.
ComputeReport compute_report(const ExperimentConfig& cfg, const ComputeOptions& options = {});

}  // namespace led
