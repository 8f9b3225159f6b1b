#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "led/adapter/adapter.hpp"
#include "led/core/optim.hpp"
#include "led/detector/detector.hpp"
#include "led/mllm/mllm.hpp"

namespace led {

// One training stage. Stage 0 pretrains the detector together with the
// shared vision encoder; stages 1-2 train the MLLM; stage 3 the adapter.
struct TrainConfig {
  std::size_t stage = 3;
  std::size_t steps = 1000;
  std::size_t batch = 16;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double clip = 1.0;
  double lr_vision = 0.0;
  double lr_detector = 0.0;
  double lr_projector = 0.0;
  double lr_llm = 0.0;
  double lr_adapter = 0.0;
  bool train_vision = false;
  bool train_detector = false;
  bool train_projector = false;
  bool train_llm = false;
  bool train_adapter = false;
  std::size_t log_every = 50;

  static TrainConfig defaults(std::size_t stage);
  void validate() const;
};

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t pretrain_scenes = 8000;  // stages 0-2
  std::size_t train_scenes = 2000;     // stage 3
  std::size_t eval_scenes = 500;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;       // stage-3 seed
  std::uint64_t init_seed = 0;  // initialisation of the pretrained models
  DataConfig data;
  MllmConfig mllm;
  DetectorConfig detector;
  AdapterConfig adapter;
  TrainConfig stage0 = TrainConfig::defaults(0);
  TrainConfig stage1 = TrainConfig::defaults(1);
  TrainConfig stage2 = TrainConfig::defaults(2);
  TrainConfig stage3 = TrainConfig::defaults(3);
  double iou_threshold = 0.5;

  ExperimentConfig();
  TrainConfig& stage(std::size_t k);
  const TrainConfig& stage(std::size_t k) const;
  // Derived widths (detector vocabulary, adapter widths, grids) follow the
  // MLLM and detector settings.
  void resolve();
  void validate() const;
};

// Flat "key = value" settings; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text);

// Applies settings (unknown keys raise ConfigError) and resolves.
void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv);
ExperimentConfig load_config(const std::filesystem::path& path);

// Every documented key with its current value, in a stable order.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);
std::string to_key_values(const ExperimentConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace led
