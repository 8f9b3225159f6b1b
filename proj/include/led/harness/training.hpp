#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "led/adapter/adapter.hpp"
#include "led/detector/detector.hpp"
#include "led/harness/config.hpp"
#include "led/harness/scenes.hpp"
#include "led/mllm/mllm.hpp"

namespace led {

struct Dataset {
  std::vector<SyntheticScene> pretrain;  // train split, for the pretraining stages
  std::vector<SyntheticScene> train;     // train split, for stage 3
  std::vector<SyntheticScene> val_category;
  std::vector<SyntheticScene> val_spatial;

  static Dataset generate(const ExperimentConfig& cfg);
  const std::vector<SyntheticScene>& split(Split s) const;
};

// The pretrained models: the MLLM (which owns the shared vision encoder)
// and the grounding detector.
struct ModelSet {
  explicit ModelSet(const ExperimentConfig& cfg);

  MiniMllm mllm;
  GroundingDetector detector;

  ParamList params() const;
  void set_trainable(const TrainConfig& t) const;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr_scale = 0.0;
  double trained_grad_norm = 0.0;
  double frozen_grad_norm = 0.0;
};

struct StageResult {
  std::size_t stage = 0;
  std::vector<StepRecord> steps;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  double max_frozen_grad_norm = 0.0;
  std::optional<GroundingMetrics> val_category;
  std::optional<GroundingMetrics> val_spatial;
};

// Raised when a loss turns non-finite; carries the step for diagnostics.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(std::size_t step, const std::string& what);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Stage 0: detector and shared vision encoder on the grounding task.
StageResult pretrain_detector(ModelSet& models, const Dataset& data, const ExperimentConfig& cfg);
// Stages 1 (captions) and 2 (query -> location instructions).
StageResult train_mllm(ModelSet& models, const Dataset& data, const ExperimentConfig& cfg,
                       std::size_t stage);

GroundingMetrics evaluate_detector(const ModelSet& models, const std::vector<SyntheticScene>& scenes,
                                   double iou_threshold);

enum class Stage3Variant : unsigned char { kFusion, kSubstitute };
std::string to_string(Stage3Variant v);

struct Stage3Run {
  std::uint64_t seed = 0;
  Stage3Variant variant = Stage3Variant::kFusion;
  AdapterConfig adapter;
  TrainConfig train;
};

struct Stage3Outcome {
  StageResult result;
  FusionState adapter;
  Linear proj1;
  Linear proj2;
  Linear substitute_map;  // kSubstitute only
};

// Frozen models plus every stage-3 input that does not depend on the
// trainable parts: vision features and detector states up to the injection
// layer for all splits. Re-used across seeds and source layers.
class Stage3Session {
 public:
  Stage3Session(const ModelSet& models, const Dataset& data, const ExperimentConfig& cfg);
  ~Stage3Session();
  Stage3Session(const Stage3Session&) = delete;
  Stage3Session& operator=(const Stage3Session&) = delete;

  GroundingMetrics baseline(Split split) const;
  Stage3Outcome train(const Stage3Run& run) const;
  GroundingMetrics evaluate(Split split, const Stage3Run& run, const Stage3Outcome& trained) const;

  // Detector outputs of a (possibly trained) stage-3 model on rows of a split;
  // exposed for equivalence tests against the uncached hook path.
  DetectorOutput forward(Split split, const std::vector<std::size_t>& rows, const Stage3Run& run,
                         const Stage3Outcome& trained) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Stage orchestration with checkpoints. Stage k > 0 requires the stage k-1
// checkpoint in `in` (UsageError otherwise); the stage-k checkpoint with
// every model parameter is written to `out`.
struct StageIo {
  std::filesystem::path in;
  std::filesystem::path out;
};
StageResult run_stage(const ExperimentConfig& cfg, std::size_t stage, const StageIo& io,
                      const Dataset& data,
                      Stage3Variant variant = Stage3Variant::kFusion);

void load_models(ModelSet& models, const std::filesystem::path& dir);
// Trainable stage-3 state from a stage-3 checkpoint; the variant follows
// from which parameters the checkpoint holds.
Stage3Outcome load_stage3(const ExperimentConfig& cfg, const std::filesystem::path& dir, Stage3Variant& variant);
void require_checkpoint(const std::filesystem::path& dir, std::size_t stage);

}  // namespace led
