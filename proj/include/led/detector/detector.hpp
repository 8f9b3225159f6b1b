#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "led/core/nn.hpp"
#include "led/core/tensor.hpp"
#include "led/mllm/mllm.hpp"

namespace led {

// (cx, cy, w, h) on the unit canvas.
using Box = std::array<double, 4>;

double box_iou(const Box& a, const Box& b);

enum class QueryKind : unsigned char { kCategory, kSpatial };
std::string to_string(QueryKind kind);

struct DetectorConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t queries = 4;
  std::size_t vision_width = 24;  // width of the shared encoder's tokens
  std::size_t vision_tokens = 64;
  std::size_t vocab = 64;
  std::size_t max_text = 16;
  std::size_t ffn = 128;

  void validate() const;
};

// Phrase classes per query: the queried phrase, another scene object, nothing.
inline constexpr std::size_t kTargetClass = 0;
inline constexpr std::size_t kOtherClass = 1;
inline constexpr std::size_t kNoObjectClass = 2;
inline constexpr std::size_t kPhraseClasses = 3;

struct Detection {
  Box box{};
  double score = 0.0;  // probability of the queried phrase
  std::vector<double> phrase_logits;
};

// Encoded inputs shared by every decoder layer.
struct DetectorContext {
  Tensor vision;  // E_V_D [B, P, d]
  Tensor text;    // E_T_D [B, W, d]
  Tensor pooled;  // [B, d]
  std::vector<std::size_t> text_lengths;
};

struct DetectorOutput {
  Tensor boxes;   // [B, Q, 4] after sigmoid
  Tensor logits;  // [B, Q, kPhraseClasses]
  Tensor embed;   // final decoder embedding [B, Q, d]
};

// Optional interception points used by adapters. `vision` rewrites E_V_D
// before decoding; `after_layer` rewrites the decoder embedding produced by
// layer `layer` (1-based).
struct DecoderHooks {
  std::function<Tensor(const Tensor&)> vision;
  std::size_t layer = 0;
  std::function<Tensor(const Tensor&)> after_layer;
};

struct DetectorLayer {
  LayerNorm ln_self;
  AttentionWeights self_attn;
  LayerNorm ln_vision;
  AttentionWeights vision_attn;
  LayerNorm ln_text;
  AttentionWeights text_attn;
  LayerNorm ln_ffn;
  Linear fc1;
  Linear fc2;
};

class GroundingDetector {
 public:
  GroundingDetector() = default;
  GroundingDetector(const DetectorConfig& cfg, std::mt19937_64& rng);

  const DetectorConfig& config() const { return cfg_; }

  // Vision tokens [B, P, vision_width] -> E_V_D [B, P, d].
  Tensor encode_vision(const Tensor& vision_tokens) const;
  // Padded ids -> E_T_D and pooled phrase feature.
  DetectorContext encode(const Tensor& vision_features, const std::vector<std::size_t>& ids,
                         const std::vector<std::size_t>& lengths, std::size_t max_len) const;

  Tensor initial_queries(std::size_t batch) const;
  // Runs decoder layers (from, to], 1-based, i.e. from=0 starts at the queries.
  Tensor run_layers(const DetectorContext& ctx, Tensor x, std::size_t from, std::size_t to,
                    std::vector<Tensor>* per_layer = nullptr) const;
  DetectorOutput heads(const DetectorContext& ctx, const Tensor& x) const;

  DetectorOutput forward(const Tensor& vision_tokens, const std::vector<std::size_t>& ids,
                         const std::vector<std::size_t>& lengths, std::size_t max_len,
                         const DecoderHooks* hooks = nullptr,
                         std::vector<Tensor>* per_layer = nullptr) const;
  // Same, with E_V_D supplied directly (substitution mode).
  DetectorOutput forward_features(const Tensor& vision_features,
                                  const std::vector<std::size_t>& ids,
                                  const std::vector<std::size_t>& lengths, std::size_t max_len,
                                  const DecoderHooks* hooks = nullptr,
                                  std::vector<Tensor>* per_layer = nullptr) const;

  // Analytic forward FLOPs for batch, text length W.
  std::uint64_t forward_flops(std::uint64_t batch, std::uint64_t text_len) const;

  void collect(ParamList& out) const;

  Linear vision_in;
  Tensor vision_pos;  // [P, d]
  Tensor text_embed;  // [vocab, d]
  Tensor text_pos;    // [max_text, d]
  LayerNorm text_ln;
  AttentionWeights text_self;
  Tensor query_embed;  // [Q, d]
  std::vector<DetectorLayer> layers;
  LayerNorm final_norm;
  Linear box1;
  Linear box2;
  Linear phrase_proj;
  Linear class_head;  // other / no-object logits

 private:
  DetectorConfig cfg_;
};

std::vector<std::vector<Detection>> to_detections(const DetectorOutput& out);

// Minimum-cost injective assignment of ground truths (columns) to queries
// (rows). Returns, per query, the matched ground-truth index or -1.
struct Assignment {
  std::vector<int> query_to_truth;
  double cost = 0.0;
};
Assignment match_hungarian(const std::vector<double>& costs, std::size_t queries,
                           std::size_t truths);

struct SceneTruth {
  std::vector<Box> boxes;
  std::vector<std::size_t> labels;  // kTargetClass or kOtherClass
  Box target{};
  QueryKind kind = QueryKind::kCategory;
};

struct LossWeights {
  double box = 5.0;
  double phrase = 1.0;
  double background = 0.5;
};

// Set loss averaged over the batch.
Tensor detection_loss(const DetectorOutput& out, const std::vector<SceneTruth>& truth,
                      const LossWeights& weights = {});

struct GroundingRecord {
  std::size_t scene = 0;
  QueryKind kind = QueryKind::kCategory;
  double iou = 0.0;
  bool hit = false;
  double score = 0.0;
};

struct GroundingMetrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_iou = 0.0;
  std::size_t category_count = 0;
  double category_accuracy = 0.0;
  std::size_t spatial_count = 0;
  double spatial_accuracy = 0.0;
  std::vector<GroundingRecord> records;
};

// Top-scoring detection per scene counts as a hit when IoU >= iou_thresh.
GroundingMetrics eval_grounding(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<SceneTruth>& truth, double iou_thresh = 0.5);

std::string records_jsonl(const GroundingMetrics& m);

// Negative-control input used in place of E_V_D: the vision span of an MLLM
// hidden state mapped by one linear layer to width d * factor^2, then spread
// back onto the pre-shuffle grid (depth-to-space) so the result has E_V_D's
// shape [B, (grid_h*factor)*(grid_w*factor), d].
Tensor substitute_vision_features(const HiddenState& h, const TokenLayout& layout,
                                  const Linear& map, std::size_t factor);

}  // namespace led
