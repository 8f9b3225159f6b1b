#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "led/core/nn.hpp"
#include "led/core/tensor.hpp"

namespace led {

enum class Modality : unsigned char { kSystem, kVision, kText };

struct Span {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t end() const { return begin + length; }
};

// Per-position modality tags of a multimodal sequence.
struct TokenLayout {
  std::vector<Modality> tags;
  Span vision;
  Span text;
  std::size_t grid_h = 0;  // aligned vision grid; vision.length == grid_h * grid_w
  std::size_t grid_w = 0;

  // system prefix, then a grid_h x grid_w vision block, then text_len tokens.
  static TokenLayout make(std::size_t system_len, std::size_t grid_h, std::size_t grid_w,
                          std::size_t text_len);
  // Derives spans from a tag list; the vision grid is taken as 1 x |vision|
  // unless given.
  static TokenLayout from_tags(std::vector<Modality> tags, std::size_t grid_h = 0,
                               std::size_t grid_w = 0);
  std::size_t length() const { return tags.size(); }
  void validate() const;
};

struct HiddenState {
  std::size_t layer = 0;  // 0 = embeddings before any decoder layer
  Tensor values;          // [B, seq, d_lm]
};

// Right-padded token ids, ids[b * max_len + t].
struct TextBatch {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  // Per row, first text index whose prediction counts toward the loss.
  std::vector<std::size_t> loss_from;

  std::size_t batch() const { return lengths.size(); }
};

struct MllmConfig {
  std::size_t d_lm = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab = 64;
  std::size_t ffn = 128;
  std::size_t image = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t d_v = 24;
  std::size_t shuffle_r = 2;
  std::size_t projector_in = 128;  // Repeat/Truncate target width
  std::size_t projector_hidden = 128;
  std::size_t system_len = 2;
  double rope_base = 10000.0;

  std::size_t grid() const { return image / patch; }
  std::size_t aligned_grid() const { return grid() / shuffle_r; }
  void validate() const;
};

// Per-patch encoder: linear patch embedding followed by a residual GELU MLP.
// Carries no positional signal, so it commutes with patch permutations.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const MllmConfig& cfg, std::mt19937_64& rng);

  // [B,C,H,W] -> [B, (H/p)(W/p), d_v], patches in row-major order.
  Tensor encode(const Tensor& image) const;
  void collect(ParamList& out) const;
  std::uint64_t flops(std::uint64_t batch, std::uint64_t tokens) const;

  Linear patch_embed;
  Linear fc1;
  Linear fc2;
  std::size_t patch = 4;
};

// Tiles the channel axis to ceil(width/C)*C and keeps the first `width`.
Tensor repeat_truncate_channels(const Tensor& x, std::size_t width);

Tensor patchify(const Tensor& image, std::size_t patch);

struct DecoderLayer {
  LayerNorm ln1;
  AttentionWeights attn;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
};

class MiniMllm {
 public:
  MiniMllm() = default;
  MiniMllm(const MllmConfig& cfg, std::mt19937_64& rng);

  const MllmConfig& config() const { return cfg_; }

  // [B, grid^2, d_v] -> [B, aligned_grid^2, d_lm].
  Tensor align_vision(const Tensor& v) const;
  // System prefix + aligned vision + embedded text -> [B, seq, d_lm].
  Tensor embed(const Tensor& aligned, const TextBatch& text) const;
  TokenLayout layout(std::size_t text_len) const;

  // Hidden states 0..upto (upto defaults to the full depth).
  std::vector<HiddenState> forward_collect(const Tensor& embedded, const TokenLayout& layout,
                                           std::size_t upto) const;
  std::vector<HiddenState> forward_collect(const Tensor& embedded,
                                           const TokenLayout& layout) const {
    return forward_collect(embedded, layout, cfg_.layers);
  }
  // Scaled pre-softmax scores of layer `layer` (1-based) given its input state.
  Tensor layer_scores(std::size_t layer, const Tensor& input) const;

  Tensor logits(const Tensor& last_hidden) const;

  // Image -> hidden states convenience path.
  std::vector<HiddenState> run(const Tensor& image, const TextBatch& text, std::size_t upto,
                               TokenLayout* layout_out = nullptr) const;
  // Next-token loss on the text span.
  Tensor lm_loss(const Tensor& image, const TextBatch& text) const;

  // Analytic forward FLOPs of `layers` decoder layers over `seq` positions.
  std::uint64_t decoder_flops(std::uint64_t batch, std::uint64_t seq, std::size_t layers) const;
  std::uint64_t align_flops(std::uint64_t batch) const;
  std::uint64_t decoder_param_count(std::size_t layers) const;

  void collect_vision(ParamList& out) const { vision.collect(out); }
  void collect_projector(ParamList& out) const;
  void collect_llm(ParamList& out) const;
  void collect(ParamList& out) const;

  VisionEncoder vision;
  Linear proj1;
  Linear proj2;
  Tensor system_prefix;  // [system_len, d_lm]
  Tensor token_embed;    // [vocab, d_lm]
  std::vector<DecoderLayer> layers;
  LayerNorm final_norm;
  Linear head;

 private:
  Tensor run_layer(const DecoderLayer& layer, const Tensor& x) const;
  AttentionOptions attention_options(std::size_t seq) const;

  MllmConfig cfg_;
};

// Pure slicing of a hidden state into (vision, text) segments.
std::pair<Tensor, Tensor> truncate(const HiddenState& h, const TokenLayout& layout);

// Mean cross-entropy of logits [B, seq, V] against next text tokens.
Tensor lm_loss_from_logits(const Tensor& logits, const TokenLayout& layout, const TextBatch& text);

}  // namespace led
