#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "led/core/nn.hpp"
#include "led/detector/detector.hpp"

namespace led {

enum class Arch : unsigned char { kI = 1, kII = 2, kIII = 3, kIV = 4 };
Arch parse_arch(const std::string& text);
std::string to_string(Arch arch);

struct AdapterConfig {
  Arch arch = Arch::kIV;
  std::size_t l_lm = 2;
  std::size_t l_d = 6;
  std::size_t heads = 4;
  std::size_t d = 64;     // detector width
  std::size_t d_lm = 64;  // MLLM width
  std::size_t grid_h = 4;  // aligned vision grid of E_V_L
  std::size_t grid_w = 4;
  std::size_t conv_kernel = 3;
  std::size_t conv_stride = 2;
  std::size_t conv_pad = 1;
  double rope_base = 10000.0;

  bool uses_conv() const { return arch != Arch::kI; }
  bool uses_text() const { return arch != Arch::kIV; }
  // Number of adaptation prompts L.
  std::size_t prompt_len() const;
  // Checks invariants against the host depth and MLLM depth.
  void validate(std::size_t decoder_depth, std::size_t llm_depth) const;
};

struct FusionState {
  // Prompt convolution (Arch II-IV): [d, d_lm, k, k] + bias [d].
  Tensor conv_kernel;
  Tensor conv_bias;
  // Prompt projection for Arch I: d_lm -> d.
  Linear prompt_proj;
  // Text-guided image fusion (Arch I-III): E_V_L attends to E_T, residually.
  LayerNorm fusion_ln_q;
  LayerNorm fusion_ln_kv;
  AttentionWeights fusion;
  // Zero-initialized cross-attention.
  Linear w_q;
  Linear w_k;
  Linear w_v;
  Tensor gate;  // [1, h, 1, 1], zero at construction
  Linear out_proj;  // zero at construction

  static FusionState init(const AdapterConfig& cfg, std::mt19937_64& rng);
  void collect(ParamList& out, const AdapterConfig& cfg) const;
};

// MLLM-side inputs of the adapter.
struct PromptInputs {
  Tensor vision;  // E_V_L [B, L_v, d_lm]
  Tensor text;    // E_T [B, T_t, d_lm]; required unless Arch IV
  const std::vector<std::size_t>* text_lengths = nullptr;
};

// Adaptation prompts. Arch II-IV return A_P [B, L, d]; Arch I returns the
// gated, fused detector image embedding (same shape as `detector_vision`).
Tensor make_prompts(const PromptInputs& in, const Tensor* detector_vision,
                    const AdapterConfig& cfg, const FusionState& state);

// Text-guided image fusion block on its own (identity when fusion.o == 0).
Tensor fuse_text(const PromptInputs& in, const AdapterConfig& cfg, const FusionState& state);

struct CrossAttnOptions {
  // Per prompt column, 0 = masked; empty = all visible. Shared over the batch.
  std::vector<unsigned char> prompt_mask;
};

// E_D_prev + out_proj(S~ V) where S~ is tanh(g)-scaled softmax over the
// prompt columns concatenated with softmax over the self columns.
Tensor zero_init_cross_attn(const Tensor& e_d_prev, const Tensor& prompts,
                            const FusionState& state, const AdapterConfig& cfg,
                            const CrossAttnOptions& opt = {});

// Attention weights S~ [B, h, T, L+T] of zero_init_cross_attn.
Tensor segment_weights(const Tensor& e_d_prev, const Tensor& prompts, const FusionState& state,
                       const AdapterConfig& cfg, const CrossAttnOptions& opt = {});

// Decoder hooks that route the adapter into a detector pass. Arch II-IV
// rewrite the decoder embedding after layer l_d; Arch I rewrites E_V_D. The
// inputs must outlive the hooks.
DecoderHooks inject(const PromptInputs& in, const AdapterConfig& cfg, const FusionState& state);

struct AdapterExtents {
  std::size_t batch = 1;
  std::size_t decoder_tokens = 4;  // detector queries T
  std::size_t text_tokens = 8;     // E_T length
  std::size_t vision_tokens = 64;  // detector image tokens (Arch I query length)
};

struct ParamFlops {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// Analytic parameter count and forward FLOPs of one adapter application.
ParamFlops adapter_param_flops(const AdapterConfig& cfg, const AdapterExtents& ext);

}  // namespace led
