#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "led/core/ops.hpp"
#include "led/core/tensor.hpp"

namespace led {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]; may be undefined

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true,
                     double gain = 1.0);
  static Linear zeros(std::size_t in, std::size_t out, bool bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }
  void collect(ParamList& out, const std::string& prefix) const;
  std::uint64_t flops(std::uint64_t rows) const;
  std::uint64_t param_count() const { return w.numel() + (b.defined() ? b.numel() : 0); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
  std::uint64_t param_count() const { return gamma.numel() + beta.numel(); }
};

struct AttentionWeights {
  Linear q, k, v, o;

  static AttentionWeights init(std::size_t dim, std::mt19937_64& rng, double out_gain = 1.0);
  void collect(ParamList& out, const std::string& prefix) const;
  std::uint64_t param_count() const {
    return q.param_count() + k.param_count() + v.param_count() + o.param_count();
  }
};

// Boolean attention mask [B, h, Tq, Tk] (1 = attend).
std::vector<unsigned char> attention_mask(std::size_t batch, std::size_t heads, std::size_t tq,
                                          std::size_t tk,
                                          const std::vector<std::size_t>* key_lengths,
                                          bool causal);

struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;
  // Valid key count per batch row (right padding); null = all valid.
  const std::vector<std::size_t>* key_lengths = nullptr;
  // Rotary positions for queries / keys; applied when both are set.
  std::optional<std::vector<std::size_t>> q_positions;
  std::optional<std::vector<std::size_t>> k_positions;
  double rope_base = 10000.0;
};

// Scaled dot-product multi-head attention: out-proj(softmax(QK^T/sqrt(d_h)) V).
Tensor multi_head_attention(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                            const AttentionOptions& opt);

// Raw scaled scores QK^T/sqrt(d_h) as [B, h, Tq, Tk] (post-rotary, pre-mask).
Tensor attention_scores(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                        const AttentionOptions& opt);

// Analytic FLOPs of multi_head_attention for the given extents.
std::uint64_t attention_flops(std::uint64_t batch, std::uint64_t tq, std::uint64_t tk,
                              std::uint64_t dim, std::uint64_t heads, bool rope);

// [B,T,d] -> [B,h,T,d/h]
Tensor split_heads(const Tensor& x, std::size_t heads);
// [B,h,T,d_h] -> [B,T,h*d_h]
Tensor merge_heads(const Tensor& x);

std::uint64_t param_count(const ParamList& params);

}  // namespace led
