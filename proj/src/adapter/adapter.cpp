#include "led/adapter/adapter.hpp"

#include <cmath>
#include <numeric>

namespace led {

Arch parse_arch(const std::string& text) {
  if (text == "I" || text == "1") return Arch::kI;
  if (text == "II" || text == "2") return Arch::kII;
  if (text == "III" || text == "3") return Arch::kIII;
  if (text == "IV" || text == "4") return Arch::kIV;
  throw ConfigError("unknown adapter architecture '" + text + "'");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::kI:
      return "I";
    case Arch::kII:
      return "II";
    case Arch::kIII:
      return "III";
    case Arch::kIV:
      return "IV";
  }
  return "?";
}

namespace {
std::size_t conv_extent(std::size_t in, const AdapterConfig& cfg) {
  const std::size_t padded = in + 2 * cfg.conv_pad;
  if (cfg.conv_stride == 0 || padded < cfg.conv_kernel) return 0;
  return (padded - cfg.conv_kernel) / cfg.conv_stride + 1;
}
}  // namespace

std::size_t AdapterConfig::prompt_len() const {
  if (!uses_conv()) return grid_h * grid_w;
  return conv_extent(grid_h, *this) * conv_extent(grid_w, *this);
}

void AdapterConfig::validate(std::size_t decoder_depth, std::size_t llm_depth) const {
  if (heads == 0 || d % heads != 0) throw ConfigError("adapter width not divisible by heads");
  if ((d / heads) % 2 != 0) throw ConfigError("adapter head width must be even for rotary use");
  if (uses_text() && d_lm % heads != 0) throw ConfigError("d_lm not divisible by adapter heads");
  if (l_lm > llm_depth) {
    throw ConfigError("l_lm " + std::to_string(l_lm) + " exceeds MLLM depth " +
                      std::to_string(llm_depth));
  }
  if (arch != Arch::kI && (l_d == 0 || l_d > decoder_depth)) {
    throw ConfigError("l_d " + std::to_string(l_d) + " outside 1.." +
                      std::to_string(decoder_depth));
  }
  if (prompt_len() == 0) throw ConfigError("adapter prompt length is zero");
}

FusionState FusionState::init(const AdapterConfig& cfg, std::mt19937_64& rng) {
  if (cfg.prompt_len() == 0) throw ConfigError("adapter prompt length is zero");
  FusionState s;
  const std::size_t k = cfg.conv_kernel;
  if (cfg.uses_conv()) {
    const double fan_in = static_cast<double>(cfg.d_lm * k * k);
    s.conv_kernel = Tensor::randn({cfg.d, cfg.d_lm, k, k}, rng, 1.0 / std::sqrt(fan_in), true);
    s.conv_bias = Tensor::zeros({cfg.d}, true);
  } else {
    s.prompt_proj = Linear::init(cfg.d_lm, cfg.d, rng);
  }
  if (cfg.uses_text()) {
    s.fusion_ln_q = LayerNorm::init(cfg.d_lm);
    s.fusion_ln_kv = LayerNorm::init(cfg.d_lm);
    s.fusion = AttentionWeights::init(cfg.d_lm, rng, 0.5);
  }
  s.w_q = Linear::init(cfg.d, cfg.d, rng, false);
  s.w_k = Linear::init(cfg.d, cfg.d, rng, false);
  s.w_v = Linear::init(cfg.d, cfg.d, rng, false);
  s.gate = Tensor::zeros({1, cfg.heads, 1, 1}, true);
  s.out_proj = Linear::zeros(cfg.d, cfg.d, true);
  return s;
}

void FusionState::collect(ParamList& out, const AdapterConfig& cfg) const {
  if (cfg.uses_conv()) {
    out.emplace_back("adapter.conv.kernel", conv_kernel);
    out.emplace_back("adapter.conv.bias", conv_bias);
  } else {
    prompt_proj.collect(out, "adapter.prompt_proj");
  }
  if (cfg.uses_text()) {
    fusion_ln_q.collect(out, "adapter.fusion.ln_q");
    fusion_ln_kv.collect(out, "adapter.fusion.ln_kv");
    fusion.collect(out, "adapter.fusion.attn");
  }
  w_q.collect(out, "adapter.q");
  w_k.collect(out, "adapter.k");
  w_v.collect(out, "adapter.v");
  out.emplace_back("adapter.gate", gate);
  out_proj.collect(out, "adapter.out");
}

Tensor fuse_text(const PromptInputs& in, const AdapterConfig& cfg, const FusionState& state) {
  if (!in.text.defined()) {
    throw ConfigError("architecture " + to_string(cfg.arch) + " needs text embeddings E_T");
  }
  AttentionOptions opt;
  opt.heads = cfg.heads;
  opt.key_lengths = in.text_lengths;
  Tensor attended = multi_head_attention(state.fusion_ln_q(in.vision), state.fusion_ln_kv(in.text),
                                         state.fusion, opt);
  return add(in.vision, attended);
}

namespace {

Tensor conv_prompts(const Tensor& v, const AdapterConfig& cfg, const FusionState& state) {
  const std::size_t B = v.dim(0);
  Tensor grid = permute(reshape(v, {B, cfg.grid_h, cfg.grid_w, cfg.d_lm}), {0, 3, 1, 2});
  Tensor maps = conv2d(grid, state.conv_kernel, cfg.conv_stride, cfg.conv_pad);
  const std::size_t oh = maps.dim(2), ow = maps.dim(3);
  Tensor tokens = reshape(permute(maps, {0, 2, 3, 1}), {B, oh * ow, cfg.d});
  return add(tokens, state.conv_bias);
}

std::vector<std::size_t> iota_from(std::size_t start, std::size_t count) {
  std::vector<std::size_t> v(count);
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

Tensor make_prompts(const PromptInputs& in, const Tensor* detector_vision,
                    const AdapterConfig& cfg, const FusionState& state) {
  const Tensor& v = in.vision;
  if (!v.defined() || v.rank() != 3 || v.dim(2) != cfg.d_lm) {
    throw ConfigError("E_V_L must be [B, L_v, d_lm]");
  }
  if (v.dim(1) != cfg.grid_h * cfg.grid_w) {
    throw DimensionError("E_V_L length " + std::to_string(v.dim(1)) + " does not factor as the " +
                         std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " grid");
  }
  if (cfg.prompt_len() == 0) throw ConfigError("adapter prompt length is zero");
  switch (cfg.arch) {
    case Arch::kIV:
      return conv_prompts(v, cfg, state);
    case Arch::kII:
    case Arch::kIII:
      return conv_prompts(fuse_text(in, cfg, state), cfg, state);
    case Arch::kI: {
      if (!detector_vision || !detector_vision->defined()) {
        throw ConfigError("architecture I needs the detector image embedding E_V_D");
      }
      Tensor fused = state.prompt_proj(fuse_text(in, cfg, state));
      return zero_init_cross_attn(*detector_vision, fused, state, cfg);
    }
  }
  throw ConfigError("unknown architecture");
}

Tensor segment_weights(const Tensor& e_d_prev, const Tensor& prompts, const FusionState& state,
                       const AdapterConfig& cfg, const CrossAttnOptions& opt) {
  const std::size_t B = e_d_prev.dim(0), T = e_d_prev.dim(1), d = cfg.d, h = cfg.heads;
  if (e_d_prev.rank() != 3 || e_d_prev.dim(2) != d || prompts.rank() != 3 ||
      prompts.dim(2) != d || prompts.dim(0) != B) {
    throw ConfigError("adapter expects [B,T,d] decoder embedding and [B,L,d] prompts with d=" +
                      std::to_string(d) + ", got " + shape_str(e_d_prev.shape()) + " and " +
                      shape_str(prompts.shape()));
  }
  const std::size_t L = prompts.dim(1);
  if (L == 0) throw ConfigError("adapter prompt length is zero");
  const std::size_t dh = d / h;
  Tensor q = reshape(state.w_q(e_d_prev), {B, T, h, dh});
  Tensor k = reshape(concat({state.w_k(prompts), state.w_k(e_d_prev)}, 1), {B, L + T, h, dh});
  q = permute(rope_apply(q, iota_from(L, T), cfg.rope_base), {0, 2, 1, 3});
  k = permute(rope_apply(k, iota_from(0, L + T), cfg.rope_base), {0, 2, 1, 3});
  Tensor scores = mul_scalar(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor prompt_scores = slice(scores, 3, 0, L);
  Tensor prompt_probs;
  if (opt.prompt_mask.empty()) {
    prompt_probs = softmax(prompt_scores, 3);
  } else {
    if (opt.prompt_mask.size() != L) throw DimensionError("prompt mask length differs from L");
    std::vector<unsigned char> allowed(prompt_scores.numel());
    for (std::size_t i = 0; i < allowed.size(); ++i) allowed[i] = opt.prompt_mask[i % L];
    prompt_probs = masked_softmax(prompt_scores, allowed);
  }
  Tensor self_probs = softmax(slice(scores, 3, L, T), 3);
  return concat({mul(prompt_probs, tanh_gate(state.gate)), self_probs}, 3);
}

Tensor zero_init_cross_attn(const Tensor& e_d_prev, const Tensor& prompts,
                            const FusionState& state, const AdapterConfig& cfg,
                            const CrossAttnOptions& opt) {
  Tensor weights = segment_weights(e_d_prev, prompts, state, cfg, opt);
  Tensor v = split_heads(concat({state.w_v(prompts), state.w_v(e_d_prev)}, 1), cfg.heads);
  return add(e_d_prev, state.out_proj(merge_heads(matmul(weights, v))));
}

DecoderHooks inject(const PromptInputs& in, const AdapterConfig& cfg, const FusionState& state) {
  DecoderHooks hooks;
  if (cfg.arch == Arch::kI) {
    hooks.vision = [&in, &cfg, &state](const Tensor& ev) {
      return make_prompts(in, &ev, cfg, state);
    };
    return hooks;
  }
  Tensor prompts = make_prompts(in, nullptr, cfg, state);
  hooks.layer = cfg.l_d;
  hooks.after_layer = [prompts, &cfg, &state](const Tensor& x) {
    return zero_init_cross_attn(x, prompts, state, cfg);
  };
  return hooks;
}

ParamFlops adapter_param_flops(const AdapterConfig& cfg, const AdapterExtents& ext) {
  const std::size_t L = cfg.prompt_len();
  if (L == 0) throw ConfigError("adapter prompt length is zero");
  const std::uint64_t B = ext.batch, d = cfg.d, dl = cfg.d_lm, h = cfg.heads;
  const std::uint64_t Lv = cfg.grid_h * cfg.grid_w, W = ext.text_tokens;
  const std::uint64_t k2 = cfg.conv_kernel * cfg.conv_kernel;
  ParamFlops r;
  std::uint64_t& p = r.params;
  std::uint64_t& f = r.flops;
  if (cfg.uses_text()) {
    p += 2 * 2 * dl + 4 * (dl * dl + dl);
    f += 8 * B * Lv * dl + 8 * B * W * dl + attention_flops(B, Lv, W, dl, h, false) + B * Lv * dl;
  }
  if (cfg.uses_conv()) {
    p += d * dl * k2 + d;
    f += 2 * B * d * L * dl * k2 + B * L * d;
  } else {
    p += dl * d + d;
    f += 2 * B * Lv * dl * d + B * Lv * d;
  }
  p += 3 * d * d + h + d * d + d;
  // Query length is the decoder embedding, or the image embedding for Arch I.
  const std::uint64_t T = cfg.arch == Arch::kI ? ext.vision_tokens : ext.decoder_tokens;
  const std::uint64_t keys = L + T;
  f += 2 * B * T * d * d;                    // W_Q
  f += 2 * 2 * B * keys * d * d;             // W_K, W_V over prompts and self
  f += 3 * B * T * d + 3 * B * keys * d;     // rotary on Q and K
  f += 2 * B * T * keys * d;                 // QK^T
  f += B * h * T * keys;                     // scale
  f += 3 * B * h * T * keys;                 // two segment softmaxes
  f += h + B * h * T * L;                    // tanh(g) and gating
  f += 2 * B * T * keys * d;                 // S~V
  f += 2 * B * T * d * d + B * T * d;        // out_proj
  f += B * T * d;                            // residual
  return r;
}

}  // namespace led
