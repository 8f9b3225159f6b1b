#include "led/mllm/mllm.hpp"

#include <cmath>
#include <numeric>

namespace led {

TokenLayout TokenLayout::make(std::size_t system_len, std::size_t grid_h, std::size_t grid_w,
                              std::size_t text_len) {
  TokenLayout l;
  l.tags.assign(system_len, Modality::kSystem);
  l.tags.insert(l.tags.end(), grid_h * grid_w, Modality::kVision);
  l.tags.insert(l.tags.end(), text_len, Modality::kText);
  l.vision = {system_len, grid_h * grid_w};
  l.text = {system_len + grid_h * grid_w, text_len};
  l.grid_h = grid_h;
  l.grid_w = grid_w;
  return l;
}

TokenLayout TokenLayout::from_tags(std::vector<Modality> tags, std::size_t grid_h,
                                   std::size_t grid_w) {
  TokenLayout l;
  auto span_of = [&](Modality m) {
    Span s;
    bool seen = false;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (tags[i] != m) continue;
      if (!seen) s.begin = i;
      if (seen && i != s.end()) throw ConfigError("modality span is not contiguous");
      seen = true;
      ++s.length;
    }
    return s;
  };
  l.vision = span_of(Modality::kVision);
  l.text = span_of(Modality::kText);
  l.grid_h = grid_h ? grid_h : 1;
  l.grid_w = grid_w ? grid_w : l.vision.length;
  l.tags = std::move(tags);
  l.validate();
  return l;
}

void TokenLayout::validate() const {
  if (vision.end() > tags.size() || text.end() > tags.size()) {
    throw ConfigError("token span exceeds sequence length " + std::to_string(tags.size()));
  }
  const bool overlap = vision.begin < text.end() && text.begin < vision.end();
  if (overlap && vision.length && text.length) throw ConfigError("vision and text spans overlap");
  if (grid_h * grid_w != vision.length) {
    throw ConfigError("vision span " + std::to_string(vision.length) + " does not match grid " +
                      std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
}

void MllmConfig::validate() const {
  if (d_lm % heads != 0) throw ConfigError("d_lm must be divisible by heads");
  if ((d_lm / heads) % 2 != 0) throw ConfigError("head width must be even for rotary embedding");
  if (image % patch != 0) throw ConfigError("image size must be divisible by patch");
  if (grid() % shuffle_r != 0) throw ConfigError("vision grid must be divisible by shuffle_r");
  if (layers == 0) throw ConfigError("decoder depth must be positive");
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 4) throw DimensionError("image must be [B,C,H,W], got " + shape_str(image.shape()));
  const std::size_t B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  if (H % patch != 0 || W % patch != 0) {
    throw DimensionError("image " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch;
  Tensor x = reshape(image, {B, C, gh, patch, gw, patch});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  return reshape(x, {B, gh * gw, C * patch * patch});
}

VisionEncoder::VisionEncoder(const MllmConfig& cfg, std::mt19937_64& rng) : patch(cfg.patch) {
  patch_embed = Linear::init(cfg.channels * cfg.patch * cfg.patch, cfg.d_v, rng);
  fc1 = Linear::init(cfg.d_v, 2 * cfg.d_v, rng);
  fc2 = Linear::init(2 * cfg.d_v, cfg.d_v, rng, true, 0.5);
}

Tensor VisionEncoder::encode(const Tensor& image) const {
  Tensor t = patch_embed(patchify(image, patch));
  return add(t, fc2(gelu(fc1(t))));
}

void VisionEncoder::collect(ParamList& out) const {
  patch_embed.collect(out, "mllm.vision.patch");
  fc1.collect(out, "mllm.vision.fc1");
  fc2.collect(out, "mllm.vision.fc2");
}

std::uint64_t VisionEncoder::flops(std::uint64_t batch, std::uint64_t tokens) const {
  const std::uint64_t rows = batch * tokens;
  return patch_embed.flops(rows) + fc1.flops(rows) + rows * fc1.out() + fc2.flops(rows) +
         rows * fc2.out();
}

Tensor repeat_truncate_channels(const Tensor& x, std::size_t width) {
  const std::size_t axis = x.rank() - 1;
  const std::size_t c = x.dim(axis);
  if (c == width) return x;
  const std::size_t copies = (width + c - 1) / c;
  Tensor tiled = copies == 1 ? x : concat(std::vector<Tensor>(copies, x), axis);
  return slice(tiled, axis, 0, width);
}

MiniMllm::MiniMllm(const MllmConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  vision = VisionEncoder(cfg_, rng);
  proj1 = Linear::init(cfg_.projector_in, cfg_.projector_hidden, rng);
  proj2 = Linear::init(cfg_.projector_hidden, cfg_.d_lm, rng);
  system_prefix = Tensor::randn({cfg_.system_len, cfg_.d_lm}, rng, 0.5, true);
  token_embed = Tensor::randn({cfg_.vocab, cfg_.d_lm}, rng, 0.5, true);
  const double depth_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    DecoderLayer layer;
    layer.ln1 = LayerNorm::init(cfg_.d_lm);
    layer.attn = AttentionWeights::init(cfg_.d_lm, rng, depth_gain);
    layer.ln2 = LayerNorm::init(cfg_.d_lm);
    layer.fc1 = Linear::init(cfg_.d_lm, cfg_.ffn, rng);
    layer.fc2 = Linear::init(cfg_.ffn, cfg_.d_lm, rng, true, depth_gain);
    layers.push_back(std::move(layer));
  }
  final_norm = LayerNorm::init(cfg_.d_lm);
  head = Linear::init(cfg_.d_lm, cfg_.vocab, rng);
}

Tensor MiniMllm::align_vision(const Tensor& v) const {
  const std::size_t B = v.dim(0), N = v.dim(1), C = v.dim(2);
  const std::size_t g = cfg_.grid(), r = cfg_.shuffle_r;
  if (N != g * g) {
    throw DimensionError("align_vision expects " + std::to_string(g * g) + " tokens, got " +
                         std::to_string(N));
  }
  if (proj1.in() != cfg_.projector_in) {
    throw ConfigError("projector input width " + std::to_string(proj1.in()) +
                      " differs from configured " + std::to_string(cfg_.projector_in));
  }
  Tensor grid = permute(reshape(v, {B, g, g, C}), {0, 3, 1, 2});
  Tensor shuffled = pixel_unshuffle(grid, r);
  const std::size_t a = g / r, cr = C * r * r;
  Tensor tokens = reshape(permute(shuffled, {0, 2, 3, 1}), {B, a * a, cr});
  tokens = repeat_truncate_channels(tokens, cfg_.projector_in);
  return proj2(gelu(proj1(tokens)));
}

Tensor MiniMllm::embed(const Tensor& aligned, const TextBatch& text) const {
  const std::size_t B = aligned.dim(0);
  if (text.batch() != B) throw DimensionError("text batch does not match image batch");
  std::vector<Tensor> parts;
  Tensor prefix = reshape(system_prefix, {1, cfg_.system_len, cfg_.d_lm});
  parts.push_back(B == 1 ? prefix : concat(std::vector<Tensor>(B, prefix), 0));
  parts.push_back(aligned);
  if (text.max_len > 0) {
    parts.push_back(reshape(embedding(token_embed, text.ids), {B, text.max_len, cfg_.d_lm}));
  }
  return concat(parts, 1);
}

TokenLayout MiniMllm::layout(std::size_t text_len) const {
  const std::size_t a = cfg_.aligned_grid();
  return TokenLayout::make(cfg_.system_len, a, a, text_len);
}

AttentionOptions MiniMllm::attention_options(std::size_t seq) const {
  AttentionOptions opt;
  opt.heads = cfg_.heads;
  opt.causal = true;
  std::vector<std::size_t> pos(seq);
  std::iota(pos.begin(), pos.end(), 0);
  opt.q_positions = pos;
  opt.k_positions = pos;
  opt.rope_base = cfg_.rope_base;
  return opt;
}

Tensor MiniMllm::run_layer(const DecoderLayer& layer, const Tensor& x) const {
  Tensor h = layer.ln1(x);
  Tensor y = add(x, multi_head_attention(h, h, layer.attn, attention_options(x.dim(1))));
  return add(y, layer.fc2(gelu(layer.fc1(layer.ln2(y)))));
}

std::vector<HiddenState> MiniMllm::forward_collect(const Tensor& embedded,
                                                   const TokenLayout& layout,
                                                   std::size_t upto) const {
  layout.validate();
  if (embedded.rank() != 3 || embedded.dim(1) != layout.length() || embedded.dim(2) != cfg_.d_lm) {
    throw DimensionError("sequence " + shape_str(embedded.shape()) + " does not match layout of " +
                         std::to_string(layout.length()) + " positions");
  }
  if (upto > cfg_.layers) throw ConfigError("requested layer beyond decoder depth");
  std::vector<HiddenState> states;
  states.push_back({0, embedded});
  Tensor x = embedded;
  for (std::size_t i = 0; i < upto; ++i) {
    x = run_layer(layers[i], x);
    states.push_back({i + 1, x});
  }
  return states;
}

Tensor MiniMllm::layer_scores(std::size_t layer, const Tensor& input) const {
  if (layer == 0 || layer > cfg_.layers) throw ConfigError("layer index out of range");
  Tensor h = layers[layer - 1].ln1(input);
  return attention_scores(h, h, layers[layer - 1].attn, attention_options(input.dim(1)));
}

Tensor MiniMllm::logits(const Tensor& last_hidden) const { return head(final_norm(last_hidden)); }

std::vector<HiddenState> MiniMllm::run(const Tensor& image, const TextBatch& text,
                                       std::size_t upto, TokenLayout* layout_out) const {
  const TokenLayout l = layout(text.max_len);
  if (layout_out) *layout_out = l;
  return forward_collect(embed(align_vision(vision.encode(image)), text), l, upto);
}

Tensor MiniMllm::lm_loss(const Tensor& image, const TextBatch& text) const {
  TokenLayout l;
  auto states = run(image, text, cfg_.layers, &l);
  return lm_loss_from_logits(logits(states.back().values), l, text);
}

std::pair<Tensor, Tensor> truncate(const HiddenState& h, const TokenLayout& layout) {
  layout.validate();
  if (layout.vision.length == 0 || layout.text.length == 0) {
    throw ConfigError("truncate needs non-empty vision and text spans");
  }
  if (h.values.dim(1) != layout.length()) {
    throw DimensionError("hidden state length does not match layout");
  }
  return {slice(h.values, 1, layout.vision.begin, layout.vision.length),
          slice(h.values, 1, layout.text.begin, layout.text.length)};
}

Tensor lm_loss_from_logits(const Tensor& logits, const TokenLayout& layout,
                           const TextBatch& text) {
  const std::size_t B = logits.dim(0), S = logits.dim(1), V = logits.dim(2);
  if (layout.text.length == 0 || layout.text.begin == 0) {
    throw ConfigError("lm_loss needs a text span preceded by context");
  }
  if (S != layout.length() || text.batch() != B || text.max_len != layout.text.length) {
    throw DimensionError("logits do not match layout/text batch");
  }
  std::vector<std::size_t> targets(B * S, 0);
  std::vector<double> weight(B * S, 0.0);
  std::size_t counted = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t from = text.loss_from.empty() ? 0 : text.loss_from[b];
    for (std::size_t j = from; j < text.lengths[b]; ++j) {
      const std::size_t row = b * S + layout.text.begin + j - 1;
      const std::size_t id = text.ids[b * text.max_len + j];
      if (id >= V) throw UsageError("token id beyond vocabulary");
      targets[row] = id;
      weight[row] = 1.0;
      ++counted;
    }
  }
  if (counted == 0) throw ConfigError("lm_loss found no text targets");
  for (double& w : weight) w /= static_cast<double>(counted);
  Tensor logp = pick(reshape(log_softmax(logits, 2), {B * S, V}), targets);
  return neg(sum(mul(logp, Tensor({B * S}, std::move(weight)))));
}

std::uint64_t MiniMllm::decoder_flops(std::uint64_t batch, std::uint64_t seq,
                                      std::size_t count) const {
  const std::uint64_t rows = batch * seq, d = cfg_.d_lm;
  std::uint64_t per_layer = 0;
  per_layer += 2 * 8 * rows * d;  // two layer norms
  per_layer += attention_flops(batch, seq, seq, d, cfg_.heads, true);
  per_layer += 2 * rows * d;  // residual adds
  per_layer += 2 * rows * d * cfg_.ffn + rows * cfg_.ffn;  // fc1
  per_layer += rows * cfg_.ffn;                           // gelu
  per_layer += 2 * rows * cfg_.ffn * d + rows * d;        // fc2
  return per_layer * count;
}

std::uint64_t MiniMllm::align_flops(std::uint64_t batch) const {
  const std::uint64_t a = cfg_.aligned_grid();
  const std::uint64_t rows = batch * a * a;
  return proj1.flops(rows) + rows * proj1.out() + proj2.flops(rows);
}

std::uint64_t MiniMllm::decoder_param_count(std::size_t count) const {
  ParamList p;
  for (std::size_t i = 0; i < count && i < layers.size(); ++i) {
    const std::string pre = "l";
    layers[i].ln1.collect(p, pre);
    layers[i].attn.collect(p, pre);
    layers[i].ln2.collect(p, pre);
    layers[i].fc1.collect(p, pre);
    layers[i].fc2.collect(p, pre);
  }
  return param_count(p);
}

void MiniMllm::collect_projector(ParamList& out) const {
  proj1.collect(out, "projector.fc1");
  proj2.collect(out, "projector.fc2");
}

void MiniMllm::collect_llm(ParamList& out) const {
  out.emplace_back("mllm.system", system_prefix);
  out.emplace_back("mllm.embed", token_embed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string pre = "mllm.layer" + std::to_string(i);
    layers[i].ln1.collect(out, pre + ".ln1");
    layers[i].attn.collect(out, pre + ".attn");
    layers[i].ln2.collect(out, pre + ".ln2");
    layers[i].fc1.collect(out, pre + ".fc1");
    layers[i].fc2.collect(out, pre + ".fc2");
  }
  final_norm.collect(out, "mllm.final_norm");
  head.collect(out, "mllm.head");
}

void MiniMllm::collect(ParamList& out) const {
  collect_vision(out);
  collect_projector(out);
  collect_llm(out);
}

}  // namespace led
