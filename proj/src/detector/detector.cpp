#include "led/detector/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace led {

double box_iou(const Box& a, const Box& b) {
  const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
  const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
  const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
  const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::string to_string(QueryKind kind) {
  return kind == QueryKind::kCategory ? "category" : "spatial";
}

void DetectorConfig::validate() const {
  if (d % heads != 0) throw ConfigError("detector width must be divisible by heads");
  if (depth == 0 || queries == 0) throw ConfigError("detector depth and queries must be positive");
}

GroundingDetector::GroundingDetector(const DetectorConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d;
  vision_in = Linear::init(cfg_.vision_width, d, rng);
  vision_pos = Tensor::randn({cfg_.vision_tokens, d}, rng, 0.3, true);
  text_embed = Tensor::randn({cfg_.vocab, d}, rng, 0.5, true);
  text_pos = Tensor::randn({cfg_.max_text, d}, rng, 0.3, true);
  text_ln = LayerNorm::init(d);
  text_self = AttentionWeights::init(d, rng, 0.5);
  query_embed = Tensor::randn({cfg_.queries, d}, rng, 1.0, true);
  const double gain = 1.0 / std::sqrt(static_cast<double>(cfg_.depth));
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    DetectorLayer l;
    l.ln_self = LayerNorm::init(d);
    l.self_attn = AttentionWeights::init(d, rng, gain);
    l.ln_vision = LayerNorm::init(d);
    l.vision_attn = AttentionWeights::init(d, rng, gain);
    l.ln_text = LayerNorm::init(d);
    l.text_attn = AttentionWeights::init(d, rng, gain);
    l.ln_ffn = LayerNorm::init(d);
    l.fc1 = Linear::init(d, cfg_.ffn, rng);
    l.fc2 = Linear::init(cfg_.ffn, d, rng, true, gain);
    layers.push_back(std::move(l));
  }
  final_norm = LayerNorm::init(d);
  box1 = Linear::init(d, d, rng);
  box2 = Linear::init(d, 4, rng, true, 0.5);
  phrase_proj = Linear::init(d, d, rng);
  class_head = Linear::init(d, 2, rng, true, 0.5);
}

Tensor GroundingDetector::encode_vision(const Tensor& vision_tokens) const {
  if (vision_tokens.rank() != 3 || vision_tokens.dim(2) != cfg_.vision_width ||
      vision_tokens.dim(1) != cfg_.vision_tokens) {
    throw DimensionError("detector vision input " + shape_str(vision_tokens.shape()) +
                         " does not match configured tokens/width");
  }
  return add(vision_in(vision_tokens), vision_pos);
}

DetectorContext GroundingDetector::encode(const Tensor& vision_features,
                                          const std::vector<std::size_t>& ids,
                                          const std::vector<std::size_t>& lengths,
                                          std::size_t max_len) const {
  const std::size_t B = vision_features.dim(0), d = cfg_.d;
  if (vision_features.rank() != 3 || vision_features.dim(2) != d) {
    throw ConfigError("vision features " + shape_str(vision_features.shape()) +
                      " do not match detector width " + std::to_string(d));
  }
  if (lengths.size() != B || ids.size() != B * max_len) {
    throw DimensionError("text batch does not match vision batch");
  }
  if (max_len == 0 || max_len > cfg_.max_text) throw DimensionError("text length out of range");
  for (std::size_t len : lengths)
    if (len == 0 || len > max_len) throw DimensionError("text row length out of range");
  DetectorContext ctx;
  ctx.vision = vision_features;
  ctx.text_lengths = lengths;
  Tensor t = add(reshape(embedding(text_embed, ids), {B, max_len, d}),
                 slice(text_pos, 0, 0, max_len));
  AttentionOptions opt;
  opt.heads = cfg_.heads;
  opt.key_lengths = &ctx.text_lengths;
  Tensor h = text_ln(t);
  ctx.text = add(t, multi_head_attention(h, h, text_self, opt));
  std::vector<double> w(B * max_len, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < lengths[b]; ++j)
      w[b * max_len + j] = 1.0 / static_cast<double>(lengths[b]);
  ctx.pooled = sum_axis(mul(ctx.text, Tensor({B, max_len, 1}, std::move(w))), 1);
  return ctx;
}

Tensor GroundingDetector::initial_queries(std::size_t batch) const {
  Tensor q = reshape(query_embed, {1, cfg_.queries, cfg_.d});
  return batch == 1 ? q : concat(std::vector<Tensor>(batch, q), 0);
}

Tensor GroundingDetector::run_layers(const DetectorContext& ctx, Tensor x, std::size_t from,
                                     std::size_t to, std::vector<Tensor>* per_layer) const {
  if (from > to || to > cfg_.depth) throw ConfigError("decoder layer range out of bounds");
  AttentionOptions plain;
  plain.heads = cfg_.heads;
  AttentionOptions text_opt = plain;
  text_opt.key_lengths = &ctx.text_lengths;
  for (std::size_t i = from; i < to; ++i) {
    const DetectorLayer& l = layers[i];
    Tensor h = l.ln_self(x);
    x = add(x, multi_head_attention(h, h, l.self_attn, plain));
    x = add(x, multi_head_attention(l.ln_vision(x), ctx.vision, l.vision_attn, plain));
    x = add(x, multi_head_attention(l.ln_text(x), ctx.text, l.text_attn, text_opt));
    x = add(x, l.fc2(gelu(l.fc1(l.ln_ffn(x)))));
    if (per_layer) per_layer->push_back(x);
  }
  return x;
}

DetectorOutput GroundingDetector::heads(const DetectorContext& ctx, const Tensor& x) const {
  const std::size_t B = x.dim(0), d = cfg_.d;
  DetectorOutput out;
  out.embed = x;
  Tensor h = final_norm(x);
  out.boxes = sigmoid(box2(gelu(box1(h))));
  Tensor f = phrase_proj(h);
  Tensor target = mul_scalar(matmul(f, reshape(ctx.pooled, {B, d, 1})),
                             1.0 / std::sqrt(static_cast<double>(d)));
  out.logits = concat({target, class_head(h)}, 2);
  return out;
}

DetectorOutput GroundingDetector::forward_features(const Tensor& vision_features,
                                                   const std::vector<std::size_t>& ids,
                                                   const std::vector<std::size_t>& lengths,
                                                   std::size_t max_len,
                                                   const DecoderHooks* hooks,
                                                   std::vector<Tensor>* per_layer) const {
  Tensor ev = vision_features;
  if (hooks && hooks->vision) {
    Tensor fused = hooks->vision(ev);
    if (fused.shape() != ev.shape()) {
      throw ConfigError("vision hook changed feature shape " + shape_str(ev.shape()) + " -> " +
                        shape_str(fused.shape()));
    }
    ev = fused;
  }
  DetectorContext ctx = encode(ev, ids, lengths, max_len);
  Tensor x = initial_queries(ev.dim(0));
  if (hooks && hooks->after_layer) {
    if (hooks->layer == 0 || hooks->layer > cfg_.depth) {
      throw ConfigError("injection layer " + std::to_string(hooks->layer) + " outside 1.." +
                        std::to_string(cfg_.depth));
    }
    x = run_layers(ctx, x, 0, hooks->layer, per_layer);
    Tensor y = hooks->after_layer(x);
    if (y.shape() != x.shape()) throw ConfigError("adapter output does not match decoder width");
    if (per_layer) per_layer->back() = y;
    x = run_layers(ctx, y, hooks->layer, cfg_.depth, per_layer);
  } else {
    x = run_layers(ctx, x, 0, cfg_.depth, per_layer);
  }
  return heads(ctx, x);
}

DetectorOutput GroundingDetector::forward(const Tensor& vision_tokens,
                                          const std::vector<std::size_t>& ids,
                                          const std::vector<std::size_t>& lengths,
                                          std::size_t max_len, const DecoderHooks* hooks,
                                          std::vector<Tensor>* per_layer) const {
  return forward_features(encode_vision(vision_tokens), ids, lengths, max_len, hooks, per_layer);
}

std::uint64_t GroundingDetector::forward_flops(std::uint64_t batch, std::uint64_t text_len) const {
  const std::uint64_t B = batch, P = cfg_.vision_tokens, W = text_len, Q = cfg_.queries;
  const std::uint64_t d = cfg_.d, h = cfg_.heads;
  std::uint64_t f = 0;
  f += vision_in.flops(B * P) + B * P * d;
  f += B * W * d + 8 * B * W * d + attention_flops(B, W, W, d, h, false) + B * W * d;
  f += 2 * B * W * d;  // pooled mean
  for (const DetectorLayer& l : layers) {
    f += 4 * 8 * B * Q * d + 4 * B * Q * d;
    f += attention_flops(B, Q, Q, d, h, false);
    f += attention_flops(B, Q, P, d, h, false);
    f += attention_flops(B, Q, W, d, h, false);
    f += l.fc1.flops(B * Q) + B * Q * cfg_.ffn + l.fc2.flops(B * Q);
  }
  f += 8 * B * Q * d;
  f += box1.flops(B * Q) + B * Q * d + box2.flops(B * Q) + B * Q * 4;
  f += phrase_proj.flops(B * Q) + 2 * B * Q * d + B * Q + class_head.flops(B * Q);
  return f;
}

void GroundingDetector::collect(ParamList& out) const {
  vision_in.collect(out, "det.vision_in");
  out.emplace_back("det.vision_pos", vision_pos);
  out.emplace_back("det.text_embed", text_embed);
  out.emplace_back("det.text_pos", text_pos);
  text_ln.collect(out, "det.text_ln");
  text_self.collect(out, "det.text_self");
  out.emplace_back("det.queries", query_embed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string pre = "det.layer" + std::to_string(i);
    const DetectorLayer& l = layers[i];
    l.ln_self.collect(out, pre + ".ln_self");
    l.self_attn.collect(out, pre + ".self");
    l.ln_vision.collect(out, pre + ".ln_vision");
    l.vision_attn.collect(out, pre + ".vision");
    l.ln_text.collect(out, pre + ".ln_text");
    l.text_attn.collect(out, pre + ".text");
    l.ln_ffn.collect(out, pre + ".ln_ffn");
    l.fc1.collect(out, pre + ".fc1");
    l.fc2.collect(out, pre + ".fc2");
  }
  final_norm.collect(out, "det.final_norm");
  box1.collect(out, "det.box1");
  box2.collect(out, "det.box2");
  phrase_proj.collect(out, "det.phrase");
  class_head.collect(out, "det.class");
}

std::vector<std::vector<Detection>> to_detections(const DetectorOutput& out) {
  const std::size_t B = out.boxes.dim(0), Q = out.boxes.dim(1), C = out.logits.dim(2);
  std::vector<std::vector<Detection>> all(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t q = 0; q < Q; ++q) {
      Detection det;
      for (std::size_t k = 0; k < 4; ++k) det.box[k] = out.boxes[(b * Q + q) * 4 + k];
      det.phrase_logits.resize(C);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) {
        det.phrase_logits[c] = out.logits[(b * Q + q) * C + c];
        mx = std::max(mx, det.phrase_logits[c]);
      }
      double z = 0.0;
      for (double v : det.phrase_logits) z += std::exp(v - mx);
      det.score = std::exp(det.phrase_logits[kTargetClass] - mx) / z;
      all[b].push_back(std::move(det));
    }
  }
  return all;
}

Assignment match_hungarian(const std::vector<double>& costs, std::size_t queries,
                           std::size_t truths) {
  if (truths > queries) {
    throw UsageError("cannot match " + std::to_string(truths) + " ground truths to " +
                     std::to_string(queries) + " queries");
  }
  if (costs.size() != queries * truths) throw DimensionError("cost matrix size mismatch");
  for (double c : costs)
    if (!std::isfinite(c)) throw NumericError("non-finite matching cost");
  Assignment result;
  result.query_to_truth.assign(queries, -1);
  if (truths == 0) return result;
  // Potentials method on the transposed problem: rows = truths, cols = queries.
  const std::size_t n = truths, m = queries;
  const double inf = std::numeric_limits<double>::infinity();
  auto cost = [&](std::size_t row, std::size_t col) { return costs[(col - 1) * truths + row - 1]; };
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] == 0) continue;
    result.query_to_truth[j - 1] = static_cast<int>(owner[j] - 1);
    result.cost += cost(owner[j], j);
  }
  return result;
}

Tensor detection_loss(const DetectorOutput& out, const std::vector<SceneTruth>& truth,
                      const LossWeights& weights) {
  const std::size_t B = out.boxes.dim(0), Q = out.boxes.dim(1), C = out.logits.dim(2);
  if (truth.size() != B) throw DimensionError("ground truth count does not match batch");
  Tensor logp = reshape(log_softmax(out.logits, 2), {B * Q, C});
  std::vector<double> target_boxes(B * Q * 4, 0.0), box_mask(B * Q * 4, 0.0);
  std::vector<std::size_t> classes(B * Q, kNoObjectClass);
  std::vector<double> class_weight(B * Q, weights.background);
  for (std::size_t b = 0; b < B; ++b) {
    const SceneTruth& t = truth[b];
    const std::size_t G = t.boxes.size();
    std::vector<double> costs(Q * G);
    for (std::size_t q = 0; q < Q; ++q)
      for (std::size_t g = 0; g < G; ++g) {
        double l1 = 0.0;
        for (std::size_t k = 0; k < 4; ++k)
          l1 += std::fabs(out.boxes[(b * Q + q) * 4 + k] - t.boxes[g][k]);
        costs[q * G + g] = weights.box * l1 - weights.phrase * logp[(b * Q + q) * C + t.labels[g]];
      }
    const Assignment a = match_hungarian(costs, Q, G);
    for (std::size_t q = 0; q < Q; ++q) {
      const int g = a.query_to_truth[q];
      if (g < 0) continue;
      for (std::size_t k = 0; k < 4; ++k) {
        target_boxes[(b * Q + q) * 4 + k] = t.boxes[static_cast<std::size_t>(g)][k];
        box_mask[(b * Q + q) * 4 + k] = weights.box;
      }
      classes[b * Q + q] = t.labels[static_cast<std::size_t>(g)];
      class_weight[b * Q + q] = weights.phrase;
    }
  }
  Tensor box_term = sum(mul(abs(sub(out.boxes, Tensor({B, Q, 4}, std::move(target_boxes)))),
                            Tensor({B, Q, 4}, std::move(box_mask))));
  Tensor class_term =
      neg(sum(mul(pick(logp, classes), Tensor({B * Q}, std::move(class_weight)))));
  return mul_scalar(add(box_term, class_term), 1.0 / static_cast<double>(B));
}

GroundingMetrics eval_grounding(const std::vector<std::vector<Detection>>& dets,
                                const std::vector<SceneTruth>& truth, double iou_thresh) {
  if (dets.size() != truth.size()) throw DimensionError("detections and truths differ in count");
  GroundingMetrics m;
  std::size_t hits = 0, cat_hits = 0, sp_hits = 0;
  double iou_sum = 0.0;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    GroundingRecord r;
    r.scene = s;
    r.kind = truth[s].kind;
    if (!dets[s].empty()) {
      const auto best = std::max_element(
          dets[s].begin(), dets[s].end(),
          [](const Detection& a, const Detection& b) { return a.score < b.score; });
      r.iou = box_iou(best->box, truth[s].target);
      r.score = best->score;
    }
    r.hit = r.iou >= iou_thresh;
    hits += r.hit;
    iou_sum += r.iou;
    if (r.kind == QueryKind::kCategory) {
      ++m.category_count;
      cat_hits += r.hit;
    } else {
      ++m.spatial_count;
      sp_hits += r.hit;
    }
    m.records.push_back(r);
  }
  m.count = dets.size();
  auto ratio = [](std::size_t a, std::size_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  m.accuracy = ratio(hits, m.count);
  m.mean_iou = m.count ? iou_sum / static_cast<double>(m.count) : 0.0;
  m.category_accuracy = ratio(cat_hits, m.category_count);
  m.spatial_accuracy = ratio(sp_hits, m.spatial_count);
  return m;
}

std::string records_jsonl(const GroundingMetrics& m) {
  std::ostringstream os;
  for (const GroundingRecord& r : m.records) {
    nlohmann::json j = {{"scene", r.scene}, {"kind", to_string(r.kind)}, {"iou", r.iou},
                        {"hit", r.hit},     {"score", r.score}};
    os << j.dump() << '\n';
  }
  nlohmann::json summary = {{"summary", true},
                            {"count", m.count},
                            {"accuracy", m.accuracy},
                            {"mean_iou", m.mean_iou},
                            {"category_count", m.category_count},
                            {"category_accuracy", m.category_accuracy},
                            {"spatial_count", m.spatial_count},
                            {"spatial_accuracy", m.spatial_accuracy}};
  os << summary.dump() << '\n';
  return os.str();
}

Tensor substitute_vision_features(const HiddenState& h, const TokenLayout& layout,
                                  const Linear& map, std::size_t factor) {
  if (h.values.rank() != 3 || h.values.dim(1) != layout.length()) {
    throw DimensionError("hidden state does not match layout");
  }
  if (layout.vision.length == 0) throw DimensionError("layout has no vision span");
  if (map.in() != h.values.dim(2)) throw ConfigError("substitution map width mismatch");
  if (factor == 0 || map.out() % (factor * factor) != 0) {
    throw ConfigError("substitution map width not divisible by factor^2");
  }
  const std::size_t B = h.values.dim(0), gh = layout.grid_h, gw = layout.grid_w;
  const std::size_t d = map.out() / (factor * factor);
  Tensor x = map(slice(h.values, 1, layout.vision.begin, layout.vision.length));
  Tensor grid = permute(reshape(x, {B, gh, gw, map.out()}), {0, 3, 1, 2});
  Tensor spread = pixel_shuffle(grid, factor);
  return reshape(permute(spread, {0, 2, 3, 1}), {B, gh * gw * factor * factor, d});
}

}  // namespace led
