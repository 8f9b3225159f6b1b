#include "led/harness/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "led/core/checkpoint.hpp"

namespace led {

namespace {

constexpr std::size_t kEvalChunk = 100;

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<std::size_t> rows(order_.begin() + pos_, order_.begin() + pos_ + batch_);
    pos_ += batch_;
    return rows;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

std::vector<std::vector<std::size_t>> chunks(std::size_t n, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += size) {
    out.emplace_back(std::min(size, n - b));
    std::iota(out.back().begin(), out.back().end(), b);
  }
  return out;
}

std::vector<Tensor> tensors_of(const ParamList& p) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : p) out.push_back(t);
  return out;
}

double squared_grad_norm(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const auto& t : ts)
    if (t.has_grad())
      for (double g : t.grad()) s += g * g;
  return s;
}

void set_requires_grad(const std::vector<Tensor>& ts, bool value) {
  for (Tensor t : ts) t.set_requires_grad(value);
}

Linear clone(const Linear& l) {
  Linear c;
  c.w = l.w.clone();
  if (l.b.defined()) c.b = l.b.clone();
  return c;
}

// Rows `rows` of a [N, ...] constant table as [rows, tail...].
Tensor gather(const Tensor& table, const std::vector<std::size_t>& rows) {
  Shape shape = table.shape();
  const std::size_t n = shape[0];
  Tensor flat = reshape(table, {n, table.numel() / n});
  shape[0] = rows.size();
  return reshape(embedding(flat, rows), shape);
}

Tensor stack(const std::vector<Tensor>& parts) { return concat(parts, 0); }

TextBatch query_batch(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<std::size_t>> text;
  for (std::size_t r : rows) text.push_back(scenes.at(r).query.tokens);
  return make_text_batch(text);
}

// "bos find <phrase>" as MLLM text for the text-guided architectures.
TextBatch prompt_batch(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<std::size_t>> text;
  for (std::size_t r : rows) {
    auto t = instruction_tokens(scenes.at(r));
    t.resize(instruction_answer_start(scenes.at(r)) - 1);
    text.push_back(std::move(t));
  }
  return make_text_batch(text);
}

std::vector<SceneTruth> truths(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& rows) {
  std::vector<SceneTruth> out;
  for (std::size_t r : rows) out.push_back(scenes.at(r).truth());
  return out;
}

// Vision encoder outputs for every scene, computed without recording.
Tensor encode_all(const VisionEncoder& enc, const std::vector<SyntheticScene>& scenes) {
  NoGradGuard guard;
  std::vector<Tensor> parts;
  for (const auto& rows : chunks(scenes.size(), kEvalChunk)) parts.push_back(enc.encode(stack_images(scenes, rows)));
  return stack(parts);
}

void check_finite(const Tensor& loss, std::size_t step) {
  if (!std::isfinite(loss.item())) {
    throw TrainingAborted(step, "loss is not finite (" + std::to_string(loss.item()) + ")");
  }
}

struct Groups {
  std::vector<ParamGroup> trained;
  std::vector<Tensor> frozen;
};

void add_group(Groups& g, const ParamList& p, bool train, double lr) {
  auto ts = tensors_of(p);
  set_requires_grad(ts, train);
  if (train) {
    g.trained.push_back({ts, lr});
  } else {
    g.frozen.insert(g.frozen.end(), ts.begin(), ts.end());
  }
}

double trained_norm(const Groups& g) {
  double s = 0.0;
  for (const auto& grp : g.trained) s += squared_grad_norm(grp.params);
  return std::sqrt(s);
}

template <class LossFn>
void run_loop(const TrainConfig& t, Groups& groups, std::size_t n, std::uint64_t seed,
              LossFn&& loss_fn, StageResult& result) {
  std::vector<ParamGroup> to_optimise;
  for (const auto& grp : groups.trained) if (grp.lr > 0.0) to_optimise.push_back(grp);
  Optimizer opt(t.optimizer, to_optimise, t.steps, t.clip);
  BatchSampler sampler(n, t.batch, seed);
  for (std::size_t step = 0; step < t.steps; ++step) {
    const auto rows = sampler.next();
    Tensor loss = loss_fn(rows);
    check_finite(loss, step);
    StepRecord rec;
    rec.step = step;
    rec.loss = loss.item();
    rec.lr_scale = opt.current_scale();
    backward(loss);
    rec.trained_grad_norm = trained_norm(groups);
    rec.frozen_grad_norm = std::sqrt(squared_grad_norm(groups.frozen));
    if (!std::isfinite(rec.trained_grad_norm)) throw TrainingAborted(step, "gradient is not finite");
    result.max_frozen_grad_norm = std::max(result.max_frozen_grad_norm, rec.frozen_grad_norm);
    opt.step();
    for (const auto& grp : groups.trained)
      for (Tensor p : grp.params) p.clear_grad();
    result.steps.push_back(rec);
  }
}

// Mean of a per-batch loss over all rows of `scenes`, weighted by batch size.
template <class LossFn>
double mean_loss(std::size_t n, LossFn&& loss_fn) {
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& rows : chunks(n, kEvalChunk)) total += loss_fn(rows).item() * static_cast<double>(rows.size());
  return total / static_cast<double>(n);
}

std::vector<SyntheticScene> validation_mix(const Dataset& data, std::size_t per_split) {
  std::vector<SyntheticScene> out;
  for (const auto* s : {&data.val_category, &data.val_spatial})
    out.insert(out.end(), s->begin(), s->begin() + static_cast<std::ptrdiff_t>(std::min(per_split, s->size())));
  return out;
}

}  // namespace

TrainingAborted::TrainingAborted(std::size_t step, const std::string& what)
    : NumericError("training aborted at step " + std::to_string(step) + ": " + what), step_(step) {}

Dataset Dataset::generate(const ExperimentConfig& cfg) {
  SceneOptions opt;
  opt.canvas = cfg.mllm.image;
  Dataset d;
  d.pretrain = generate_scenes(cfg.data.seed + 1, cfg.data.pretrain_scenes, Split::kTrain, opt);
  d.train = generate_scenes(cfg.data.seed, cfg.data.train_scenes, Split::kTrain, opt);
  d.val_category = generate_scenes(cfg.data.seed, cfg.data.eval_scenes, Split::kValCategory, opt);
  d.val_spatial = generate_scenes(cfg.data.seed, cfg.data.eval_scenes, Split::kValSpatial, opt);
  return d;
}

const std::vector<SyntheticScene>& Dataset::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kValCategory: return val_category;
    case Split::kValSpatial: return val_spatial;
  }
  return train;
}

ModelSet::ModelSet(const ExperimentConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.init_seed);
  mllm = MiniMllm(cfg.mllm, rng);
  detector = GroundingDetector(cfg.detector, rng);
}

ParamList ModelSet::params() const {
  ParamList p;
  mllm.collect(p);
  detector.collect(p);
  return p;
}

void ModelSet::set_trainable(const TrainConfig& t) const {
  ParamList v, pr, l, d;
  mllm.collect_vision(v);
  mllm.collect_projector(pr);
  mllm.collect_llm(l);
  detector.collect(d);
  set_requires_grad(tensors_of(v), t.train_vision);
  set_requires_grad(tensors_of(pr), t.train_projector);
  set_requires_grad(tensors_of(l), t.train_llm);
  set_requires_grad(tensors_of(d), t.train_detector);
}

GroundingMetrics evaluate_detector(const ModelSet& models, const std::vector<SyntheticScene>& scenes,
                                   double iou_threshold) {
  NoGradGuard guard;
  std::vector<std::vector<Detection>> dets;
  for (const auto& rows : chunks(scenes.size(), kEvalChunk)) {
    const TextBatch q = query_batch(scenes, rows);
    auto out = models.detector.forward(models.mllm.vision.encode(stack_images(scenes, rows)), q.ids,
                                       q.lengths, q.max_len);
    for (auto& d : to_detections(out)) dets.push_back(std::move(d));
  }
  std::vector<std::size_t> all(scenes.size());
  std::iota(all.begin(), all.end(), 0);
  return eval_grounding(dets, truths(scenes, all), iou_threshold);
}

StageResult pretrain_detector(ModelSet& models, const Dataset& data, const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.stage0;
  t.validate();
  StageResult result;
  result.stage = 0;
  Groups groups;
  ParamList v, pr, l, d;
  models.mllm.collect_vision(v);
  models.mllm.collect_projector(pr);
  models.mllm.collect_llm(l);
  models.detector.collect(d);
  add_group(groups, v, t.train_vision, t.lr_vision);
  add_group(groups, d, t.train_detector, t.lr_detector);
  add_group(groups, pr, false, 0.0);
  add_group(groups, l, false, 0.0);
  const auto val = validation_mix(data, 200);
  auto loss_on = [&](const std::vector<SyntheticScene>& scenes) {
    return [&](const std::vector<std::size_t>& rows) {
      const TextBatch q = query_batch(scenes, rows);
      Tensor vf = models.mllm.vision.encode(stack_images(scenes, rows));
      return detection_loss(models.detector.forward(vf, q.ids, q.lengths, q.max_len), truths(scenes, rows));
    };
  };
  result.initial_val_loss = mean_loss(val.size(), loss_on(val));
  run_loop(t, groups, data.pretrain.size(), cfg.init_seed + 101, loss_on(data.pretrain), result);
  result.final_val_loss = mean_loss(val.size(), loss_on(val));
  result.val_category = evaluate_detector(models, data.val_category, cfg.iou_threshold);
  result.val_spatial = evaluate_detector(models, data.val_spatial, cfg.iou_threshold);
  set_requires_grad(groups.frozen, false);
  for (const auto& g : groups.trained) set_requires_grad(g.params, false);
  return result;
}

StageResult train_mllm(ModelSet& models, const Dataset& data, const ExperimentConfig& cfg, std::size_t stage) {
  if (stage != 1 && stage != 2) throw ConfigError("MLLM training covers stages 1 and 2");
  const TrainConfig& t = cfg.stage(stage);
  t.validate();
  StageResult result;
  result.stage = stage;
  Groups groups;
  ParamList v, pr, l, d;
  models.mllm.collect_vision(v);
  models.mllm.collect_projector(pr);
  models.mllm.collect_llm(l);
  models.detector.collect(d);
  add_group(groups, pr, t.train_projector, t.lr_projector);
  add_group(groups, l, t.train_llm, t.lr_llm);
  add_group(groups, v, false, 0.0);
  add_group(groups, d, false, 0.0);
  const auto val = validation_mix(data, 200);
  const Tensor train_vf = encode_all(models.mllm.vision, data.pretrain);
  const Tensor val_vf = encode_all(models.mllm.vision, val);
  auto loss_on = [&](const std::vector<SyntheticScene>& scenes, const Tensor& vf) {
    return [&, stage](const std::vector<std::size_t>& rows) {
      std::vector<std::vector<std::size_t>> text;
      std::vector<std::size_t> from;
      for (std::size_t r : rows) {
        if (stage == 1) {
          text.push_back(scenes.at(r).caption);
          from.push_back(1);
        } else {
          text.push_back(instruction_tokens(scenes.at(r)));
          from.push_back(instruction_answer_start(scenes.at(r)));
        }
      }
      const TextBatch tb = make_text_batch(text, from);
      const MiniMllm& m = models.mllm;
      Tensor emb = m.embed(m.align_vision(gather(vf, rows)), tb);
      const TokenLayout layout = m.layout(tb.max_len);
      auto states = m.forward_collect(emb, layout);
      return lm_loss_from_logits(m.logits(states.back().values), layout, tb);
    };
  };
  result.initial_val_loss = mean_loss(val.size(), loss_on(val, val_vf));
  run_loop(t, groups, data.pretrain.size(), cfg.init_seed + 1000 * stage, loss_on(data.pretrain, train_vf), result);
  result.final_val_loss = mean_loss(val.size(), loss_on(val, val_vf));
  for (const auto& g : groups.trained) set_requires_grad(g.params, false);
  return result;
}

std::string to_string(Stage3Variant v) { return v == Stage3Variant::kFusion ? "fusion" : "substitute"; }

struct Stage3Session::Impl {
  struct SplitCache {
    const std::vector<SyntheticScene>* scenes = nullptr;
    Tensor vision;   // shared encoder tokens [N, P, d_v]
    Tensor e_v_d;    // [N, P, d]
    Tensor text;     // [N, W, d]
    Tensor pooled;   // [N, d]
    Tensor x_ld;     // decoder state after the injection layer [N, Q, d]
    std::vector<std::size_t> text_lengths;
  };

  const ModelSet& models;
  const Dataset& data;
  ExperimentConfig cfg;
  std::size_t l_d;
  SplitCache caches[3];

  Impl(const ModelSet& m, const Dataset& d, const ExperimentConfig& config)
      : models(m), data(d), cfg(config), l_d(config.adapter.l_d) {
    NoGradGuard guard;
    for (Split s : {Split::kTrain, Split::kValCategory, Split::kValSpatial}) {
      SplitCache& c = caches[static_cast<int>(s)];
      c.scenes = &data.split(s);
      c.vision = encode_all(models.mllm.vision, *c.scenes);
      std::vector<Tensor> ev, tx, po, xs;
      std::size_t width = 0;
      for (const auto& sc : *c.scenes) width = std::max(width, sc.query.tokens.size());
      for (const auto& rows : chunks(c.scenes->size(), kEvalChunk)) {
        const TextBatch q = query_batch(*c.scenes, rows);
        std::vector<std::size_t> ids;
        for (std::size_t b = 0; b < rows.size(); ++b) {
          for (std::size_t j = 0; j < width; ++j) ids.push_back(j < q.max_len ? q.ids[b * q.max_len + j] : 0);
        }
        DetectorContext ctx = models.detector.encode(models.detector.encode_vision(gather(c.vision, rows)), ids,
                                                     q.lengths, width);
        xs.push_back(models.detector.run_layers(ctx, models.detector.initial_queries(rows.size()), 0, l_d));
        ev.push_back(ctx.vision);
        tx.push_back(ctx.text);
        po.push_back(ctx.pooled);
        c.text_lengths.insert(c.text_lengths.end(), q.lengths.begin(), q.lengths.end());
      }
      c.e_v_d = stack(ev);
      c.text = stack(tx);
      c.pooled = stack(po);
      c.x_ld = stack(xs);
    }
  }

  const SplitCache& cache(Split s) const { return caches[static_cast<int>(s)]; }

  DetectorContext context(const SplitCache& c, const std::vector<std::size_t>& rows) const {
    DetectorContext ctx;
    ctx.vision = gather(c.e_v_d, rows);
    ctx.text = gather(c.text, rows);
    ctx.pooled = gather(c.pooled, rows);
    for (std::size_t r : rows) ctx.text_lengths.push_back(c.text_lengths[r]);
    return ctx;
  }

  DetectorOutput frozen(const SplitCache& c, const std::vector<std::size_t>& rows) const {
    const auto& det = models.detector;
    DetectorContext ctx = context(c, rows);
    return det.heads(ctx, det.run_layers(ctx, gather(c.x_ld, rows), l_d, det.config().depth));
  }

  DetectorOutput forward(const SplitCache& c, const std::vector<std::size_t>& rows, const Stage3Run& run,
                         const Stage3Outcome& st) const {
    const auto& det = models.detector;
    const AdapterConfig& ac = run.adapter;
    MiniMllm m = models.mllm;
    m.proj1 = st.proj1;
    m.proj2 = st.proj2;
    const bool with_text = run.variant == Stage3Variant::kFusion && ac.uses_text();
    TextBatch tb;
    if (with_text) {
      tb = prompt_batch(*c.scenes, rows);
    } else {
      tb.lengths.assign(rows.size(), 0);
    }
    Tensor emb = m.embed(m.align_vision(gather(c.vision, rows)), tb);
    const TokenLayout layout = m.layout(tb.max_len);
    const HiddenState h = m.forward_collect(emb, layout, ac.l_lm).back();
    DetectorContext ctx = context(c, rows);
    const std::size_t depth = det.config().depth;
    if (run.variant == Stage3Variant::kSubstitute) {
      ctx.vision = substitute_vision_features(h, layout, st.substitute_map, cfg.mllm.shuffle_r);
      return det.heads(ctx, det.run_layers(ctx, det.initial_queries(rows.size()), 0, depth));
    }
    PromptInputs in;
    in.vision = slice(h.values, 1, layout.vision.begin, layout.vision.length);
    if (with_text) {
      in.text = slice(h.values, 1, layout.text.begin, layout.text.length);
      in.text_lengths = &tb.lengths;
    }
    if (ac.arch == Arch::kI) {
      ctx.vision = make_prompts(in, &ctx.vision, ac, st.adapter);
      return det.heads(ctx, det.run_layers(ctx, det.initial_queries(rows.size()), 0, depth));
    }
    if (ac.l_d != l_d) throw ConfigError("stage-3 session was cached for a different injection layer");
    Tensor x = zero_init_cross_attn(gather(c.x_ld, rows), make_prompts(in, nullptr, ac, st.adapter),
                                    st.adapter, ac);
    return det.heads(ctx, det.run_layers(ctx, x, l_d, depth));
  }

  template <class Fwd>
  GroundingMetrics evaluate(const SplitCache& c, Fwd&& fwd) const {
    NoGradGuard guard;
    std::vector<std::vector<Detection>> dets;
    for (const auto& rows : chunks(c.scenes->size(), kEvalChunk))
      for (auto& d : to_detections(fwd(rows))) dets.push_back(std::move(d));
    std::vector<std::size_t> all(c.scenes->size());
    std::iota(all.begin(), all.end(), 0);
    return eval_grounding(dets, truths(*c.scenes, all), cfg.iou_threshold);
  }
};

Stage3Session::Stage3Session(const ModelSet& models, const Dataset& data, const ExperimentConfig& cfg)
    : impl_(std::make_unique<Impl>(models, data, cfg)) {
  ParamList all = models.params();
  set_requires_grad(tensors_of(all), false);
}

Stage3Session::~Stage3Session() = default;

GroundingMetrics Stage3Session::baseline(Split split) const {
  const auto& c = impl_->cache(split);
  return impl_->evaluate(c, [&](const std::vector<std::size_t>& rows) { return impl_->frozen(c, rows); });
}

DetectorOutput Stage3Session::forward(Split split, const std::vector<std::size_t>& rows, const Stage3Run& run,
                                      const Stage3Outcome& trained) const {
  return impl_->forward(impl_->cache(split), rows, run, trained);
}

GroundingMetrics Stage3Session::evaluate(Split split, const Stage3Run& run, const Stage3Outcome& trained) const {
  const auto& c = impl_->cache(split);
  return impl_->evaluate(c, [&](const std::vector<std::size_t>& rows) { return impl_->forward(c, rows, run, trained); });
}

Stage3Outcome Stage3Session::train(const Stage3Run& run) const {
  const TrainConfig& t = run.train;
  t.validate();
  if (t.train_detector || t.train_llm || t.train_vision) {
    throw ConfigError("stage 3 keeps the detector, the LLM and the vision encoder frozen");
  }
  const ExperimentConfig& cfg = impl_->cfg;
  run.adapter.validate(cfg.detector.depth, cfg.mllm.layers);
  std::mt19937_64 rng(run.seed * 7919 + 17);
  Stage3Outcome out;
  out.adapter = FusionState::init(run.adapter, rng);
  out.proj1 = clone(impl_->models.mllm.proj1);
  out.proj2 = clone(impl_->models.mllm.proj2);
  const std::size_t r = cfg.mllm.shuffle_r;
  if (run.variant == Stage3Variant::kSubstitute) {
    out.substitute_map = Linear::init(cfg.mllm.d_lm, cfg.detector.d * r * r, rng);
  }
  Groups groups;
  ParamList adapter, projector, map;
  if (run.variant == Stage3Variant::kFusion) out.adapter.collect(adapter, run.adapter);
  out.proj1.collect(projector, "projector.fc1");
  out.proj2.collect(projector, "projector.fc2");
  if (run.variant == Stage3Variant::kSubstitute) out.substitute_map.collect(map, "substitute.map");
  add_group(groups, adapter, t.train_adapter, t.lr_adapter);
  add_group(groups, map, t.train_adapter, t.lr_adapter);
  add_group(groups, projector, t.train_projector, t.lr_projector);
  ParamList frozen = impl_->models.params();
  add_group(groups, frozen, false, 0.0);

  const auto& train_cache = impl_->cache(Split::kTrain);
  auto loss_on = [&](const Impl::SplitCache& c) {
    return [&](const std::vector<std::size_t>& rows) {
      return detection_loss(impl_->forward(c, rows, run, out), truths(*c.scenes, rows));
    };
  };
  auto val_loss = [&] {
    const auto& a = impl_->cache(Split::kValCategory);
    const auto& b = impl_->cache(Split::kValSpatial);
    const double na = static_cast<double>(a.scenes->size()), nb = static_cast<double>(b.scenes->size());
    return (mean_loss(a.scenes->size(), loss_on(a)) * na + mean_loss(b.scenes->size(), loss_on(b)) * nb) / (na + nb);
  };
  StageResult& res = out.result;
  res.stage = 3;
  res.initial_val_loss = val_loss();
  run_loop(t, groups, train_cache.scenes->size(), run.seed * 104729 + 3, loss_on(train_cache), res);
  res.final_val_loss = val_loss();
  for (Split s : {Split::kValCategory, Split::kValSpatial}) {
    const auto& c = impl_->cache(s);
    auto m = impl_->evaluate(c, [&](const std::vector<std::size_t>& rows) { return impl_->forward(c, rows, run, out); });
    (s == Split::kValCategory ? res.val_category : res.val_spatial) = std::move(m);
  }
  for (const auto& g : groups.trained) set_requires_grad(g.params, false);
  return out;
}

void require_checkpoint(const std::filesystem::path& dir, std::size_t stage) {
  if (dir.empty() || !std::filesystem::exists(dir / "manifest.txt")) {
    throw UsageError("stage " + std::to_string(stage) + " needs the stage " + std::to_string(stage - 1) +
                     " checkpoint (missing " + (dir / "manifest.txt").string() + ")");
  }
}

void load_models(ModelSet& models, const std::filesystem::path& dir) { load_checkpoint(dir, models.params()); }

Stage3Outcome load_stage3(const ExperimentConfig& cfg, const std::filesystem::path& dir, Stage3Variant& variant) {
  if (!std::filesystem::exists(dir / "manifest.txt")) {
    throw UsageError("missing stage-3 checkpoint " + (dir / "manifest.txt").string());
  }
  Stage3Outcome out;
  std::mt19937_64 rng(0);
  ParamList p;
  if (checkpoint_has(dir, "substitute.map.w")) {
    variant = Stage3Variant::kSubstitute;
    out.substitute_map = Linear::init(cfg.mllm.d_lm, cfg.detector.d * cfg.mllm.shuffle_r * cfg.mllm.shuffle_r, rng);
    out.substitute_map.collect(p, "substitute.map");
  } else if (checkpoint_has(dir, "adapter.gate")) {
    variant = Stage3Variant::kFusion;
    out.adapter = FusionState::init(cfg.adapter, rng);
    out.adapter.collect(p, cfg.adapter);
  } else {
    throw UsageError(dir.string() + " is not a stage-3 checkpoint");
  }
  ModelSet models(cfg);
  ParamList proj;
  models.mllm.collect_projector(proj);
  p.insert(p.end(), proj.begin(), proj.end());
  load_checkpoint(dir, p);
  out.proj1 = models.mllm.proj1;
  out.proj2 = models.mllm.proj2;
  return out;
}

StageResult run_stage(const ExperimentConfig& cfg, std::size_t stage, const StageIo& io, const Dataset& data,
                      Stage3Variant variant) {
  cfg.validate();
  ModelSet models(cfg);
  if (stage > 0) {
    require_checkpoint(io.in, stage);
    load_models(models, io.in);
  } else {
    quantize_like_checkpoint(models.params());
  }
  StageResult result;
  ParamList extra;
  if (stage == 0) {
    result = pretrain_detector(models, data, cfg);
  } else if (stage <= 2) {
    result = train_mllm(models, data, cfg, stage);
  } else {
    Stage3Session session(models, data, cfg);
    Stage3Run run{cfg.seed, variant, cfg.adapter, cfg.stage3};
    Stage3Outcome o = session.train(run);
    result = o.result;
    models.mllm.proj1 = o.proj1;
    models.mllm.proj2 = o.proj2;
    if (variant == Stage3Variant::kFusion) o.adapter.collect(extra, cfg.adapter);
    else o.substitute_map.collect(extra, "substitute.map");
  }
  ParamList all = models.params();
  all.insert(all.end(), extra.begin(), extra.end());
  std::filesystem::create_directories(io.out);
  save_checkpoint(io.out, all);
  return result;
}

}  // namespace led
