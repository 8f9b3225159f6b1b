#include "led/analysis/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <random>

#include "led/adapter/adapter.hpp"
#include "led/core/checkpoint.hpp"
#include "led/core/flops.hpp"
#include "led/harness/scenes.hpp"

namespace led {

namespace {

const char* modality_name(std::size_t m) {
  switch (static_cast<Modality>(m)) {
    case Modality::kSystem: return "system";
    case Modality::kVision: return "vision";
    case Modality::kText: return "text";
  }
  return "?";
}

std::string with_unit(double v, const char* unit, bool delta, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%.*f%s", delta ? "+" : "", digits, v, unit);
  return buf;
}

template <class F>
double median_latency_ms(F&& f, const ComputeOptions& opt) {
  for (std::size_t i = 0; i < opt.warmup; ++i) f();
  std::vector<double> ms;
  for (std::size_t i = 0; i < opt.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return median(std::move(ms));
}

// Wraps a hook so that its work is also counted by `meter`.
std::function<Tensor(const Tensor&)> metered(std::function<Tensor(const Tensor&)> hook, FlopsMeter& meter) {
  if (!hook) return hook;
  return [hook = std::move(hook), &meter](const Tensor& x) {
    FlopsScope scope(meter);
    return hook(x);
  };
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw DegenerateInputError("median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lower + upper) / 2.0;
}

CsvTable AttentionProfile::table() const {
  CsvTable t{{"layer", "modality", "median"}, {}};
  for (const auto& l : layers)
    for (std::size_t m = 0; m < l.by_key.size(); ++m)
      if (l.by_key[m]) t.rows.push_back({std::to_string(l.layer), modality_name(m), format_number(*l.by_key[m])});
  return t;
}

AttentionProfile attention_medians(const MiniMllm& model, const Tensor& images, const TextBatch& text) {
  NoGradGuard guard;
  TokenLayout layout;
  const auto states = model.run(images, text, model.config().layers, &layout);
  const std::size_t batch = text.batch(), seq = layout.length(), heads = model.config().heads;
  AttentionProfile profile;
  for (std::size_t layer = 1; layer <= model.config().layers; ++layer) {
    const Tensor scores = model.layer_scores(layer, states[layer - 1].values);
    const auto s = scores.data();
    LayerAttention rec;
    rec.layer = layer;
    std::array<double, 3> sum{};
    std::array<std::size_t, 3> groups{};
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t valid = layout.text.begin + text.lengths[b];
      for (std::size_t h = 0; h < heads; ++h) {
        std::array<std::vector<double>, 3> by_key;
        const double* base = s.data() + (b * heads + h) * seq * seq;
        for (std::size_t q = 0; q < valid; ++q)
          for (std::size_t k = 0; k <= q; ++k) by_key[static_cast<int>(layout.tags[k])].push_back(base[q * seq + k]);
        for (std::size_t m = 0; m < 3; ++m) {
          if (by_key[m].empty()) continue;
          sum[m] += median(std::move(by_key[m]));
          ++groups[m];
        }
      }
    }
    for (std::size_t m = 0; m < 3; ++m)
      if (groups[m]) rec.by_key[m] = sum[m] / static_cast<double>(groups[m]);
    profile.layers.push_back(rec);
  }
  return profile;
}

std::vector<AblationResult> layer_sweep(const Stage3Session& session, const std::vector<std::size_t>& l_values,
                                        const std::vector<std::uint64_t>& seeds, const Stage3Run& base) {
  std::vector<AblationResult> out;
  for (std::size_t l : l_values) {
    for (std::uint64_t seed : seeds) {
      Stage3Run run = base;
      run.seed = seed;
      run.adapter.l_lm = l;
      const Stage3Outcome o = session.train(run);
      out.push_back({l, seed, *o.result.val_category, *o.result.val_spatial, o.result.initial_val_loss,
                     o.result.final_val_loss});
    }
  }
  return out;
}

std::vector<AblationResult> layer_sweep(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                        const Dataset& data, const std::vector<std::size_t>& l_values,
                                        const std::vector<std::uint64_t>& seeds) {
  require_checkpoint(checkpoint, 3);
  ModelSet models(cfg);
  load_models(models, checkpoint);
  const Stage3Session session(models, data, cfg);
  return layer_sweep(session, l_values, seeds, {cfg.seed, Stage3Variant::kFusion, cfg.adapter, cfg.stage3});
}

std::vector<LayerMean> layer_means(const std::vector<AblationResult>& results) {
  std::map<std::size_t, std::pair<LayerMean, std::size_t>> acc;
  for (const auto& r : results) {
    auto& [m, n] = acc[r.l_lm];
    m.l_lm = r.l_lm;
    m.spatial_accuracy += r.val_spatial.accuracy;
    m.category_accuracy += r.val_category.accuracy;
    ++n;
  }
  std::vector<LayerMean> out;
  for (auto& [l, mn] : acc) {
    auto& [m, n] = mn;
    m.spatial_accuracy /= static_cast<double>(n);
    m.category_accuracy /= static_cast<double>(n);
    out.push_back(m);
  }
  std::vector<std::size_t> order(out.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out[a].spatial_accuracy > out[b].spatial_accuracy; });
  for (std::size_t r = 0; r < order.size(); ++r) out[order[r]].rank = r + 1;
  return out;
}

CsvTable ablation_table(const std::vector<AblationResult>& results) {
  CsvTable t{{"l_lm", "seed", "val_spatial_accuracy", "val_spatial_mean_iou", "val_category_accuracy",
              "val_category_mean_iou", "initial_val_loss", "final_val_loss"},
             {}};
  for (const auto& r : results) {
    t.rows.push_back({std::to_string(r.l_lm), std::to_string(r.seed), format_number(r.val_spatial.accuracy),
                      format_number(r.val_spatial.mean_iou), format_number(r.val_category.accuracy),
                      format_number(r.val_category.mean_iou), format_number(r.initial_val_loss),
                      format_number(r.final_val_loss)});
  }
  return t;
}

const ComputeRow& ComputeReport::row(const std::string& framework) const {
  for (const auto& r : rows)
    if (r.framework == framework) return r;
  throw ConfigError("no compute row '" + framework + "'");
}

CsvTable ComputeReport::table() const {
  CsvTable t{{"Framework", "Params", "GFLOPs", "Latency"}, {}};
  for (const auto& r : rows) {
    t.rows.push_back({r.framework, with_unit(static_cast<double>(r.params) / 1e6, "M", r.delta, 4),
                      with_unit(static_cast<double>(r.flops_analytic) / 1e9, "G", r.delta, 5),
                      with_unit(r.latency_ms, " ms", r.delta, 3)});
  }
  return t;
}

std::vector<nlohmann::json> ComputeReport::records() const {
  std::vector<nlohmann::json> out;
  for (const auto& r : rows) {
    out.push_back({{"type", "compute"},
                   {"framework", r.framework},
                   {"delta", r.delta},
                   {"params", r.params},
                   {"flops_analytic", r.flops_analytic},
                   {"flops_metered", r.flops_metered},
                   {"latency_ms", r.latency_ms}});
  }
  return out;
}

ComputeReport compute_report(const ExperimentConfig& cfg, const ComputeOptions& options) {
  cfg.validate();
  const ModelSet models(cfg);
  const MiniMllm& mllm = models.mllm;
  const GroundingDetector& det = models.detector;
  const AdapterConfig& ac = cfg.adapter;
  std::mt19937_64 rng(cfg.init_seed + 1);
  const FusionState adapter = FusionState::init(ac, rng);

  SceneOptions so;
  so.canvas = cfg.mllm.image;
  const auto scenes = generate_scenes(cfg.data.seed, 1, Split::kValSpatial, so);
  const Tensor image = stack_images(scenes, {0});
  const TextBatch query = make_text_batch({scenes[0].query.tokens});
  TextBatch prompt;
  if (ac.uses_text()) {
    auto t = instruction_tokens(scenes[0]);
    t.resize(instruction_answer_start(scenes[0]) - 1);
    prompt = make_text_batch({t});
  } else {
    prompt.lengths = {0};
  }
  const TokenLayout layout = mllm.layout(prompt.max_len);
  const std::size_t vision_tokens = cfg.mllm.grid() * cfg.mllm.grid();

  NoGradGuard guard;
  FlopsMeter m_total, m_vision, m_llm, m_detector, m_adapter;
  auto baseline = [&] { return det.forward(mllm.vision.encode(image), query.ids, query.lengths, query.max_len); };
  auto llm = [&](const Tensor& vf) {
    return mllm.forward_collect(mllm.embed(mllm.align_vision(vf), prompt), layout, ac.l_lm).back();
  };
  auto prompt_inputs = [&](const HiddenState& h) {
    PromptInputs in;
    in.vision = slice(h.values, 1, layout.vision.begin, layout.vision.length);
    if (ac.uses_text()) {
      in.text = slice(h.values, 1, layout.text.begin, layout.text.length);
      in.text_lengths = &prompt.lengths;
    }
    return in;
  };
  auto led = [&](bool meter) {
    Tensor vf;
    {
      std::optional<FlopsScope> s;
      if (meter) s.emplace(m_vision);
      vf = mllm.vision.encode(image);
    }
    HiddenState h;
    {
      std::optional<FlopsScope> s;
      if (meter) s.emplace(m_llm);
      h = llm(vf);
    }
    const PromptInputs in = prompt_inputs(h);
    DecoderHooks hooks;
    {
      std::optional<FlopsScope> s;
      if (meter) s.emplace(m_adapter);
      hooks = inject(in, ac, adapter);
    }
    if (meter) {
      hooks.vision = metered(std::move(hooks.vision), m_adapter);
      hooks.after_layer = metered(std::move(hooks.after_layer), m_adapter);
    }
    std::optional<FlopsScope> s;
    if (meter) s.emplace(m_detector);
    return det.forward(vf, query.ids, query.lengths, query.max_len, &hooks);
  };
  {
    FlopsScope s(m_total);
    led(true);
  }
  FlopsMeter m_baseline;
  {
    FlopsScope s(m_baseline);
    baseline();
  }

  ParamList vision_p, det_p, proj_p, adapter_p;
  mllm.collect_vision(vision_p);
  det.collect(det_p);
  mllm.collect_projector(proj_p);
  adapter.collect(adapter_p, ac);

  ComputeRow base{"Detector", false, param_count(vision_p) + param_count(det_p),
                  mllm.vision.flops(1, vision_tokens) + det.forward_flops(1, query.max_len), m_baseline.accumulated(),
                  median_latency_ms(baseline, options)};

  AdapterExtents ext;
  ext.batch = 1;
  ext.decoder_tokens = cfg.detector.queries;
  ext.text_tokens = layout.text.length;
  ext.vision_tokens = vision_tokens;
  const ParamFlops apf = adapter_param_flops(ac, ext);
  // Adapter latency on cached inputs: the prompt path plus the injection.
  const Tensor vf = mllm.vision.encode(image);
  const HiddenState h = llm(vf);
  const PromptInputs in = prompt_inputs(h);
  const DetectorContext ctx = det.encode(det.encode_vision(vf), query.ids, query.lengths, query.max_len);
  const Tensor x_ld = det.run_layers(ctx, det.initial_queries(1), 0, ac.l_d);
  ComputeRow adapter_row{"- Adapter", true, apf.params, apf.flops, m_adapter.accumulated(),
                         median_latency_ms(
                             [&] {
                               if (ac.arch == Arch::kI) return make_prompts(in, &ctx.vision, ac, adapter);
                               return zero_init_cross_attn(x_ld, make_prompts(in, nullptr, ac, adapter), adapter, ac);
                             },
                             options)};

  std::uint64_t llm_params = param_count(proj_p) + mllm.system_prefix.numel() + mllm.decoder_param_count(ac.l_lm);
  if (ac.uses_text()) llm_params += mllm.token_embed.numel();
  ComputeRow llm_row{"- LLM (first " + std::to_string(ac.l_lm) + " layers)", true, llm_params,
                     mllm.align_flops(1) + mllm.decoder_flops(1, layout.length(), ac.l_lm), m_llm.accumulated(),
                     median_latency_ms([&] { return llm(vf); }, options)};

  const double led_latency = median_latency_ms([&] { return led(false); }, options);
  ComputeRow total{"LED", true, adapter_row.params + llm_row.params, adapter_row.flops_analytic + llm_row.flops_analytic,
                   m_total.accumulated() - m_baseline.accumulated(), led_latency - base.latency_ms};

  ComputeReport report;
  report.rows = {base, total, adapter_row, llm_row};
  return report;
}

}  // namespace led
