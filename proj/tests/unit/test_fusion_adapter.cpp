#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "led/adapter/adapter.hpp"
#include "led/core/flops.hpp"
#include "led/core/gradcheck.hpp"
#include "led/core/optim.hpp"

using namespace led;

namespace {

constexpr Arch kAllArchs[] = {Arch::kI, Arch::kII, Arch::kIII, Arch::kIV};

DetectorConfig det_config() {
  DetectorConfig c;
  c.d = 16;
  c.heads = 2;
  c.depth = 6;
  c.queries = 4;
  c.vision_width = 6;
  c.vision_tokens = 16;
  c.vocab = 12;
  c.max_text = 6;
  c.ffn = 24;
  return c;
}

AdapterConfig adapter_config(Arch arch, std::size_t l_d) {
  AdapterConfig a;
  a.arch = arch;
  a.l_d = l_d;
  a.heads = 2;
  a.d = 16;
  a.d_lm = 12;
  a.grid_h = 4;
  a.grid_w = 4;
  return a;
}

struct Scene {
  Tensor vision;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 4;
  Tensor e_v_l;
  Tensor e_t;
  std::vector<std::size_t> llm_text_lengths;
};

Scene random_scene(std::mt19937_64& rng, std::size_t batch, const DetectorConfig& dc,
                   const AdapterConfig& ac) {
  Scene s;
  s.vision = Tensor::randn({batch, dc.vision_tokens, dc.vision_width}, rng);
  std::uniform_int_distribution<std::size_t> id(1, dc.vocab - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    s.lengths.push_back(s.max_len - b % 2);
    for (std::size_t j = 0; j < s.max_len; ++j) s.ids.push_back(j < s.lengths.back() ? id(rng) : 0);
  }
  s.e_v_l = Tensor::randn({batch, ac.grid_h * ac.grid_w, ac.d_lm}, rng);
  s.e_t = Tensor::randn({batch, 5, ac.d_lm}, rng);
  for (std::size_t b = 0; b < batch; ++b) s.llm_text_lengths.push_back(5 - b % 3);
  return s;
}

PromptInputs inputs_of(const Scene& s) {
  PromptInputs in;
  in.vision = s.e_v_l;
  in.text = s.e_t;
  in.text_lengths = &s.llm_text_lengths;
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

void randomize(FusionState& s, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : s.gate.mutable_data()) v = n(rng) * 4.0;
  for (double& v : s.out_proj.w.mutable_data()) v = n(rng);
  for (double& v : s.out_proj.b.mutable_data()) v = n(rng);
  if (s.conv_bias.defined())
    for (double& v : s.conv_bias.mutable_data()) v = n(rng);
}

// Plain rotary map on one head vector, written out independently.
std::vector<double> rotate(std::vector<double> x, std::size_t pos, double base) {
  const std::size_t dh = x.size();
  for (std::size_t i = 0; i < dh / 2; ++i) {
    const double theta = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
    const double a = x[2 * i], b = x[2 * i + 1];
    x[2 * i] = a * std::cos(theta) - b * std::sin(theta);
    x[2 * i + 1] = a * std::sin(theta) + b * std::cos(theta);
  }
  return x;
}

}  // namespace

TEST(ZeroInit, CrossAttentionIsBitExactIdentity) {
  std::mt19937_64 rng(1);
  AdapterConfig cfg = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(cfg, rng);
  EXPECT_EQ(s.gate.to_vector(), std::vector<double>(cfg.heads, 0.0));
  for (double v : s.out_proj.w.data()) EXPECT_EQ(v, 0.0);
  for (double v : s.out_proj.b.data()) EXPECT_EQ(v, 0.0);
  Tensor e = Tensor::randn({2, 4, cfg.d}, rng), p = Tensor::randn({2, 3, cfg.d}, rng);
  EXPECT_EQ(zero_init_cross_attn(e, p, s, cfg).to_vector(), e.to_vector());
}

TEST(ZeroInit, DetectorOutputsUnchangedForEveryArchAndDepth) {
  std::mt19937_64 rng(2);
  DetectorConfig dc = det_config();
  GroundingDetector det(dc, rng);
  for (Arch arch : kAllArchs) {
    for (std::size_t l_d : {1u, 6u}) {
      AdapterConfig ac = adapter_config(arch, l_d);
      for (int trial = 0; trial < 20; ++trial) {
        FusionState s = FusionState::init(ac, rng);
        Scene sc = random_scene(rng, 2, dc, ac);
        PromptInputs in = inputs_of(sc);
        DecoderHooks hooks = inject(in, ac, s);
        auto base = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len);
        auto fused = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &hooks);
        EXPECT_LE(max_abs_diff(base.boxes, fused.boxes), 1e-12);
        EXPECT_LE(max_abs_diff(base.logits, fused.logits), 1e-12);
      }
    }
  }
}

TEST(SegmentAlgebra, PromptMassIsGateAndSelfMassIsOne) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    AdapterConfig cfg = adapter_config(Arch::kIV, 6);
    cfg.heads = std::size_t{1} << (trial % 3);  // 1, 2, 4 heads
    cfg.d = 8 * cfg.heads / (trial % 3 == 2 ? 2 : 1);
    FusionState s = FusionState::init(cfg, rng);
    randomize(s, rng, 1.0);
    const std::size_t B = ext(rng), T = ext(rng), L = ext(rng);
    Tensor e = Tensor::randn({B, T, cfg.d}, rng), p = Tensor::randn({B, L, cfg.d}, rng);
    Tensor w = segment_weights(e, p, s, cfg);
    ASSERT_EQ(w.shape(), (Shape{B, cfg.heads, T, L + T}));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const double gate = std::tanh(s.gate[h]);
        for (std::size_t t = 0; t < T; ++t) {
          double prompt = 0.0, self = 0.0;
          for (std::size_t j = 0; j < L; ++j) prompt += w.at({b, h, t, j});
          for (std::size_t j = L; j < L + T; ++j) self += w.at({b, h, t, j});
          EXPECT_NEAR(prompt, gate, 1e-12);
          EXPECT_NEAR(self, 1.0, 1e-12);
        }
      }
  }
}

TEST(SegmentAlgebra, BruteForceThreeByTwoPlusThree) {
  std::mt19937_64 rng(4);
  AdapterConfig cfg = adapter_config(Arch::kIV, 6);
  cfg.heads = 1;
  cfg.d = 4;
  FusionState s = FusionState::init(cfg, rng);
  s.gate.mutable_data()[0] = 30.0;
  for (std::size_t i = 0; i < 4; ++i) s.out_proj.w.mutable_data()[i * 4 + i] = 1.0;
  Tensor e = Tensor::randn({1, 3, 4}, rng), p = Tensor::randn({1, 2, 4}, rng);
  Tensor w = segment_weights(e, p, s, cfg);
  // Oracle: explicit projections, rotations and two softmaxes.
  auto project = [](const Tensor& x, std::size_t row, const Linear& l) {
    std::vector<double> out(4, 0.0);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 4; ++i) out[j] += x[row * 4 + i] * l.w[i * 4 + j];
    return out;
  };
  std::vector<std::vector<double>> keys;
  for (std::size_t j = 0; j < 2; ++j) keys.push_back(rotate(project(p, j, s.w_k), j, cfg.rope_base));
  for (std::size_t j = 0; j < 3; ++j) keys.push_back(rotate(project(e, j, s.w_k), 2 + j, cfg.rope_base));
  const double gate = std::tanh(30.0);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto q = rotate(project(e, t, s.w_q), 2 + t, cfg.rope_base);
    std::vector<double> sc(5);
    for (std::size_t j = 0; j < 5; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < 4; ++i) dot += q[i] * keys[j][i];
      sc[j] = dot / 2.0;
    }
    const double zp = std::exp(sc[0]) + std::exp(sc[1]);
    const double zs = std::exp(sc[2]) + std::exp(sc[3]) + std::exp(sc[4]);
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double want = j < 2 ? gate * std::exp(sc[j]) / zp : std::exp(sc[j]) / zs;
      EXPECT_NEAR(w.at({0, 0, t, j}), want, 1e-12);
      row += w.at({0, 0, t, j});
    }
    EXPECT_NEAR(row, gate + 1.0, 1e-12);
  }
}

TEST(SegmentAlgebra, MaskedPromptColumnDropsAndRenormalises) {
  std::mt19937_64 rng(5);
  AdapterConfig cfg = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(cfg, rng);
  s.gate.mutable_data()[0] = 0.7;
  s.gate.mutable_data()[1] = -1.3;
  Tensor e = Tensor::randn({1, 2, cfg.d}, rng), p = Tensor::randn({1, 3, cfg.d}, rng);
  Tensor full = segment_weights(e, p, s, cfg);
  CrossAttnOptions opt;
  opt.prompt_mask = {1, 0, 1};
  Tensor masked = segment_weights(e, p, s, cfg, opt);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t t = 0; t < 2; ++t) {
      EXPECT_EQ(masked.at({0, h, t, 1}), 0.0);
      const double kept = full.at({0, h, t, 0}) + full.at({0, h, t, 2});
      const double g = std::tanh(s.gate[h]);
      for (std::size_t j : {0u, 2u})
        EXPECT_NEAR(masked.at({0, h, t, j}), g * full.at({0, h, t, j}) / kept, 1e-12);
      for (std::size_t j = 3; j < 5; ++j)
        EXPECT_NEAR(masked.at({0, h, t, j}), full.at({0, h, t, j}), 1e-15);
    }
  opt.prompt_mask = {0, 0, 0};
  EXPECT_THROW(segment_weights(e, p, s, cfg, opt), DegenerateInputError);
}

TEST(SegmentAlgebra, GateBoundHoldsForHugeGates) {
  std::mt19937_64 rng(6);
  AdapterConfig cfg = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(cfg, rng);
  s.gate.mutable_data()[0] = 1e6;
  s.gate.mutable_data()[1] = -1e6;
  Tensor g = tanh_gate(s.gate);
  EXPECT_LT(g[0], 1.0);
  EXPECT_GT(g[1], -1.0);
}

TEST(MakePrompts, ArchFourEightGridGivesSixteenPrompts) {
  std::mt19937_64 rng(7);
  AdapterConfig cfg = adapter_config(Arch::kIV, 6);
  cfg.grid_h = cfg.grid_w = 8;
  EXPECT_EQ(cfg.prompt_len(), 16u);
  FusionState s = FusionState::init(cfg, rng);
  PromptInputs in;
  in.vision = Tensor::randn({2, 64, cfg.d_lm}, rng);
  EXPECT_EQ(make_prompts(in, nullptr, cfg, s).shape(), (Shape{2, 16, cfg.d}));
  in.vision = Tensor::zeros({2, 64, cfg.d_lm});
  const Tensor zero_prompts = make_prompts(in, nullptr, cfg, s);
  for (double v : zero_prompts.data()) EXPECT_EQ(v, 0.0);
}

TEST(MakePrompts, ArchTwoReducesToArchFourUnderIdentitySurgery) {
  std::mt19937_64 rng(8);
  AdapterConfig two = adapter_config(Arch::kII, 6), four = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(two, rng);
  for (double& v : s.fusion.o.w.mutable_data()) v = 0.0;
  for (double& v : s.fusion.o.b.mutable_data()) v = 0.0;
  DetectorConfig dc = det_config();
  Scene sc = random_scene(rng, 2, dc, two);
  PromptInputs in = inputs_of(sc);
  Tensor a = make_prompts(in, nullptr, two, s), b = make_prompts(in, nullptr, four, s);
  EXPECT_EQ(a.to_vector(), b.to_vector());
}

TEST(MakePrompts, MissingInputsAndBadGridRejected) {
  std::mt19937_64 rng(9);
  AdapterConfig two = adapter_config(Arch::kII, 6);
  FusionState s2 = FusionState::init(two, rng);
  PromptInputs v_only;
  v_only.vision = Tensor::randn({1, 16, two.d_lm}, rng);
  EXPECT_THROW(make_prompts(v_only, nullptr, two, s2), ConfigError);
  AdapterConfig one = adapter_config(Arch::kI, 6);
  FusionState s1 = FusionState::init(one, rng);
  PromptInputs both = v_only;
  both.text = Tensor::randn({1, 3, one.d_lm}, rng);
  EXPECT_THROW(make_prompts(both, nullptr, one, s1), ConfigError);
  AdapterConfig four = adapter_config(Arch::kIV, 6);
  FusionState s4 = FusionState::init(four, rng);
  PromptInputs odd;
  odd.vision = Tensor::randn({1, 15, four.d_lm}, rng);
  EXPECT_THROW(make_prompts(odd, nullptr, four, s4), DimensionError);
  AdapterConfig tiny = four;
  tiny.grid_h = tiny.grid_w = 1;
  tiny.conv_pad = 0;
  EXPECT_EQ(tiny.prompt_len(), 0u);
  EXPECT_THROW(FusionState::init(tiny, rng), ConfigError);
  EXPECT_THROW(adapter_param_flops(tiny, {}), ConfigError);
}

TEST(Inject, LastLayerInjectionLeavesEarlierLayersUntouched) {
  std::mt19937_64 rng(10);
  DetectorConfig dc = det_config();
  GroundingDetector det(dc, rng);
  AdapterConfig ac = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(ac, rng);
  randomize(s, rng, 0.5);
  Scene sc = random_scene(rng, 2, dc, ac);
  PromptInputs in = inputs_of(sc);
  DecoderHooks hooks = inject(in, ac, s);
  std::vector<Tensor> base_layers, fused_layers;
  auto base = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, nullptr, &base_layers);
  auto fused = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &hooks, &fused_layers);
  ASSERT_EQ(base_layers.size(), 6u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(base_layers[i].to_vector(), fused_layers[i].to_vector());
  EXPECT_GT(max_abs_diff(base_layers[5], fused_layers[5]), 1e-6);
  EXPECT_GT(max_abs_diff(base.boxes, fused.boxes), 1e-9);
}

TEST(Inject, InjectionDepthChangesOutputsAndArchTwoEqualsThree) {
  std::mt19937_64 rng(11);
  DetectorConfig dc = det_config();
  GroundingDetector det(dc, rng);
  AdapterConfig early = adapter_config(Arch::kII, 1), late = adapter_config(Arch::kII, 6);
  FusionState s = FusionState::init(early, rng);
  randomize(s, rng, 0.5);
  Scene sc = random_scene(rng, 2, dc, early);
  PromptInputs in = inputs_of(sc);
  DecoderHooks h1 = inject(in, early, s), h6 = inject(in, late, s);
  auto a = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &h1);
  auto b = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &h6);
  EXPECT_GT(max_abs_diff(a.boxes, b.boxes), 1e-9);
  for (std::size_t l_d : {1u, 3u, 6u}) {
    AdapterConfig two = adapter_config(Arch::kII, l_d), three = adapter_config(Arch::kIII, l_d);
    DecoderHooks x = inject(in, two, s), y = inject(in, three, s);
    auto ox = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &x);
    auto oy = det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &y);
    EXPECT_EQ(ox.boxes.to_vector(), oy.boxes.to_vector());
    EXPECT_EQ(ox.logits.to_vector(), oy.logits.to_vector());
  }
}

TEST(GradientFlow, ZeroInitCanEscapeIdentity) {
  std::mt19937_64 rng(12);
  DetectorConfig dc = det_config();
  GroundingDetector det(dc, rng);
  AdapterConfig ac = adapter_config(Arch::kIV, 6);
  FusionState s = FusionState::init(ac, rng);
  Scene sc = random_scene(rng, 2, dc, ac);
  PromptInputs in = inputs_of(sc);
  std::vector<SceneTruth> truth(2);
  for (auto& t : truth) {
    t.boxes = {{0.4, 0.5, 0.2, 0.2}};
    t.labels = {kTargetClass};
  }
  auto loss = [&] {
    DecoderHooks hooks = inject(in, ac, s);
    return detection_loss(det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &hooks), truth);
  };
  auto nonzero = [](const Tensor& t) {
    for (double g : t.grad()) if (g != 0.0) return true;
    return false;
  };
  ParamList params;
  s.collect(params, ac);
  std::vector<Tensor> trainable;
  for (auto& [n, p] : params) trainable.push_back(p);
  Optimizer opt(OptimizerKind::kSgd, {{trainable, 0.05}}, 10);
  backward(loss());
  EXPECT_TRUE(nonzero(s.out_proj.w));
  // The gate's gradient passes through out_proj, which starts at zero.
  EXPECT_FALSE(nonzero(s.gate));
  opt.step();
  backward(loss());
  EXPECT_TRUE(nonzero(s.gate));
  EXPECT_TRUE(nonzero(s.out_proj.w));
}

TEST(GradientCheck, AdapterPlusDetectorLossEveryArch) {
  std::mt19937_64 rng(13);
  DetectorConfig dc = det_config();
  dc.depth = 2;
  GroundingDetector det(dc, rng);
  for (Arch arch : kAllArchs) {
    AdapterConfig ac = adapter_config(arch, 1);
    FusionState s = FusionState::init(ac, rng);
    randomize(s, rng, 0.3);
    Scene sc = random_scene(rng, 2, dc, ac);
    Tensor e_v_l = Tensor::randn(sc.e_v_l.shape(), rng, 1.0, true);
    PromptInputs in = inputs_of(sc);
    in.vision = e_v_l;
    std::vector<SceneTruth> truth(2);
    truth[0].boxes = {{0.4, 0.5, 0.2, 0.2}, {0.7, 0.2, 0.1, 0.1}};
    truth[0].labels = {kTargetClass, kOtherClass};
    truth[1].boxes = {{0.3, 0.6, 0.3, 0.2}};
    truth[1].labels = {kTargetClass};
    ParamList params;
    s.collect(params, ac);
    std::vector<Tensor> ps{e_v_l};
    for (auto& [n, p] : params) ps.push_back(p);
    GradCheckOptions opt;
    opt.max_coords = 250;
    auto f = [&] {
      DecoderHooks hooks = inject(in, ac, s);
      return detection_loss(det.forward(sc.vision, sc.ids, sc.lengths, sc.max_len, &hooks), truth);
    };
    EXPECT_LT(finite_diff_check(f, ps, opt), 1e-4) << to_string(arch);
  }
}

TEST(ParamFlops, AnalyticMatchesMeterAndCollectedCounts) {
  std::mt19937_64 rng(14);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  for (int trial = 0; trial < 8; ++trial) {
    Arch arch = kAllArchs[trial % 4];
    AdapterConfig ac = adapter_config(arch, 3);
    ac.grid_h = 2 + pick(rng);
    ac.grid_w = 2 + pick(rng);
    ac.conv_stride = 1 + trial % 2;
    FusionState s = FusionState::init(ac, rng);
    AdapterExtents ext;
    ext.batch = 1 + pick(rng);
    ext.decoder_tokens = 2 + pick(rng);
    ext.text_tokens = 3 + pick(rng);
    ext.vision_tokens = 5 + pick(rng);
    PromptInputs in;
    in.vision = Tensor::randn({ext.batch, ac.grid_h * ac.grid_w, ac.d_lm}, rng);
    in.text = Tensor::randn({ext.batch, ext.text_tokens, ac.d_lm}, rng);
    Tensor e_d = Tensor::randn({ext.batch, ext.decoder_tokens, ac.d}, rng);
    Tensor e_v_d = Tensor::randn({ext.batch, ext.vision_tokens, ac.d}, rng);
    FlopsMeter meter;
    {
      FlopsScope scope(meter);
      if (arch == Arch::kI) {
        make_prompts(in, &e_v_d, ac, s);
      } else {
        zero_init_cross_attn(e_d, make_prompts(in, nullptr, ac, s), s, ac);
      }
    }
    const ParamFlops pf = adapter_param_flops(ac, ext);
    EXPECT_EQ(meter.accumulated(), pf.flops) << to_string(arch);
    ParamList params;
    s.collect(params, ac);
    EXPECT_EQ(param_count(params), pf.params) << to_string(arch);
  }
}

TEST(AdapterConfig, ValidationAndParsing) {
  AdapterConfig ac = adapter_config(Arch::kIV, 6);
  EXPECT_NO_THROW(ac.validate(6, 4));
  ac.l_d = 7;
  EXPECT_THROW(ac.validate(6, 4), ConfigError);
  ac.l_d = 6;
  ac.l_lm = 5;
  EXPECT_THROW(ac.validate(6, 4), ConfigError);
  EXPECT_EQ(parse_arch("III"), Arch::kIII);
  EXPECT_EQ(parse_arch("4"), Arch::kIV);
  EXPECT_THROW(parse_arch("V"), ConfigError);
}
