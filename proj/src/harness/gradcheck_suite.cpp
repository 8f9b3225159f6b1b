#include "led/harness/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <utility>

#include "led/adapter/adapter.hpp"
#include "led/core/gradcheck.hpp"
#include "led/core/ops.hpp"

namespace led {

namespace {

using Loss = std::function<Tensor()>;
using Instance = std::pair<Loss, std::vector<Tensor>>;
using Builder = std::function<Instance(std::mt19937_64&)>;

Tensor param(const Shape& s, std::mt19937_64& rng) { return Tensor::randn(s, rng, 1.0, true); }
Tensor weight(const Shape& s, std::mt19937_64& rng) { return Tensor::randn(s, rng); }

std::vector<std::pair<std::string, Builder>> primitive_cases() {
  std::vector<std::pair<std::string, Builder>> c;
  c.emplace_back("add_broadcast", [](std::mt19937_64& r) {
    Tensor a = param({2, 3, 4}, r), b = param({4}, r), w = weight({2, 3, 4}, r);
    return Instance{[=] { return sum(mul(add(a, b), w)); }, {a, b}};
  });
  c.emplace_back("sub_mul_broadcast", [](std::mt19937_64& r) {
    Tensor a = param({2, 1, 4}, r), b = param({3, 1}, r), w = weight({2, 3, 4}, r);
    return Instance{[=] { return sum(mul(mul(sub(a, b), a), w)); }, {a, b}};
  });
  c.emplace_back("unary", [](std::mt19937_64& r) {
    Tensor a = param({3, 4}, r), w = weight({3, 4}, r);
    return Instance{[=] {
                      Tensor u = add(add(gelu(a), sigmoid(a)), tanh(a));
                      Tensor v = add(exp(mul_scalar(a, 0.3)), log(add_scalar(square(a), 1.0)));
                      return sum(mul(add(u, v), w));
                    },
                    {a}};
  });
  c.emplace_back("tanh_gate", [](std::mt19937_64& r) {
    Tensor a = param({5}, r), w = weight({5}, r);
    return Instance{[=] { return sum(mul(tanh_gate(a), w)); }, {a}};
  });
  c.emplace_back("matmul", [](std::mt19937_64& r) {
    Tensor a = param({2, 3, 4}, r), b = param({2, 4, 2}, r), m = param({2, 5}, r), w = weight({2, 3, 5}, r);
    return Instance{[=] { return sum(mul(matmul(matmul(a, b), m), w)); }, {a, b, m}};
  });
  c.emplace_back("softmax", [](std::mt19937_64& r) {
    Tensor a = param({2, 3, 4}, r), w = weight({2, 3, 4}, r);
    return Instance{[=] { return sum(mul(add(softmax(a, 1), log_softmax(a, 2)), w)); }, {a}};
  });
  c.emplace_back("masked_softmax", [](std::mt19937_64& r) {
    Tensor a = param({2, 4}, r), w = weight({2, 4}, r);
    return Instance{[=] { return sum(mul(masked_softmax(a, {1, 0, 1, 1, 0, 1, 1, 0}), w)); }, {a}};
  });
  c.emplace_back("layer_norm", [](std::mt19937_64& r) {
    Tensor a = param({3, 5}, r), g = param({5}, r), b = param({5}, r), w = weight({3, 5}, r);
    return Instance{[=] { return sum(mul(layer_norm(a, g, b), w)); }, {a, g, b}};
  });
  c.emplace_back("reductions", [](std::mt19937_64& r) {
    Tensor a = param({2, 3, 4}, r), w = weight({2, 4}, r);
    return Instance{[=] { return add(sum(mul(mean_axis(a, 1), w)), mul(mean(a), sum(sum_axis(a, 2, true)))); },
                    {a}};
  });
  c.emplace_back("data_movement", [](std::mt19937_64& r) {
    Tensor a = param({2, 3, 4}, r), b = param({2, 2, 4}, r), w = weight({4, 5, 2}, r);
    return Instance{[=] {
                      Tensor p = permute(concat({a, slice(b, 1, 0, 2)}, 1), {2, 1, 0});
                      return sum(mul(reshape(transpose(reshape(p, {4, 10}), 0, 1), {4, 5, 2}), w));
                    },
                    {a, b}};
  });
  c.emplace_back("embedding_pick", [](std::mt19937_64& r) {
    Tensor t = param({5, 3}, r);
    return Instance{[=] { return sum(pick(log_softmax(embedding(t, {4, 0, 4, 2}), 1), {0, 2, 1, 1})); }, {t}};
  });
  c.emplace_back("conv2d", [](std::mt19937_64& r) {
    Tensor x = param({1, 2, 5, 5}, r), k = param({3, 2, 3, 3}, r), w = weight({1, 3, 3, 3}, r);
    return Instance{[=] { return sum(mul(conv2d(x, k, 2, 1), w)); }, {x, k}};
  });
  c.emplace_back("pixel_shuffle", [](std::mt19937_64& r) {
    Tensor x = param({1, 2, 4, 4}, r), w = weight({1, 8, 2, 2}, r), w2 = weight({1, 2, 4, 4}, r);
    return Instance{[=] {
                      Tensor u = pixel_unshuffle(x, 2);
                      return add(sum(mul(square(u), w)), sum(mul(pixel_shuffle(u, 2), w2)));
                    },
                    {x}};
  });
  c.emplace_back("rope", [](std::mt19937_64& r) {
    Tensor x = param({1, 3, 2, 4}, r), w = weight({1, 3, 2, 4}, r);
    return Instance{[=] { return sum(mul(rope_apply(x, {0, 3, 11}), w)); }, {x}};
  });
  return c;
}

double composed_case(Arch arch, std::mt19937_64& rng, double eps) {
  DetectorConfig dc;
  dc.d = 16;
  dc.heads = 2;
  dc.depth = 2;
  dc.queries = 4;
  dc.vision_width = 6;
  dc.vision_tokens = 16;
  dc.vocab = 12;
  dc.max_text = 6;
  dc.ffn = 24;
  GroundingDetector det(dc, rng);
  AdapterConfig ac;
  ac.arch = arch;
  ac.l_lm = 1;
  ac.l_d = 1;
  ac.heads = 2;
  ac.d = dc.d;
  ac.d_lm = 12;
  ac.grid_h = ac.grid_w = 4;
  ac.validate(dc.depth, 2);
  FusionState state = FusionState::init(ac, rng);
  ParamList params;
  state.collect(params, ac);
  // Away from the zero initialisation so that every path carries gradient.
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& [name, t] : params)
    for (double& v : t.mutable_data()) v = n(rng);

  const std::size_t batch = 2, words = 4, text = 3;
  const Tensor vision = Tensor::randn({batch, dc.vision_tokens, dc.vision_width}, rng);
  std::vector<std::size_t> ids, lengths{words, words - 1};
  std::uniform_int_distribution<std::size_t> id(1, dc.vocab - 1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < words; ++j) ids.push_back(j < lengths[b] ? id(rng) : 0);
  PromptInputs in;
  in.vision = Tensor::randn({batch, ac.grid_h * ac.grid_w, ac.d_lm}, rng, 1.0, true);
  in.text = Tensor::randn({batch, text, ac.d_lm}, rng);
  const std::vector<std::size_t> text_lengths{text, text - 1};
  if (ac.uses_text()) in.text_lengths = &text_lengths;
  std::vector<SceneTruth> truth(batch);
  truth[0].boxes = {{0.4, 0.5, 0.2, 0.2}, {0.7, 0.2, 0.1, 0.1}};
  truth[0].labels = {kTargetClass, kOtherClass};
  truth[1].boxes = {{0.3, 0.6, 0.3, 0.2}};
  truth[1].labels = {kTargetClass};

  std::vector<Tensor> ps{in.vision};
  for (auto& [name, t] : params) {
    t.set_requires_grad(true);
    ps.push_back(t);
  }
  GradCheckOptions opt;
  opt.eps = eps;
  opt.max_coords = 120;
  auto f = [&] {
    const DecoderHooks hooks = inject(in, ac, state);
    return detection_loss(det.forward(vision, ids, lengths, words, &hooks), truth);
  };
  return finite_diff_check(f, ps, opt);
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::vector<GradCheckCase> out;
  for (const auto& [name, build] : primitive_cases()) {
    double worst = 0.0;
    for (std::size_t i = 0; i < options.instances; ++i) {
      auto [f, params] = build(rng);
      worst = std::max(worst, finite_diff_check(f, params, options.eps));
    }
    out.push_back({name, worst});
  }
  for (Arch arch : {Arch::kI, Arch::kII, Arch::kIII, Arch::kIV})
    out.push_back({"adapter_detector_loss_" + to_string(arch), composed_case(arch, rng, options.eps)});
  return out;
}

}  // namespace led
