#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "led/core/checkpoint.hpp"
#include "led/core/flops.hpp"
#include "led/core/gradcheck.hpp"
#include "led/core/nn.hpp"
#include "led/core/ops.hpp"
#include "led/core/optim.hpp"

using namespace led;

namespace {

// Naive oracles, independent of the kernels under test.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> naive_conv(const Tensor& x, const Tensor& w, std::size_t s, std::size_t pad) {
  const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const long HO = (H + 2 * static_cast<long>(pad) - KH) / static_cast<long>(s) + 1;
  const long WO = (W + 2 * static_cast<long>(pad) - KW) / static_cast<long>(s) + 1;
  std::vector<double> out;
  for (long b = 0; b < B; ++b)
    for (long o = 0; o < O; ++o)
      for (long y = 0; y < HO; ++y)
        for (long xx = 0; xx < WO; ++xx) {
          double acc = 0.0;
          for (long c = 0; c < C; ++c)
            for (long i = 0; i < KH; ++i)
              for (long j = 0; j < KW; ++j) {
                const long iy = y * static_cast<long>(s) + i - static_cast<long>(pad);
                const long ix = xx * static_cast<long>(s) + j - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
                acc += x.at({static_cast<std::size_t>(b), static_cast<std::size_t>(c),
                             static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) *
                       w.at({static_cast<std::size_t>(o), static_cast<std::size_t>(c),
                             static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
              }
          out.push_back(acc);
        }
  return out;
}

Tensor rand_param(const Shape& s, std::mt19937_64& rng) { return Tensor::randn(s, rng, 1.0, true); }

}  // namespace

TEST(Matmul, OnesProduct) {
  Tensor c = matmul(Tensor::ones({2, 3}), Tensor::ones({3, 2}));
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  for (double v : c.data()) EXPECT_EQ(v, 3.0);
}

TEST(Matmul, IdentityRight) {
  std::mt19937_64 rng(1);
  Tensor a = Tensor::randn({3, 5}, rng);
  std::vector<double> eye(25, 0.0);
  for (int i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
  Tensor c = matmul(a, Tensor({5, 5}, eye));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(2);
  Tensor a = Tensor::randn({4, 5}, rng);
  Tensor b = Tensor::randn({5, 2}, rng);
  const auto want = naive_matmul(a.to_vector(), b.to_vector(), 4, 5, 2);
  Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(c[i], want[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::ones({2, 3}), Tensor::ones({4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
    EXPECT_NE(msg.find("(4,2)"), std::string::npos);
  }
}

TEST(Matmul, BatchedMeterCountsPerBatchElement) {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::randn({3, 4, 5}, rng);
  Tensor b = Tensor::randn({3, 5, 6}, rng);
  FlopsMeter meter;
  {
    FlopsScope scope(meter);
    Tensor c = matmul(a, b);
    for (std::size_t t = 0; t < 3; ++t) {
      const auto want = naive_matmul(slice(a, 0, t, 1).to_vector(), slice(b, 0, t, 1).to_vector(),
                                     4, 5, 6);
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(c[t * 24 + i], want[i], 1e-12);
    }
  }
  EXPECT_EQ(meter.accumulated(), 2u * 3 * 4 * 5 * 6);
}

TEST(Softmax, UniformInput) {
  Tensor y = softmax(Tensor::zeros({3}), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MaxShiftStability) {
  Tensor y = softmax(Tensor({2}, {1000.0, 0.0}), 0);
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, RandomRowsSumToOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({3, 7}, rng, 5.0);
    Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GT(y.at({r, c}), 0.0);
        EXPECT_LE(y.at({r, c}), 1.0);
        s += y.at({r, c});
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // Non-last axis.
    Tensor z = softmax(x, 0);
    for (std::size_t c = 0; c < 7; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < 3; ++r) s += z.at({r, c});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(MaskedSoftmax, MaskedEntriesGetZeroAndRestRenormalise) {
  Tensor x({1, 3}, {0.3, -1.2, 2.0});
  Tensor y = masked_softmax(x, {1, 0, 1});
  EXPECT_EQ(y[1], 0.0);
  const double e0 = std::exp(0.3), e2 = std::exp(2.0);
  EXPECT_NEAR(y[0], e0 / (e0 + e2), 1e-15);
  EXPECT_NEAR(y[2], e2 / (e0 + e2), 1e-15);
  EXPECT_THROW(masked_softmax(x, {0, 0, 0}), DegenerateInputError);
}

TEST(TanhGate, ZeroSaturationAndReference) {
  EXPECT_EQ(tanh_gate(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(tanh_gate(Tensor::scalar(20.0)).item(), 1.0, 1e-8);
  EXPECT_LT(tanh_gate(Tensor::scalar(20.0)).item(), 1.0);
  // Exponential form as an independent reference.
  const double x = 0.5;
  const double ref = (std::exp(2 * x) - 1) / (std::exp(2 * x) + 1);
  EXPECT_NEAR(tanh_gate(Tensor::scalar(x)).item(), ref, 1e-12);
  Tensor big = tanh_gate(Tensor({3}, {-50.0, 3.0, 50.0}));
  for (double v : big.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(std::fabs(v), 1.0);
  }
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::randn({2, 1, 5, 5}, rng);
  Tensor y = conv2d(x, Tensor::ones({1, 1, 1, 1}), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, StrideTwoPadOneHalvesSpatial) {
  std::mt19937_64 rng(6);
  Tensor y = conv2d(Tensor::randn({1, 2, 8, 8}, rng), Tensor::randn({3, 2, 3, 3}, rng), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
}

TEST(Conv2d, MatchesSixLoopOracleAndMeter) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = Tensor::randn({2, 3, 6, 5}, rng);
    Tensor w = Tensor::randn({4, 3, 3, 2}, rng);
    const std::size_t stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
    FlopsMeter meter;
    Tensor y;
    {
      FlopsScope scope(meter);
      y = conv2d(x, w, stride, pad);
    }
    const auto want = naive_conv(x, w, stride, pad);
    ASSERT_EQ(want.size(), y.numel());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
    EXPECT_EQ(meter.accumulated(), 2 * y.dim(0) * y.dim(1) * y.dim(2) * y.dim(3) * 3 * 3 * 2);
  }
}

TEST(Conv2d, NonPositiveExtentRejected) {
  EXPECT_THROW(conv2d(Tensor::ones({1, 1, 2, 2}), Tensor::ones({1, 1, 5, 5}), 1, 0),
               DimensionError);
}

TEST(PixelUnshuffle, FourByFourToSixteenChannels) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  Tensor y = pixel_unshuffle(Tensor({1, 1, 4, 4}, v), 4);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 1, 1}));
  for (int i = 0; i < 16; ++i) EXPECT_EQ(y[i], i);  // channel i*4+j <- (i, j)
}

TEST(PixelUnshuffle, FactorOneIsIdentity) {
  std::mt19937_64 rng(8);
  Tensor x = Tensor::randn({2, 3, 4, 6}, rng);
  Tensor y = pixel_unshuffle(x, 1);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(PixelUnshuffle, ExplicitIndexMapAndInverse) {
  std::mt19937_64 rng(9);
  const std::size_t B = 2, C = 3, H = 4, W = 6, r = 2;
  Tensor x = Tensor::randn({B, C, H, W}, rng);
  Tensor y = pixel_unshuffle(x, r);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t co = c * r * r + (h % r) * r + (w % r);
          EXPECT_EQ(y.at({b, co, h / r, w / r}), x.at({b, c, h, w}));
        }
  EXPECT_EQ(pixel_shuffle(y, r).to_vector(), x.to_vector());
  EXPECT_THROW(pixel_unshuffle(Tensor::ones({1, 1, 5, 4}), 2), DimensionError);
}

TEST(Rope, PositionZeroIsIdentity) {
  std::mt19937_64 rng(10);
  Tensor x = Tensor::randn({1, 3, 2, 4}, rng);
  Tensor y = rope_apply(x, {0, 0, 0});
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(Rope, PairNormPreserved) {
  std::mt19937_64 rng(11);
  Tensor x = Tensor::randn({2, 3, 2, 6}, rng);
  Tensor y = rope_apply(x, {5, 17, 123});
  for (std::size_t i = 0; i < x.numel(); i += 2) {
    const double nx = std::hypot(x[i], x[i + 1]);
    const double ny = std::hypot(y[i], y[i + 1]);
    EXPECT_NEAR(nx, ny, 1e-12);
  }
}

TEST(Rope, InnerProductShiftInvariance) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> pos(0, 200);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor q = Tensor::randn({1, 1, 1, 8}, rng);
    Tensor k = Tensor::randn({1, 1, 1, 8}, rng);
    const std::size_t m = pos(rng), n = pos(rng), s = pos(rng);
    auto dot = [](const Tensor& a, const Tensor& b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
      return acc;
    };
    const double base = dot(rope_apply(q, {m}), rope_apply(k, {n}));
    const double shifted = dot(rope_apply(q, {m + s}), rope_apply(k, {n + s}));
    EXPECT_NEAR(base, shifted, 1e-10);
  }
  EXPECT_THROW(rope_apply(Tensor::ones({1, 1, 1, 3}), {0}), DimensionError);
}

TEST(Backward, LinearSumGradientIsBroadcastInput) {
  std::mt19937_64 rng(13);
  Tensor w = rand_param({3, 2}, rng);
  Tensor x = Tensor::randn({4, 3}, rng);  // constant
  backward(sum(matmul(x, w)));
  // d/dW_ij sum_r sum_j (x W)_rj = sum_r x_ri
  for (std::size_t i = 0; i < 3; ++i) {
    double col = 0.0;
    for (std::size_t r = 0; r < 4; ++r) col += x.at({r, i});
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(w.grad()[i * 2 + j], col, 1e-12);
  }
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, SoftmaxMatmulMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  Tensor a = rand_param({3, 4}, rng);
  Tensor b = rand_param({4, 5}, rng);
  Tensor t = Tensor::randn({3, 5}, rng);
  auto f = [&] { return sum(mul(softmax(matmul(a, b), 1), t)); };
  EXPECT_LT(finite_diff_check(f, {a, b}, 1e-5), 1e-4);
}

TEST(Backward, NonScalarRejectedAndTapeCleared) {
  std::mt19937_64 rng(15);
  Tensor w = rand_param({2, 2}, rng);
  Tensor y = mul_scalar(w, 2.0);
  EXPECT_THROW(backward(y), UsageError);
  Tensor loss = sum(y);
  backward(loss);
  EXPECT_TRUE(w.has_grad());
  EXPECT_THROW(backward(loss), UsageError);  // graph released
}

TEST(Backward, NonFiniteOutputIsAnError) {
  EXPECT_THROW(log(Tensor::zeros({2})), NumericError);
  EXPECT_THROW(exp(Tensor::full({1}, 1000.0)), NumericError);
}

TEST(GradCheck, QuadraticIsExact) {
  std::mt19937_64 rng(16);
  Tensor p = rand_param({5}, rng);
  EXPECT_LT(finite_diff_check([&] { return sum(square(p)); }, {p}, 1e-5), 1e-8);
}

TEST(GradCheck, ZeroStepRejected) {
  std::mt19937_64 rng(17);
  Tensor p = rand_param({2}, rng);
  EXPECT_THROW(finite_diff_check([&] { return sum(p); }, {p}, 0.0), UsageError);
}

// Every differentiable primitive against central differences, 20 instances each.
TEST(GradCheck, EveryPrimitiveOnTwentyRandomInstances) {
  std::mt19937_64 rng(18);
  using Builder = std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>()>;
  std::vector<std::pair<std::string, Builder>> cases;
  auto weight = [&](const Shape& s) { return Tensor::randn(s, rng); };
  cases.emplace_back("add_broadcast", [&] {
    Tensor a = rand_param({2, 3, 4}, rng), b = rand_param({4}, rng), w = weight({2, 3, 4});
    return std::make_pair(std::function<Tensor()>([=] { return sum(mul(add(a, b), w)); }),
                          std::vector<Tensor>{a, b});
  });
  cases.emplace_back("sub_mul_general_broadcast", [&] {
    Tensor a = rand_param({2, 1, 4}, rng), b = rand_param({3, 1}, rng), w = weight({2, 3, 4});
    return std::make_pair(
        std::function<Tensor()>([=] { return sum(mul(mul(sub(a, b), a), w)); }),
        std::vector<Tensor>{a, b});
  });
  cases.emplace_back("unary_chain", [&] {
    Tensor a = rand_param({3, 4}, rng), w = weight({3, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            Tensor u = add(add(gelu(a), sigmoid(a)), tanh(a));
                            Tensor v = add(relu(add_scalar(a, 0.05)), exp(mul_scalar(a, 0.3)));
                            return sum(mul(add(u, add(v, log(add_scalar(square(a), 1.0)))), w));
                          }),
                          std::vector<Tensor>{a});
  });
  cases.emplace_back("abs_away_from_kink", [&] {
    Tensor a = rand_param({6}, rng), w = weight({6});
    for (double& v : a.mutable_data()) v = v >= 0 ? v + 0.1 : v - 0.1;
    return std::make_pair(std::function<Tensor()>([=] { return sum(mul(abs(a), w)); }),
                          std::vector<Tensor>{a});
  });
  cases.emplace_back("batched_matmul", [&] {
    Tensor a = rand_param({2, 3, 4}, rng), b = rand_param({2, 4, 2}, rng), c = rand_param({2, 5}, rng);
    Tensor w = weight({2, 3, 5});
    return std::make_pair(std::function<Tensor()>([=] { return sum(mul(matmul(matmul(a, b), c), w)); }),
                          std::vector<Tensor>{a, b, c});
  });
  cases.emplace_back("softmax_logsoftmax_axes", [&] {
    Tensor a = rand_param({2, 3, 4}, rng), w = weight({2, 3, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            return sum(mul(add(softmax(a, 1), log_softmax(a, 2)), w));
                          }),
                          std::vector<Tensor>{a});
  });
  cases.emplace_back("masked_softmax", [&] {
    Tensor a = rand_param({2, 4}, rng), w = weight({2, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            return sum(mul(masked_softmax(a, {1, 0, 1, 1, 0, 1, 1, 0}), w));
                          }),
                          std::vector<Tensor>{a});
  });
  cases.emplace_back("layer_norm", [&] {
    Tensor a = rand_param({3, 5}, rng), g = rand_param({5}, rng), b = rand_param({5}, rng);
    Tensor w = weight({3, 5});
    return std::make_pair(std::function<Tensor()>([=] { return sum(mul(layer_norm(a, g, b), w)); }),
                          std::vector<Tensor>{a, g, b});
  });
  cases.emplace_back("reductions", [&] {
    Tensor a = rand_param({2, 3, 4}, rng), w = weight({2, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            return add(sum(mul(mean_axis(a, 1), w)),
                                       mul(mean(a), sum(sum_axis(a, 2, true))));
                          }),
                          std::vector<Tensor>{a});
  });
  cases.emplace_back("movement", [&] {
    Tensor a = rand_param({2, 3, 4}, rng), b = rand_param({2, 2, 4}, rng), w = weight({4, 5, 2});
    return std::make_pair(std::function<Tensor()>([=] {
                            Tensor c = concat({a, slice(b, 1, 0, 2)}, 1);  // [2,5,4]
                            Tensor p = permute(c, {2, 1, 0});
                            return sum(mul(reshape(transpose(reshape(p, {4, 10}), 0, 1), {4, 5, 2}),
                                           w));
                          }),
                          std::vector<Tensor>{a, b});
  });
  cases.emplace_back("embedding_pick", [&] {
    Tensor t = rand_param({5, 3}, rng);
    return std::make_pair(std::function<Tensor()>([=] {
                            Tensor e = embedding(t, {4, 0, 4, 2});
                            return sum(pick(log_softmax(e, 1), {0, 2, 1, 1}));
                          }),
                          std::vector<Tensor>{t});
  });
  cases.emplace_back("conv2d", [&] {
    Tensor x = rand_param({1, 2, 5, 5}, rng), k = rand_param({3, 2, 3, 3}, rng);
    Tensor w = weight({1, 3, 3, 3});
    return std::make_pair(std::function<Tensor()>([=] { return sum(mul(conv2d(x, k, 2, 1), w)); }),
                          std::vector<Tensor>{x, k});
  });
  cases.emplace_back("pixel_unshuffle_shuffle", [&] {
    Tensor x = rand_param({1, 2, 4, 4}, rng), w = weight({1, 8, 2, 2}), w2 = weight({1, 2, 4, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            Tensor u = pixel_unshuffle(x, 2);
                            return add(sum(mul(square(u), w)), sum(mul(pixel_shuffle(u, 2), w2)));
                          }),
                          std::vector<Tensor>{x});
  });
  cases.emplace_back("rope", [&] {
    Tensor x = rand_param({1, 3, 2, 4}, rng), w = weight({1, 3, 2, 4});
    return std::make_pair(std::function<Tensor()>([=] {
                            return sum(mul(rope_apply(x, {0, 3, 11}), w));
                          }),
                          std::vector<Tensor>{x});
  });
  for (const auto& [name, build] : cases) {
    double worst = 0.0;
    for (int instance = 0; instance < 20; ++instance) {
      auto [f, params] = build();
      worst = std::max(worst, finite_diff_check(f, params, 1e-5));
    }
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(FlopsMeter, ElementwiseAndSoftmaxConventions) {
  FlopsMeter meter;
  {
    FlopsScope scope(meter);
    Tensor x = Tensor::ones({3, 4});
    add(x, x);         // 12
    softmax(x, 1);     // 36
    layer_norm(x, Tensor::ones({4}), Tensor::zeros({4}));  // 96
    reshape(x, {12});  // 0
  }
  EXPECT_EQ(meter.accumulated(), 12u + 36u + 96u);
}

TEST(FlopsMeter, BackwardNotMeteredAndScopesNest) {
  std::mt19937_64 rng(19);
  Tensor w = rand_param({3, 3}, rng);
  FlopsMeter outer, inner;
  {
    FlopsScope a(outer);
    Tensor y = matmul(w, w);  // 54
    {
      FlopsScope b(inner);
      Tensor s = sum(y);  // 9
      backward(s);
    }
  }
  EXPECT_EQ(inner.accumulated(), 9u);
  EXPECT_EQ(outer.accumulated(), 63u);
}

TEST(Attention, AnalyticFlopsMatchMeter) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t B = 1 + trial % 2, Tq = 2 + trial, Tk = 3 + 2 * trial, d = 8, h = 2;
    auto w = AttentionWeights::init(d, rng);
    Tensor xq = Tensor::randn({B, Tq, d}, rng), xk = Tensor::randn({B, Tk, d}, rng);
    AttentionOptions opt;
    opt.heads = h;
    const bool rope = trial % 2 == 0;
    if (rope) {
      std::vector<std::size_t> qp(Tq), kp(Tk);
      for (std::size_t i = 0; i < Tq; ++i) qp[i] = i;
      for (std::size_t i = 0; i < Tk; ++i) kp[i] = i;
      opt.q_positions = qp;
      opt.k_positions = kp;
    }
    FlopsMeter meter;
    {
      FlopsScope s(meter);
      multi_head_attention(xq, xk, w, opt);
    }
    EXPECT_EQ(meter.accumulated(), attention_flops(B, Tq, Tk, d, h, rope));
  }
}

TEST(Checkpoint, RoundTripThroughF32) {
  std::mt19937_64 rng(21);
  const auto dir = std::filesystem::temp_directory_path() / "led_ckpt_test";
  std::filesystem::remove_all(dir);
  Tensor a = Tensor::randn({2, 3}, rng), b = Tensor::randn({4}, rng);
  save_checkpoint(dir, {{"x.a", a}, {"x.b", b}});
  Tensor a2 = Tensor::zeros({2, 3}), b2 = Tensor::zeros({4});
  load_checkpoint(dir, {{"x.a", a2}, {"x.b", b2}});
  for (std::size_t i = 0; i < a.numel(); ++i)
    EXPECT_EQ(a2[i], static_cast<double>(static_cast<float>(a[i])));
  // Header layout.
  std::ifstream in(dir / "x.a.ledt", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 8 + 6 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "LEDT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[20], 3);
  Tensor wrong = Tensor::zeros({3, 2});
  EXPECT_THROW(load_checkpoint(dir, {{"x.a", wrong}}), UsageError);
  EXPECT_THROW(load_checkpoint(dir, {{"x.c", wrong}}), UsageError);
  std::filesystem::remove_all(dir);
}

TEST(Optimizer, CosineScheduleAndPlainStep) {
  Tensor p = Tensor::full({1}, 1.0, true);
  Optimizer opt(OptimizerKind::kSgd, {{{p}, 0.1}}, 4);
  EXPECT_DOUBLE_EQ(opt.current_scale(), 1.0);
  backward(sum(mul_scalar(p, 3.0)));
  opt.step();
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.1 * 3.0);
  EXPECT_NEAR(opt.current_scale(), 0.5 * (1 + std::cos(M_PI / 4)), 1e-15);
  EXPECT_FALSE(p.has_grad());
}
