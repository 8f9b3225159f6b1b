#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "led/analysis/analysis.hpp"
#include "led/core/checkpoint.hpp"
#include "led/harness/scenes.hpp"

namespace led {
namespace {

namespace fs = std::filesystem;

MllmConfig small_mllm() {
  MllmConfig c;
  c.d_lm = 16;
  c.layers = 3;
  c.heads = 2;
  c.vocab = 13;
  c.ffn = 24;
  c.image = 16;
  c.patch = 4;
  c.d_v = 6;
  c.shuffle_r = 2;
  c.projector_in = 24;
  c.projector_hidden = 12;
  return c;
}

TextBatch text_rows(const std::vector<std::size_t>& lengths, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> tok(1, vocab - 1);
  std::vector<std::vector<std::size_t>> rows;
  for (std::size_t n : lengths) {
    rows.emplace_back(n);
    for (auto& t : rows.back()) t = tok(rng);
  }
  return make_text_batch(rows);
}

double sorted_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

TEST(Median, OddEvenAndEmpty) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_EQ(median({-1.0}), -1.0);
  EXPECT_THROW(median({}), DegenerateInputError);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + trial);
    for (auto& x : v) x = n(rng);
    EXPECT_EQ(median(v), sorted_median(v));
  }
}

TEST(AttentionMedians, MatchesFlatSortOracle) {
  std::mt19937_64 rng(2);
  const MllmConfig cfg = small_mllm();
  const MiniMllm m(cfg, rng);
  const Tensor images = Tensor::uniform({3, 3, 16, 16}, rng, 0, 1);
  const TextBatch text = text_rows({4, 1, 6}, cfg.vocab, rng);
  const AttentionProfile p = attention_medians(m, images, text);
  ASSERT_EQ(p.layers.size(), cfg.layers);

  TokenLayout layout;
  NoGradGuard guard;
  const auto states = m.run(images, text, cfg.layers, &layout);
  const std::size_t seq = layout.length();
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    const Tensor s = m.layer_scores(l, states[l - 1].values);
    ASSERT_EQ(s.shape(), (Shape{3, cfg.heads, seq, seq}));
    for (int modality = 0; modality < 3; ++modality) {
      double sum = 0.0;
      int groups = 0;
      for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t len = cfg.system_len + layout.vision.length + text.lengths[b];
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          std::vector<double> flat;
          for (std::size_t q = 0; q < seq; ++q)
            for (std::size_t k = 0; k < seq; ++k)
              if (q < len && k <= q && static_cast<int>(layout.tags[k]) == modality)
                flat.push_back(s.at({b, h, q, k}));
          if (flat.empty()) continue;
          sum += sorted_median(flat);
          ++groups;
        }
      }
      ASSERT_TRUE(p.layers[l - 1].by_key[modality].has_value());
      EXPECT_NEAR(*p.layers[l - 1].by_key[modality], sum / groups, 1e-12);
    }
    EXPECT_EQ(p.layers[l - 1].layer, l);
    EXPECT_TRUE(std::isfinite(*p.layers[l - 1].vision()));
  }
}

TEST(AttentionMedians, ZeroKeyProjectionGivesZeroMedian) {
  std::mt19937_64 rng(3);
  MllmConfig cfg = small_mllm();
  cfg.layers = 1;
  MiniMllm m(cfg, rng);
  m.layers[0].attn.k.w = Tensor::zeros(m.layers[0].attn.k.w.shape());
  if (m.layers[0].attn.k.b.defined()) m.layers[0].attn.k.b = Tensor::zeros(m.layers[0].attn.k.b.shape());
  const AttentionProfile p = attention_medians(m, Tensor::uniform({2, 3, 16, 16}, rng, 0, 1),
                                               text_rows({3, 2}, cfg.vocab, rng));
  ASSERT_EQ(p.layers.size(), 1u);
  for (const auto& v : p.layers[0].by_key) {
    ASSERT_TRUE(v.has_value());
    EXPECT_EQ(*v, 0.0);
  }
}

TEST(AttentionMedians, DeterministicAndTextOptional) {
  std::mt19937_64 rng(4);
  const MllmConfig cfg = small_mllm();
  const MiniMllm m(cfg, rng);
  const Tensor images = Tensor::uniform({2, 3, 16, 16}, rng, 0, 1);
  const TextBatch text = text_rows({2, 5}, cfg.vocab, rng);
  const auto a = attention_medians(m, images, text);
  const auto b = attention_medians(m, images, text);
  for (std::size_t l = 0; l < a.layers.size(); ++l) EXPECT_EQ(a.layers[l].by_key, b.layers[l].by_key);
  const CsvTable t = a.table();
  EXPECT_EQ(t.header, (std::vector<std::string>{"layer", "modality", "median"}));
  EXPECT_EQ(t.rows.size(), 3 * cfg.layers);

  TextBatch empty;
  empty.lengths = {0, 0};
  const auto v = attention_medians(m, images, empty);
  for (const auto& l : v.layers) {
    EXPECT_TRUE(l.vision().has_value());
    EXPECT_FALSE(l.by_key[static_cast<int>(Modality::kText)].has_value());
  }
}

ExperimentConfig small_experiment(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 1000);
  static const char* archs[] = {"I", "II", "III", "IV"};
  const std::size_t layers = 2 + pick(rng) % 3, depth = 2 + pick(rng) % 3;
  ExperimentConfig cfg;
  apply_settings(cfg, {{"mllm.d_lm", std::to_string(8 * (2 + pick(rng) % 2))},
                       {"mllm.layers", std::to_string(layers)},
                       {"mllm.heads", "2"},
                       {"mllm.ffn", "24"},
                       {"mllm.d_v", "8"},
                       {"mllm.projector_in", "32"},
                       {"mllm.projector_hidden", "16"},
                       {"detector.d", std::to_string(8 * (2 + pick(rng) % 2))},
                       {"detector.heads", "2"},
                       {"detector.depth", std::to_string(depth)},
                       {"detector.ffn", "24"},
                       {"adapter.heads", "2"},
                       {"adapter.arch", archs[pick(rng) % 4]},
                       {"adapter.l_lm", std::to_string(pick(rng) % (layers + 1))},
                       {"adapter.l_d", std::to_string(1 + pick(rng) % depth)},
                       {"adapter.conv_stride", std::to_string(1 + pick(rng) % 2)},
                       {"init_seed", std::to_string(pick(rng))}});
  return cfg;
}

TEST(ComputeReport, MeteredEqualsAnalyticAndDeltasAdd) {
  std::mt19937_64 rng(5);
  ComputeOptions fast;
  fast.warmup = 1;
  fast.repetitions = 3;
  for (int trial = 0; trial < 10; ++trial) {
    const ExperimentConfig cfg = small_experiment(rng);
    const ComputeReport r = compute_report(cfg, fast);
    ASSERT_EQ(r.rows.size(), 4u);
    for (const auto& row : r.rows) {
      EXPECT_EQ(row.flops_metered, row.flops_analytic) << row.framework << " trial " << trial;
      EXPECT_GT(row.params, 0u);
      EXPECT_GE(row.latency_ms, row.delta ? -1e9 : 0.0);
    }
    const auto& led = r.row("LED");
    const auto& adapter = r.rows[2];
    const auto& llm = r.rows[3];
    EXPECT_EQ(led.flops_analytic, adapter.flops_analytic + llm.flops_analytic);
    EXPECT_EQ(led.params, adapter.params + llm.params);
    EXPECT_FALSE(r.rows[0].delta);
    EXPECT_TRUE(led.delta && adapter.delta && llm.delta);
  }
}

TEST(ComputeReport, DeskDefaultsAdapterParamsByHand) {
  ComputeOptions fast;
  fast.warmup = 0;
  fast.repetitions = 1;
  const ExperimentConfig cfg;
  const ComputeReport r = compute_report(cfg, fast);
  // conv 64x64x3x3 + bias, W_q/W_k/W_v 64x64, gate per head, out_proj + bias.
  const std::uint64_t adapter = 64 * 64 * 9 + 64 + 3 * 64 * 64 + 4 + 64 * 64 + 64;
  EXPECT_EQ(r.row("- Adapter").params, adapter);
  // Projector 128->128->64, system prefix 2x64, two decoder layers.
  const std::uint64_t layer = 2 * 2 * 64 + 4 * (64 * 64 + 64) + (64 * 128 + 128) + (128 * 64 + 64);
  const std::uint64_t llm = (128 * 128 + 128) + (128 * 64 + 64) + 2 * 64 + 2 * layer;
  EXPECT_EQ(r.rows[3].params, llm);
  EXPECT_EQ(r.rows[3].framework, "- LLM (first 2 layers)");
}

TEST(ComputeReport, TableColumns) {
  ComputeOptions fast;
  fast.warmup = 0;
  fast.repetitions = 1;
  const ComputeReport r = compute_report(ExperimentConfig{}, fast);
  const CsvTable t = r.table();
  EXPECT_EQ(t.header, (std::vector<std::string>{"Framework", "Params", "GFLOPs", "Latency"}));
  ASSERT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0][0], "Detector");
  EXPECT_EQ(t.rows[1][0], "LED");
  EXPECT_EQ(t.rows[1][1].front(), '+');
  EXPECT_EQ(t.rows[0][1].back(), 'M');
  EXPECT_EQ(t.rows[0][2].back(), 'G');
  EXPECT_EQ(r.records().size(), 4u);
  EXPECT_EQ(r.records()[0].at("framework"), "Detector");
}

// The published reference row set is additive in the same way.
TEST(ComputeReport, ReferenceTableIsAdditive) {
  const double params[] = {58.0, 2.2, 56.0}, gflops[] = {36.0, 2.0, 34.0};
  EXPECT_NEAR(params[1] + params[2], params[0], 0.5);
  EXPECT_NEAR(gflops[1] + gflops[2], gflops[0], 1e-9);
  EXPECT_NEAR(gflops[0] / 412.0, 0.087, 5e-4);
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  apply_settings(cfg, {{"data.pretrain_scenes", "16"},
                       {"data.train_scenes", "16"},
                       {"data.eval_scenes", "8"},
                       {"mllm.d_lm", "16"},
                       {"mllm.layers", "4"},
                       {"mllm.heads", "2"},
                       {"mllm.ffn", "16"},
                       {"mllm.d_v", "8"},
                       {"mllm.projector_in", "32"},
                       {"mllm.projector_hidden", "16"},
                       {"detector.d", "16"},
                       {"detector.heads", "2"},
                       {"detector.depth", "2"},
                       {"detector.ffn", "16"},
                       {"adapter.heads", "2"},
                       {"adapter.l_d", "2"},
                       {"stage3.steps", "2"},
                       {"stage3.batch", "4"}});
  return cfg;
}

TEST(LayerSweep, CountsReproducibilityAndMissingCheckpoint) {
  const ExperimentConfig cfg = tiny_config();
  const Dataset data = Dataset::generate(cfg);
  const fs::path dir = fs::temp_directory_path() / "led_analysis_sweep";
  fs::remove_all(dir);
  EXPECT_THROW(layer_sweep(cfg, dir, data, {0, 1}, {0}), UsageError);
  {
    ModelSet models(cfg);
    save_checkpoint(dir, models.params());
  }
  const auto results = layer_sweep(cfg, dir, data, {0, 1, 2, 4}, {0, 1, 2});
  ASSERT_EQ(results.size(), 12u);
  EXPECT_EQ(results[0].l_lm, 0u);
  EXPECT_EQ(results[11].l_lm, 4u);
  EXPECT_EQ(results[4].seed, 1u);
  const auto again = layer_sweep(cfg, dir, data, {2}, {1});
  EXPECT_EQ(again[0].final_val_loss, results[7].final_val_loss);
  EXPECT_EQ(again[0].val_spatial.mean_iou, results[7].val_spatial.mean_iou);

  const auto means = layer_means(results);
  ASSERT_EQ(means.size(), 4u);
  std::vector<std::size_t> ranks;
  for (const auto& m : means) ranks.push_back(m.rank);
  std::sort(ranks.begin(), ranks.end());
  EXPECT_EQ(ranks, (std::vector<std::size_t>{1, 2, 3, 4}));
  for (const auto& a : means)
    for (const auto& b : means)
      if (a.rank < b.rank) EXPECT_GE(a.spatial_accuracy, b.spatial_accuracy);
  const CsvTable t = ablation_table(results);
  EXPECT_EQ(t.rows.size(), 12u);
  EXPECT_EQ(t.header[0], "l_lm");
  fs::remove_all(dir);
}

TEST(LayerMeans, AveragesPerLayer) {
  std::vector<AblationResult> r(4);
  r[0].l_lm = r[1].l_lm = 0;
  r[2].l_lm = r[3].l_lm = 2;
  r[0].val_spatial.accuracy = 0.1;
  r[1].val_spatial.accuracy = 0.3;
  r[2].val_spatial.accuracy = 0.5;
  r[3].val_spatial.accuracy = 0.4;
  const auto m = layer_means(r);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m[0].spatial_accuracy, 0.2);
  EXPECT_DOUBLE_EQ(m[1].spatial_accuracy, 0.45);
  EXPECT_EQ(m[1].rank, 1u);
  EXPECT_EQ(m[0].rank, 2u);
}

}  // namespace
}  // namespace led
