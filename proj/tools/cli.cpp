#include "cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "led/analysis/analysis.hpp"
#include "led/core/checkpoint.hpp"
#include "led/harness/config.hpp"
#include "led/harness/gradcheck_suite.hpp"
#include "led/harness/report.hpp"
#include "led/harness/scenes.hpp"
#include "led/harness/training.hpp"

namespace led {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file, or a report whose config record is reused");
  cmd->add_option("--seed", c.seed, "experiment seed (gen-data: data seed)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.set, "extra key=value setting, applied after the file");
}

ExperimentConfig resolve_config(const Common& c, bool seed_is_data_seed = false) {
  ExperimentConfig cfg;
  if (!c.config.empty()) {
    cfg = fs::path(c.config).extension() == ".jsonl" ? embedded_config(c.config) : load_config(c.config);
  }
  std::map<std::string, std::string> kv;
  for (const auto& kvs : c.set) {
    const auto eq = kvs.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kvs + "'");
    kv[kvs.substr(0, eq)] = kvs.substr(eq + 1);
  }
  if (c.seed) kv[seed_is_data_seed ? "data.seed" : "seed"] = std::to_string(*c.seed);
  if (!kv.empty()) {
    // Re-apply the file's values first so that --set wins and every setting is validated together.
    std::map<std::string, std::string> all;
    for (const auto& [k, v] : config_entries(cfg)) all[k] = v;
    for (const auto& [k, v] : kv) all[k] = v;
    ExperimentConfig fresh;
    apply_settings(fresh, all);
    cfg = fresh;
  }
  cfg.validate();
  return cfg;
}

fs::path default_in(const Common& c, const std::string& in, std::size_t stage) {
  return in.empty() ? fs::path(c.out) / ("stage" + std::to_string(stage)) : fs::path(in);
}

void print_metrics(const char* label, const GroundingMetrics& m) {
  std::printf("%-28s acc %.4f  mean IoU %.4f  (n=%zu)\n", label, m.accuracy, m.mean_iou, m.count);
}

nlohmann::json box_json(const Box& b) { return {b[0], b[1], b[2], b[3]}; }

int gen_data(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c, true);
  const Dataset data = Dataset::generate(cfg);
  const Vocabulary& v = vocabulary();
  RunReport report("gen-data", cfg);
  CsvTable summary{{"split", "count", "category", "spatial"}, {}};
  auto emit = [&](const std::string& name, const std::vector<SyntheticScene>& scenes) {
    std::size_t spatial = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto& s = scenes[i];
      nlohmann::json objects = nlohmann::json::array();
      for (const auto& o : s.objects) {
        objects.push_back({{"shape", v.word(v.shape(o.shape))}, {"color", v.word(v.color(o.color))}, {"box", box_json(o.box)}});
      }
      spatial += s.query.kind == QueryKind::kSpatial;
      report.add({{"type", "scene"},
                  {"split", name},
                  {"index", i},
                  {"objects", objects},
                  {"caption", v.decode(s.caption)},
                  {"query", v.decode(s.query.tokens)},
                  {"kind", to_string(s.query.kind)},
                  {"target", s.query.target}});
    }
    summary.rows.push_back({name, std::to_string(scenes.size()), std::to_string(scenes.size() - spatial),
                            std::to_string(spatial)});
  };
  emit("pretrain", data.pretrain);
  emit("train", data.train);
  emit("val-category", data.val_category);
  emit("val-spatial", data.val_spatial);
  report.write(fs::path(c.out) / "scenes.jsonl");
  summary.write(fs::path(c.out) / "scenes.csv");
  std::cout << summary.to_string();
  return 0;
}

CsvTable stage_table(const StageResult& r) {
  CsvTable t{{"metric", "value"}, {}};
  t.rows.push_back({"stage", std::to_string(r.stage)});
  t.rows.push_back({"steps", std::to_string(r.steps.size())});
  t.rows.push_back({"initial_val_loss", format_number(r.initial_val_loss)});
  t.rows.push_back({"final_val_loss", format_number(r.final_val_loss)});
  t.rows.push_back({"max_frozen_grad_norm", format_number(r.max_frozen_grad_norm)});
  if (r.val_category) t.rows.push_back({"val_category_accuracy", format_number(r.val_category->accuracy)});
  if (r.val_spatial) t.rows.push_back({"val_spatial_accuracy", format_number(r.val_spatial->accuracy)});
  return t;
}

int train(const Common& c, std::size_t stage, const std::string& in, const std::string& variant_name) {
  const ExperimentConfig cfg = resolve_config(c);
  if (stage > 3) throw ConfigError("--stage must be 0..3");
  Stage3Variant variant = Stage3Variant::kFusion;
  if (variant_name == "substitute") variant = Stage3Variant::kSubstitute;
  else if (variant_name != "fusion") throw ConfigError("--variant must be fusion or substitute");
  const fs::path out = fs::path(c.out) / ("stage" + std::to_string(stage) + (variant_name == "fusion" ? "" : "_" + variant_name));
  const fs::path from = stage > 0 ? default_in(c, in, stage - 1) : fs::path();
  if (stage > 0) require_checkpoint(from, stage);
  const Dataset data = Dataset::generate(cfg);
  const StageResult r = run_stage(cfg, stage, {from, out}, data, variant);
  RunReport report("train", cfg);
  report.add({{"type", "command"}, {"stage", stage}, {"variant", variant_name}});
  add_stage_records(report, r);
  const std::string stem = out.filename().string();
  report.write(fs::path(c.out) / ("train_" + stem + ".jsonl"));
  const CsvTable t = stage_table(r);
  t.write(fs::path(c.out) / ("train_" + stem + ".csv"));
  std::cout << t.to_string();
  return 0;
}

int ablate(const Common& c, const std::string& in, const std::vector<std::size_t>& layers,
           const std::vector<std::uint64_t>& seeds) {
  const ExperimentConfig cfg = resolve_config(c);
  const Dataset data = Dataset::generate(cfg);
  const auto results = layer_sweep(cfg, default_in(c, in, 2), data, layers, seeds);
  RunReport report("ablate-layers", cfg);
  for (const auto& r : results) {
    report.add({{"type", "ablation"},
                {"l_lm", r.l_lm},
                {"seed", r.seed},
                {"val_category", metrics_json(r.val_category)},
                {"val_spatial", metrics_json(r.val_spatial)},
                {"initial_val_loss", r.initial_val_loss},
                {"final_val_loss", r.final_val_loss}});
  }
  CsvTable means{{"l_lm", "mean_val_spatial_accuracy", "mean_val_category_accuracy", "rank"}, {}};
  for (const auto& m : layer_means(results)) {
    report.add({{"type", "layer_mean"}, {"l_lm", m.l_lm}, {"spatial_accuracy", m.spatial_accuracy},
                {"category_accuracy", m.category_accuracy}, {"rank", m.rank}});
    means.rows.push_back({std::to_string(m.l_lm), format_number(m.spatial_accuracy),
                          format_number(m.category_accuracy), std::to_string(m.rank)});
  }
  report.write(fs::path(c.out) / "ablation.jsonl");
  ablation_table(results).write(fs::path(c.out) / "ablation.csv");
  means.write(fs::path(c.out) / "ablation_means.csv");
  std::cout << means.to_string();
  return 0;
}

int analyze_attention(const Common& c, const std::string& in, std::size_t count, const std::string& split) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path from = default_in(c, in, 2);
  require_checkpoint(from, 3);
  ModelSet models(cfg);
  load_models(models, from);
  SceneOptions so;
  so.canvas = cfg.mllm.image;
  const auto scenes = generate_scenes(cfg.data.seed, count, parse_split(split), so);
  std::vector<std::size_t> rows(scenes.size());
  std::vector<std::vector<std::size_t>> text;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    rows[i] = i;
    text.push_back(instruction_tokens(scenes[i]));
  }
  const AttentionProfile p = attention_medians(models.mllm, stack_images(scenes, rows), make_text_batch(text));
  RunReport report("analyze-attention", cfg);
  for (const auto& l : p.layers) {
    nlohmann::json j = {{"type", "attention"}, {"layer", l.layer}};
    const char* names[] = {"system", "vision", "text"};
    for (int m = 0; m < 3; ++m)
      if (l.by_key[m]) j[names[m]] = *l.by_key[m];
    report.add(j);
  }
  report.write(fs::path(c.out) / "attention_profile.jsonl");
  const CsvTable t = p.table();
  t.write(fs::path(c.out) / "attention_profile.csv");
  std::cout << t.to_string();
  return 0;
}

int flops_report(const Common& c, std::size_t warmup, std::size_t repetitions) {
  const ExperimentConfig cfg = resolve_config(c);
  const ComputeReport r = compute_report(cfg, {warmup, repetitions});
  RunReport report("flops-report", cfg);
  for (const auto& j : r.records()) report.add(j);
  report.write(fs::path(c.out) / "compute_report.jsonl");
  const CsvTable t = r.table();
  t.write(fs::path(c.out) / "compute_report.csv");
  std::cout << t.to_string();
  return 0;
}

int substitute_baseline(const Common& c, const std::string& in, const std::vector<std::uint64_t>& seeds) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path from = default_in(c, in, 2);
  require_checkpoint(from, 3);
  const Dataset data = Dataset::generate(cfg);
  ModelSet models(cfg);
  load_models(models, from);
  const Stage3Session session(models, data, cfg);
  RunReport report("substitute-baseline", cfg);
  CsvTable t{{"seed", "variant", "val_spatial_accuracy", "val_category_accuracy"}, {}};
  const GroundingMetrics bs = session.baseline(Split::kValSpatial), bc = session.baseline(Split::kValCategory);
  report.add({{"type", "baseline"}, {"val_spatial", metrics_json(bs)}, {"val_category", metrics_json(bc)}});
  t.rows.push_back({"-", "baseline", format_number(bs.accuracy), format_number(bc.accuracy)});
  for (std::uint64_t seed : seeds) {
    for (Stage3Variant v : {Stage3Variant::kFusion, Stage3Variant::kSubstitute}) {
      const Stage3Outcome o = session.train({seed, v, cfg.adapter, cfg.stage3});
      report.add({{"type", "stage3"},
                  {"seed", seed},
                  {"variant", to_string(v)},
                  {"val_spatial", metrics_json(*o.result.val_spatial)},
                  {"val_category", metrics_json(*o.result.val_category)},
                  {"final_val_loss", o.result.final_val_loss}});
      t.rows.push_back({std::to_string(seed), to_string(v), format_number(o.result.val_spatial->accuracy),
                        format_number(o.result.val_category->accuracy)});
    }
  }
  report.write(fs::path(c.out) / "substitution.jsonl");
  t.write(fs::path(c.out) / "substitution.csv");
  std::cout << t.to_string();
  return 0;
}

int gradcheck(const Common& c, std::size_t instances) {
  const ExperimentConfig cfg = resolve_config(c);
  GradCheckSuiteOptions opt;
  opt.seed = cfg.seed;
  opt.instances = instances;
  const auto cases = run_gradcheck_suite(opt);
  CsvTable t{{"case", "max_rel_error", "pass"}, {}};
  bool ok = true;
  for (const auto& g : cases) {
    const bool pass = g.max_rel_error < 1e-4;
    ok = ok && pass;
    t.rows.push_back({g.name, format_number(g.max_rel_error), pass ? "yes" : "no"});
  }
  t.write(fs::path(c.out) / "gradcheck.csv");
  std::cout << t.to_string();
  return ok ? 0 : 1;
}

int eval(const Common& c, const std::string& in, std::size_t stage) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path from = default_in(c, in, stage);
  if (!fs::exists(from / "manifest.txt")) throw UsageError("missing checkpoint " + (from / "manifest.txt").string());
  const Dataset data = Dataset::generate(cfg);
  ModelSet models(cfg);
  load_models(models, from);
  RunReport report("eval", cfg);
  CsvTable t{{"model", "split", "accuracy", "mean_iou", "count"}, {}};
  auto add = [&](const std::string& model, Split s, const GroundingMetrics& m) {
    report.add({{"type", "eval"}, {"model", model}, {"split", to_string(s)}, {"metrics", metrics_json(m)}});
    report.add({{"type", "records"}, {"model", model}, {"split", to_string(s)}, {"jsonl", records_jsonl(m)}});
    t.rows.push_back({model, to_string(s), format_number(m.accuracy), format_number(m.mean_iou), std::to_string(m.count)});
    print_metrics((model + " " + to_string(s)).c_str(), m);
  };
  const Stage3Session session(models, data, cfg);
  for (Split s : {Split::kValCategory, Split::kValSpatial}) add("detector", s, session.baseline(s));
  if (checkpoint_has(from, "adapter.gate") || checkpoint_has(from, "substitute.map.w")) {
    Stage3Variant variant = Stage3Variant::kFusion;
    const Stage3Outcome o = load_stage3(cfg, from, variant);
    const Stage3Run run{cfg.seed, variant, cfg.adapter, cfg.stage3};
    for (Split s : {Split::kValCategory, Split::kValSpatial}) add(to_string(variant), s, session.evaluate(s, run, o));
  }
  report.write(fs::path(c.out) / "eval.jsonl");
  t.write(fs::path(c.out) / "eval.csv");
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Grounding detector with MLLM-derived adaptation prompts: data, training and analysis"};
  app.require_subcommand(1);
  Common c;
  std::string in, variant = "fusion", split = "val-spatial";
  std::size_t stage = 0, count = 64, warmup = 5, repetitions = 50, instances = 5;
  std::vector<std::size_t> layers{0, 1, 2, 4};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic splits");
  auto* tr = app.add_subcommand("train", "run one training stage");
  tr->add_option("--stage", stage, "0: detector, 1: captions, 2: instructions, 3: adapter")->required();
  tr->add_option("--in", in, "previous stage checkpoint (default <out>/stage<k-1>)");
  tr->add_option("--variant", variant, "stage 3: fusion or substitute");
  auto* ab = app.add_subcommand("ablate-layers", "stage-3 sweep over the LLM source layer");
  ab->add_option("--in", in, "stage-2 checkpoint (default <out>/stage2)");
  ab->add_option("--layers", layers)->delimiter(',');
  ab->add_option("--seeds", seeds)->delimiter(',');
  auto* at = app.add_subcommand("analyze-attention", "per-layer attention score medians");
  at->add_option("--in", in, "stage-2 checkpoint (default <out>/stage2)");
  at->add_option("--count", count, "scenes in the batch");
  at->add_option("--split", split, "train, val-category or val-spatial");
  auto* fl = app.add_subcommand("flops-report", "parameters, FLOPs and latency per component");
  fl->add_option("--warmup", warmup);
  fl->add_option("--repetitions", repetitions);
  auto* sb = app.add_subcommand("substitute-baseline", "vision-feature substitution against fusion");
  sb->add_option("--in", in, "stage-2 checkpoint (default <out>/stage2)");
  sb->add_option("--seeds", seeds)->delimiter(',');
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--instances", instances, "random instances per primitive");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation splits");
  ev->add_option("--in", in, "checkpoint (default <out>/stage<stage>)");
  ev->add_option("--stage", stage, "stage whose checkpoint is read by default");
  for (auto* cmd : {gen, tr, ab, at, fl, sb, gc, ev}) add_common(cmd, c);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    if (*gen) return gen_data(c);
    if (*tr) return train(c, stage, in, variant);
    if (*ab) return ablate(c, in, layers, seeds);
    if (*at) return analyze_attention(c, in, count, split);
    if (*fl) return flops_report(c, warmup, repetitions);
    if (*sb) return substitute_baseline(c, in, seeds);
    if (*gc) return gradcheck(c, instances);
    if (*ev) return eval(c, in, stage);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace led
