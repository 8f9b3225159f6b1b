#include "led/harness/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "led/harness/scenes.hpp"

namespace led {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string format(std::size_t v) { return std::to_string(v); }
std::string format(std::uint64_t v, int) { return std::to_string(v); }
std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string format(bool v) { return v ? "true" : "false"; }

template <class T>
T parse_unsigned(const std::string& key, const std::string& text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) {
    throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

// Binds one key to a field for both reading and writing.
struct Binding {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

Binding bind(std::string key, std::size_t& f) {
  return {key, [&f] { return format(f); }, [&f, key](const std::string& s) { f = parse_unsigned<std::size_t>(key, s); }};
}
Binding bind_u64(std::string key, std::uint64_t& f) {
  return {key, [&f] { return format(f, 0); }, [&f, key](const std::string& s) { f = parse_unsigned<std::uint64_t>(key, s); }};
}
Binding bind(std::string key, double& f) {
  return {key, [&f] { return format(f); }, [&f, key](const std::string& s) { f = parse_double(key, s); }};
}
Binding bind(std::string key, bool& f) {
  return {key, [&f] { return format(f); }, [&f, key](const std::string& s) { f = parse_bool(key, s); }};
}
Binding bind(std::string key, OptimizerKind& f) {
  return {key, [&f] { return to_string(f); }, [&f](const std::string& s) { f = parse_optimizer(s); }};
}
Binding bind(std::string key, Arch& f) {
  return {key, [&f] { return to_string(f); }, [&f](const std::string& s) { f = parse_arch(s); }};
}

void bind_stage(std::vector<Binding>& out, const std::string& p, TrainConfig& t) {
  out.push_back(bind(p + "steps", t.steps));
  out.push_back(bind(p + "batch", t.batch));
  out.push_back(bind(p + "optimizer", t.optimizer));
  out.push_back(bind(p + "clip", t.clip));
  out.push_back(bind(p + "lr_vision", t.lr_vision));
  out.push_back(bind(p + "lr_detector", t.lr_detector));
  out.push_back(bind(p + "lr_projector", t.lr_projector));
  out.push_back(bind(p + "lr_llm", t.lr_llm));
  out.push_back(bind(p + "lr_adapter", t.lr_adapter));
  out.push_back(bind(p + "train_vision", t.train_vision));
  out.push_back(bind(p + "train_detector", t.train_detector));
  out.push_back(bind(p + "train_projector", t.train_projector));
  out.push_back(bind(p + "train_llm", t.train_llm));
  out.push_back(bind(p + "train_adapter", t.train_adapter));
  out.push_back(bind(p + "log_every", t.log_every));
}

std::vector<Binding> bindings(ExperimentConfig& c) {
  std::vector<Binding> b;
  b.push_back(bind_u64("seed", c.seed));
  b.push_back(bind_u64("init_seed", c.init_seed));
  b.push_back(bind_u64("data.seed", c.data.seed));
  b.push_back(bind("data.pretrain_scenes", c.data.pretrain_scenes));
  b.push_back(bind("data.train_scenes", c.data.train_scenes));
  b.push_back(bind("data.eval_scenes", c.data.eval_scenes));
  b.push_back(bind("eval.iou_threshold", c.iou_threshold));
  b.push_back(bind("mllm.d_lm", c.mllm.d_lm));
  b.push_back(bind("mllm.layers", c.mllm.layers));
  b.push_back(bind("mllm.heads", c.mllm.heads));
  b.push_back(bind("mllm.vocab", c.mllm.vocab));
  b.push_back(bind("mllm.ffn", c.mllm.ffn));
  b.push_back(bind("mllm.image", c.mllm.image));
  b.push_back(bind("mllm.patch", c.mllm.patch));
  b.push_back(bind("mllm.d_v", c.mllm.d_v));
  b.push_back(bind("mllm.shuffle_r", c.mllm.shuffle_r));
  b.push_back(bind("mllm.projector_in", c.mllm.projector_in));
  b.push_back(bind("mllm.projector_hidden", c.mllm.projector_hidden));
  b.push_back(bind("mllm.system_len", c.mllm.system_len));
  b.push_back(bind("mllm.rope_base", c.mllm.rope_base));
  b.push_back(bind("detector.d", c.detector.d));
  b.push_back(bind("detector.heads", c.detector.heads));
  b.push_back(bind("detector.depth", c.detector.depth));
  b.push_back(bind("detector.queries", c.detector.queries));
  b.push_back(bind("detector.max_text", c.detector.max_text));
  b.push_back(bind("detector.ffn", c.detector.ffn));
  b.push_back(bind("adapter.arch", c.adapter.arch));
  b.push_back(bind("adapter.l_lm", c.adapter.l_lm));
  b.push_back(bind("adapter.l_d", c.adapter.l_d));
  b.push_back(bind("adapter.heads", c.adapter.heads));
  b.push_back(bind("adapter.conv_kernel", c.adapter.conv_kernel));
  b.push_back(bind("adapter.conv_stride", c.adapter.conv_stride));
  b.push_back(bind("adapter.conv_pad", c.adapter.conv_pad));
  b.push_back(bind("adapter.rope_base", c.adapter.rope_base));
  for (std::size_t k = 0; k < 4; ++k) bind_stage(b, "stage" + std::to_string(k) + ".", c.stage(k));
  return b;
}

}  // namespace

TrainConfig TrainConfig::defaults(std::size_t stage) {
  TrainConfig t;
  t.stage = stage;
  switch (stage) {
    case 0:
      t.steps = 3000;
      t.lr_vision = t.lr_detector = 1e-3;
      t.train_vision = t.train_detector = true;
      break;
    case 1:
    case 2:
      t.steps = 1500;
      t.lr_projector = t.lr_llm = 1e-3;
      t.train_projector = t.train_llm = true;
      break;
    default:
      t.steps = 1000;
      t.lr_projector = 2e-4;
      t.lr_adapter = 1e-3;
      t.train_projector = t.train_adapter = true;
      break;
  }
  return t;
}

void TrainConfig::validate() const {
  if (stage > 3) throw ConfigError("stage must be 0..3");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (clip < 0.0) throw ConfigError("clip must be non-negative");
  for (double lr : {lr_vision, lr_detector, lr_projector, lr_llm, lr_adapter}) {
    if (!(lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  }
  if (stage >= 1 && train_vision) throw ConfigError("the vision encoder is frozen after stage 0");
  if (stage != 3 && train_adapter) throw ConfigError("the adapter only exists in stage 3");
  if (stage != 0 && stage != 3 && train_detector) {
    throw ConfigError("the detector is not part of the MLLM stages");
  }
  if (stage == 0 && (train_projector || train_llm)) {
    throw ConfigError("stage 0 trains only the detector and the vision encoder");
  }
}

ExperimentConfig::ExperimentConfig() { resolve(); }

TrainConfig& ExperimentConfig::stage(std::size_t k) {
  switch (k) {
    case 0: return stage0;
    case 1: return stage1;
    case 2: return stage2;
    case 3: return stage3;
  }
  throw ConfigError("stage must be 0..3");
}

const TrainConfig& ExperimentConfig::stage(std::size_t k) const {
  return const_cast<ExperimentConfig*>(this)->stage(k);
}

void ExperimentConfig::resolve() {
  for (std::size_t k = 0; k < 4; ++k) stage(k).stage = k;
  detector.vocab = mllm.vocab;
  detector.vision_width = mllm.d_v;
  detector.vision_tokens = mllm.grid() * mllm.grid();
  adapter.d = detector.d;
  adapter.d_lm = mllm.d_lm;
  adapter.grid_h = adapter.grid_w = mllm.aligned_grid();
}

void ExperimentConfig::validate() const {
  mllm.validate();
  detector.validate();
  adapter.validate(detector.depth, mllm.layers);
  for (std::size_t k = 0; k < 4; ++k) stage(k).validate();
  if (mllm.vocab < vocabulary().size()) {
    throw ConfigError("mllm.vocab must be at least " + std::to_string(vocabulary().size()));
  }
  if (detector.queries < SceneOptions{}.max_objects) {
    throw ConfigError("detector.queries must be at least " + std::to_string(SceneOptions{}.max_objects) +
                      ", the most objects a scene can hold");
  }
  if (data.pretrain_scenes == 0 || data.train_scenes == 0 || data.eval_scenes == 0) throw ConfigError("scene counts must be positive");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("eval.iou_threshold must be in (0, 1]");
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
    }
    if (!out.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv) {
  auto b = bindings(cfg);
  for (const auto& [key, value] : kv) {
    auto it = std::find_if(b.begin(), b.end(), [&](const Binding& x) { return x.key == key; });
    if (it == b.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(value);
  }
  cfg.resolve();
  cfg.validate();
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_settings(cfg, parse_key_values(ss.str()));
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& b : bindings(copy)) out.emplace_back(b.key, b.get());
  return out;
}

std::string to_key_values(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  ExperimentConfig c;
  std::vector<std::string> out;
  for (const auto& b : bindings(c)) out.push_back(b.key);
  return out;
}

}  // namespace led
