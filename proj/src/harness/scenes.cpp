#include "led/harness/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_map>

namespace led {

namespace {

constexpr double kPositionDeadZone = 0.1;
constexpr double kAreaRatio = 1.5;
constexpr std::uint64_t kSplitCount = 3;

const char* const kColorWords[kColors] = {"red", "green", "blue", "yellow"};
const char* const kShapeWords[kShapeKinds] = {"square", "circle", "triangle"};
const double kPalette[kColors][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};

bool same_kind(const SceneObject& a, Color c, ShapeKind s) { return a.color == c && a.shape == s; }

double area(const Box& b) { return b[2] * b[3]; }

struct Footprint {
  std::size_t x = 0, y = 0, side = 0;
};

bool overlaps(const Footprint& a, const Footprint& b) {
  // One free pixel between objects.
  return a.x < b.x + b.side + 1 && b.x < a.x + a.side + 1 && a.y < b.y + b.side + 1 &&
         b.y < a.y + a.side + 1;
}

bool covers(ShapeKind shape, std::size_t side, std::size_t r, std::size_t c) {
  const double s = static_cast<double>(side);
  const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
  switch (shape) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kCircle: {
      const double dx = x - s / 2, dy = y - s / 2;
      return dx * dx + dy * dy <= s * s / 4;
    }
    case ShapeKind::kTriangle:
      return std::fabs(x - s / 2) <= y / 2;
  }
  return false;
}

class Painter {
 public:
  explicit Painter(std::size_t canvas) : n_(canvas), pixels_(3 * canvas * canvas, 0.0) {}

  SceneObject draw(ShapeKind shape, Color color, const Footprint& f) {
    std::size_t r0 = n_, r1 = 0, c0 = n_, c1 = 0;
    for (std::size_t r = 0; r < f.side; ++r)
      for (std::size_t c = 0; c < f.side; ++c) {
        if (!covers(shape, f.side, r, c)) continue;
        const std::size_t y = f.y + r, x = f.x + c;
        for (std::size_t ch = 0; ch < 3; ++ch)
          pixels_[(ch * n_ + y) * n_ + x] = kPalette[static_cast<int>(color)][ch];
        r0 = std::min(r0, y), r1 = std::max(r1, y), c0 = std::min(c0, x), c1 = std::max(c1, x);
      }
    const double n = static_cast<double>(n_);
    SceneObject o;
    o.shape = shape;
    o.color = color;
    o.box = {(c0 + c1 + 1) / (2 * n), (r0 + r1 + 1) / (2 * n), (c1 + 1 - c0) / n,
             (r1 + 1 - r0) / n};
    return o;
  }

  Tensor image() const { return Tensor({1, 3, n_, n_}, pixels_); }

 private:
  std::size_t n_;
  std::vector<double> pixels_;
};

struct Layout {
  std::vector<ShapeKind> shapes;
  std::vector<Color> colors;
  std::vector<Footprint> footprints;
};

class SceneSampler {
 public:
  SceneSampler(std::uint64_t seed, const SceneOptions& opt) : rng_(seed), opt_(opt) {}

  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  Color color() { return static_cast<Color>(uniform(0, kColors - 1)); }
  ShapeKind shape() { return static_cast<ShapeKind>(uniform(0, kShapeKinds - 1)); }
  std::size_t side(bool large) { return large ? uniform(9, 12) : uniform(5, 7); }

  // False when no free spot was found.
  bool place(Layout& l, ShapeKind s, Color c, std::size_t side) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Footprint f{uniform(0, opt_.canvas - side), uniform(0, opt_.canvas - side), side};
      bool ok = true;
      for (const auto& g : l.footprints) ok = ok && !overlaps(f, g);
      if (!ok) continue;
      l.shapes.push_back(s);
      l.colors.push_back(c);
      l.footprints.push_back(f);
      return true;
    }
    return false;
  }

  std::mt19937_64& rng() { return rng_; }
  const SceneOptions& options() const { return opt_; }

 private:
  std::mt19937_64 rng_;
  SceneOptions opt_;
};

std::vector<SceneObject> render(const Layout& l, std::size_t canvas, Tensor* image) {
  Painter p(canvas);
  std::vector<SceneObject> objects;
  for (std::size_t i = 0; i < l.shapes.size(); ++i)
    objects.push_back(p.draw(l.shapes[i], l.colors[i], l.footprints[i]));
  if (image) *image = p.image();
  return objects;
}

// Random clutter, then a uniquely named object as the target.
bool sample_category(SceneSampler& s, Layout& l, std::vector<SceneObject>& objects,
                     Query& q) {
  const std::size_t n = s.uniform(s.options().min_objects, s.options().max_objects);
  for (std::size_t i = 0; i < n; ++i)
    if (!s.place(l, s.shape(), s.color(), s.side(s.uniform(0, 1) == 1))) return false;
  objects = render(l, s.options().canvas, nullptr);
  std::vector<std::size_t> named;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    QuerySpec spec{objects[i].color, objects[i].shape, std::nullopt, {}, {}};
    if (referents(objects, spec).size() == 1) named.push_back(i);
  }
  if (named.empty()) return false;
  q.target = named[s.uniform(0, named.size() - 1)];
  q.spec = {objects[q.target].color, objects[q.target].shape, std::nullopt, {}, {}};
  q.kind = QueryKind::kCategory;
  return true;
}

// Target plus a same-named distractor, so only the relation disambiguates.
bool sample_spatial(SceneSampler& s, Layout& l, std::vector<SceneObject>& objects, Query& q) {
  const ShapeKind ts = s.shape();
  const Color tc = s.color();
  const bool by_size = s.uniform(0, 2) == 0;
  if (by_size) {
    const bool target_large = s.uniform(0, 1) == 1;
    if (!s.place(l, ts, tc, s.side(target_large))) return false;
    if (!s.place(l, ts, tc, s.side(!target_large))) return false;
    q.spec = {tc, ts, target_large ? Relation::kLarger : Relation::kSmaller, {}, {}};
  } else {
    ShapeKind as = s.shape();
    Color ac = s.color();
    if (as == ts && ac == tc) ac = static_cast<Color>((static_cast<int>(ac) + 1) % kColors);
    for (int k = 0; k < 3; ++k) {
      const ShapeKind sh = k == 2 ? as : ts;
      const Color co = k == 2 ? ac : tc;
      if (!s.place(l, sh, co, s.side(s.uniform(0, 1) == 1))) return false;
    }
    q.spec = {tc, ts, static_cast<Relation>(s.uniform(0, 3)), ac, as};
  }
  const std::size_t extra = s.uniform(0, s.options().max_objects - l.shapes.size());
  for (std::size_t i = 0; i < extra; ++i)
    if (!s.place(l, s.shape(), s.color(), s.side(s.uniform(0, 1) == 1))) return false;
  objects = render(l, s.options().canvas, nullptr);
  auto refs = referents(objects, q.spec);
  if (refs.size() != 1) return false;
  // The plain name must be ambiguous.
  if (referents(objects, {tc, ts, std::nullopt, {}, {}}).size() < 2) return false;
  q.target = refs[0];
  q.kind = QueryKind::kSpatial;
  return true;
}

std::vector<std::size_t> caption_tokens(const std::vector<SceneObject>& objects) {
  const Vocabulary& v = vocabulary();
  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = std::pair(v.y_bin(objects[a].box[1]), v.x_bin(objects[a].box[0]));
    const auto kb = std::pair(v.y_bin(objects[b].box[1]), v.x_bin(objects[b].box[0]));
    return ka != kb ? ka < kb : a < b;
  });
  std::vector<std::size_t> out{Vocabulary::kBos};
  for (std::size_t i = 0; i < order.size(); ++i) {
    const SceneObject& o = objects[order[i]];
    if (i > 0) out.push_back(v.id("and"));
    out.push_back(v.id("a"));
    out.push_back(v.id(area(o.box) >= 64.0 / (32.0 * 32.0) ? "large" : "small"));
    out.push_back(v.color(o.color));
    out.push_back(v.shape(o.shape));
    out.push_back(v.x_bin(o.box[0]));
    out.push_back(v.y_bin(o.box[1]));
  }
  out.push_back(Vocabulary::kEos);
  return out;
}

}  // namespace

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val-category") return Split::kValCategory;
  if (name == "val-spatial") return Split::kValSpatial;
  throw ConfigError("unknown split '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValCategory: return "val-category";
    case Split::kValSpatial: return "val-spatial";
  }
  return "?";
}

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<bos>", "<eos>", "<sep>", "a", "and", "the", "find", "of",
            "left", "right", "above", "below", "larger", "smaller", "small", "large"};
  for (auto* w : kColorWords) words_.push_back(w);
  for (auto* w : kShapeWords) words_.push_back(w);
  for (std::size_t i = 0; i < kLocationBins; ++i) words_.push_back("x" + std::to_string(i));
  for (std::size_t i = 0; i < kLocationBins; ++i) words_.push_back("y" + std::to_string(i));
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw ConfigError("word '" + word + "' is not in the vocabulary");
  return static_cast<std::size_t>(it - words_.begin());
}

std::vector<std::size_t> Vocabulary::encode(const std::string& text) const {
  std::istringstream in(text);
  std::vector<std::size_t> out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t i : ids) {
    if (!out.empty()) out += ' ';
    out += word(i);
  }
  return out;
}

std::size_t Vocabulary::color(Color c) const { return id(kColorWords[static_cast<int>(c)]); }
std::size_t Vocabulary::shape(ShapeKind s) const { return id(kShapeWords[static_cast<int>(s)]); }

std::size_t Vocabulary::x_bin(double cx) const {
  const auto bin = std::min<std::size_t>(kLocationBins - 1, static_cast<std::size_t>(cx * kLocationBins));
  return id("x" + std::to_string(bin));
}

std::size_t Vocabulary::y_bin(double cy) const {
  const auto bin = std::min<std::size_t>(kLocationBins - 1, static_cast<std::size_t>(cy * kLocationBins));
  return id("y" + std::to_string(bin));
}

const Vocabulary& vocabulary() {
  static const Vocabulary v;
  return v;
}

SceneTruth SyntheticScene::truth() const {
  SceneTruth t;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    t.boxes.push_back(objects[i].box);
    t.labels.push_back(i == query.target ? kTargetClass : kOtherClass);
  }
  t.target = objects.at(query.target).box;
  t.kind = query.kind;
  return t;
}

bool relation_holds(const SceneObject& a, const SceneObject& other, Relation r) {
  switch (r) {
    case Relation::kLeftOf: return a.box[0] < other.box[0] - kPositionDeadZone;
    case Relation::kRightOf: return a.box[0] > other.box[0] + kPositionDeadZone;
    case Relation::kAbove: return a.box[1] < other.box[1] - kPositionDeadZone;
    case Relation::kBelow: return a.box[1] > other.box[1] + kPositionDeadZone;
    case Relation::kLarger: return area(a.box) > kAreaRatio * area(other.box);
    case Relation::kSmaller: return kAreaRatio * area(a.box) < area(other.box);
  }
  return false;
}

std::vector<std::size_t> referents(const std::vector<SceneObject>& objects, const QuerySpec& spec) {
  std::vector<std::size_t> named;
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (same_kind(objects[i], spec.color, spec.shape)) named.push_back(i);
  if (!spec.relation) return named;
  const Relation r = *spec.relation;
  std::vector<std::size_t> out;
  if (r == Relation::kLarger || r == Relation::kSmaller) {
    if (named.size() < 2) return {};
    for (std::size_t i : named) {
      bool extreme = true;
      for (std::size_t j : named) extreme = extreme && (i == j || relation_holds(objects[i], objects[j], r));
      if (extreme) out.push_back(i);
    }
    return out;
  }
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (same_kind(objects[i], spec.anchor_color, spec.anchor_shape)) anchors.push_back(i);
  if (anchors.size() != 1) return {};
  for (std::size_t i : named)
    if (i != anchors[0] && relation_holds(objects[i], objects[anchors[0]], r)) out.push_back(i);
  return out;
}

std::vector<std::size_t> phrase_tokens(const QuerySpec& spec) {
  const Vocabulary& v = vocabulary();
  std::vector<std::size_t> out{v.id("the")};
  if (spec.relation == Relation::kLarger) out.push_back(v.id("larger"));
  if (spec.relation == Relation::kSmaller) out.push_back(v.id("smaller"));
  out.push_back(v.color(spec.color));
  out.push_back(v.shape(spec.shape));
  if (spec.relation && *spec.relation != Relation::kLarger && *spec.relation != Relation::kSmaller) {
    switch (*spec.relation) {
      case Relation::kLeftOf: out.insert(out.end(), {v.id("left"), v.id("of")}); break;
      case Relation::kRightOf: out.insert(out.end(), {v.id("right"), v.id("of")}); break;
      case Relation::kAbove: out.push_back(v.id("above")); break;
      default: out.push_back(v.id("below")); break;
    }
    out.push_back(v.id("the"));
    out.push_back(v.color(spec.anchor_color));
    out.push_back(v.shape(spec.anchor_shape));
  }
  return out;
}

std::uint64_t scene_hash(const std::vector<SceneObject>& objects) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ull;
  };
  for (const auto& o : objects) {
    mix(static_cast<std::uint64_t>(o.shape));
    mix(static_cast<std::uint64_t>(o.color));
    for (double c : o.box) mix(static_cast<std::uint64_t>(std::llround(c * 1024.0)));
  }
  return h;
}

std::vector<SyntheticScene> generate_scenes(std::uint64_t seed, std::size_t count, Split split,
                                            const SceneOptions& options) {
  if (count == 0) throw ConfigError("scene count must be at least 1");
  if (options.min_objects < 1 || options.max_objects < 3 || options.min_objects > options.max_objects) {
    throw ConfigError("scenes need 1 <= min_objects <= max_objects and max_objects >= 3");
  }
  if (options.canvas < 16) throw ConfigError("canvas must be at least 16 pixels");
  SceneSampler sampler(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(split) + 1, options);
  std::vector<SyntheticScene> out;
  out.reserve(count);
  while (out.size() < count) {
    bool spatial = split == Split::kValSpatial;
    if (split == Split::kTrain) spatial = out.size() % 2 == 1;
    Layout layout;
    std::vector<SceneObject> objects;
    Query q;
    const bool ok = spatial ? sample_spatial(sampler, layout, objects, q)
                            : sample_category(sampler, layout, objects, q);
    if (!ok || scene_hash(objects) % kSplitCount != static_cast<std::uint64_t>(split)) continue;
    SyntheticScene scene;
    scene.objects = render(layout, options.canvas, &scene.image);
    q.tokens = phrase_tokens(q.spec);
    scene.query = q;
    scene.caption = caption_tokens(scene.objects);
    out.push_back(std::move(scene));
  }
  return out;
}

std::vector<std::size_t> instruction_tokens(const SyntheticScene& scene) {
  const Vocabulary& v = vocabulary();
  std::vector<std::size_t> out{Vocabulary::kBos, v.id("find")};
  out.insert(out.end(), scene.query.tokens.begin(), scene.query.tokens.end());
  out.push_back(Vocabulary::kSep);
  const Box& b = scene.objects.at(scene.query.target).box;
  out.push_back(v.x_bin(b[0]));
  out.push_back(v.y_bin(b[1]));
  out.push_back(Vocabulary::kEos);
  return out;
}

std::size_t instruction_answer_start(const SyntheticScene& scene) {
  return scene.query.tokens.size() + 3;
}

Tensor stack_images(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ConfigError("empty batch");
  const Shape one = scenes.at(rows[0]).image.shape();
  std::vector<double> data;
  data.reserve(rows.size() * scenes.at(rows[0]).image.numel());
  for (std::size_t r : rows) {
    const auto px = scenes.at(r).image.data();
    data.insert(data.end(), px.begin(), px.end());
  }
  return Tensor({rows.size(), one[1], one[2], one[3]}, std::move(data));
}

TextBatch make_text_batch(const std::vector<std::vector<std::size_t>>& rows,
                          const std::vector<std::size_t>& loss_from) {
  TextBatch t;
  for (const auto& r : rows) t.max_len = std::max(t.max_len, r.size());
  for (const auto& r : rows) {
    t.lengths.push_back(r.size());
    t.ids.insert(t.ids.end(), r.begin(), r.end());
    t.ids.insert(t.ids.end(), t.max_len - r.size(), Vocabulary::kPad);
  }
  t.loss_from = loss_from;
  return t;
}

}  // namespace led
