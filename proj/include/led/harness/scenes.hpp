#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "led/core/tensor.hpp"
#include "led/detector/detector.hpp"

namespace led {

enum class ShapeKind : unsigned char { kSquare, kCircle, kTriangle };
enum class Color : unsigned char { kRed, kGreen, kBlue, kYellow };
inline constexpr std::size_t kShapeKinds = 3;
inline constexpr std::size_t kColors = 4;

enum class Split : unsigned char { kTrain, kValCategory, kValSpatial };
Split parse_split(const std::string& name);
std::string to_string(Split split);

enum class Relation : unsigned char { kLeftOf, kRightOf, kAbove, kBelow, kLarger, kSmaller };

struct SceneObject {
  ShapeKind shape = ShapeKind::kSquare;
  Color color = Color::kRed;
  Box box{};  // tight pixel bounds on the unit canvas
};

// "the <color> <shape>", optionally followed by a relation to an anchor
// ("left of the <color> <shape>") or preceded by a size comparison.
struct QuerySpec {
  Color color = Color::kRed;
  ShapeKind shape = ShapeKind::kSquare;
  std::optional<Relation> relation;
  Color anchor_color = Color::kRed;
  ShapeKind anchor_shape = ShapeKind::kSquare;
};

struct Query {
  QuerySpec spec;
  std::vector<std::size_t> tokens;  // phrase only, no specials
  std::size_t target = 0;           // index into objects
  QueryKind kind = QueryKind::kCategory;
};

struct SyntheticScene {
  Tensor image;  // [1, 3, H, W]
  std::vector<SceneObject> objects;
  std::vector<std::size_t> caption;
  Query query;

  SceneTruth truth() const;
};

// Fixed word-level vocabulary shared by the MLLM and the detector.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kLocationBins = 8;

  Vocabulary();
  std::size_t size() const { return words_.size(); }
  std::size_t id(const std::string& word) const;
  const std::string& word(std::size_t id) const { return words_.at(id); }
  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::size_t>& ids) const;

  std::size_t color(Color c) const;
  std::size_t shape(ShapeKind s) const;
  std::size_t x_bin(double cx) const;
  std::size_t y_bin(double cy) const;

 private:
  std::vector<std::string> words_;
};

const Vocabulary& vocabulary();

struct SceneOptions {
  std::size_t canvas = 32;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
};

// Deterministic in (seed, split); scenes of different splits never coincide
// because a scene's content hash fixes the split it may be emitted for.
std::vector<SyntheticScene> generate_scenes(std::uint64_t seed, std::size_t count, Split split,
                                            const SceneOptions& options = {});

// Whether `a` stands in relation `r` to `other`, with a dead zone so that
// near-ties never count.
bool relation_holds(const SceneObject& a, const SceneObject& other, Relation r);
// Exhaustive check: indices of the objects the phrase refers to. Anchored
// relations need a unique anchor; size comparisons range over the objects
// sharing the phrase's color and shape.
std::vector<std::size_t> referents(const std::vector<SceneObject>& objects, const QuerySpec& spec);
std::vector<std::size_t> phrase_tokens(const QuerySpec& spec);

std::uint64_t scene_hash(const std::vector<SceneObject>& objects);

// Stage-2 instruction text: "find <phrase> sep <x> <y> eos", with the loss
// counted from the location tokens.
std::vector<std::size_t> instruction_tokens(const SyntheticScene& scene);
std::size_t instruction_answer_start(const SyntheticScene& scene);

Tensor stack_images(const std::vector<SyntheticScene>& scenes, const std::vector<std::size_t>& rows);

// Right-pads token rows to a shared length.
TextBatch make_text_batch(const std::vector<std::vector<std::size_t>>& rows,
                          const std::vector<std::size_t>& loss_from = {});

}  // namespace led
