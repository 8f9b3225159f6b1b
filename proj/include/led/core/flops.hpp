#pragma once

#include <cstdint>

namespace led {

void record_flops(std::uint64_t flops);

// Counts forward-pass floating point work. Conventions:
//   matmul / conv2d     2 FLOPs per multiply-add
//   element-wise ops    1 per output element (rotary embedding: 3)
//   reductions          1 per input element
//   softmax variants    3 per element (exp, sum, divide)
//   layer_norm          8 per element
//   data movement       0 (reshape, permute, slice, concat, gather, shuffle)
// Backward sweeps are never metered.
class FlopsMeter {
 public:
  std::uint64_t accumulated() const { return accumulated_; }
  void add(std::uint64_t flops) { accumulated_ += flops; }
  void reset() { accumulated_ = 0; }

 private:
  std::uint64_t accumulated_ = 0;
};

// Installs a meter for the current thread for the guard's lifetime. Scopes
// nest: every active meter receives every count.
class FlopsScope {
 public:
  explicit FlopsScope(FlopsMeter& meter);
  ~FlopsScope();
  FlopsScope(const FlopsScope&) = delete;
  FlopsScope& operator=(const FlopsScope&) = delete;

 private:
  friend void record_flops(std::uint64_t flops);
  FlopsMeter* meter_;
  FlopsScope* parent_;
};

// Suspends metering (used by backward).
class FlopsPause {
 public:
  FlopsPause();
  ~FlopsPause();
  FlopsPause(const FlopsPause&) = delete;
  FlopsPause& operator=(const FlopsPause&) = delete;

 private:
  bool previous_;
};

}  // namespace led
