#pragma once

#include <string>
#include <vector>

#include "led/core/tensor.hpp"

namespace led {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct ParamGroup {
  std::vector<Tensor> params;
  double lr = 0.0;
};

// Gradient descent over parameter groups with a cosine-decayed learning rate
// (no warm-up): lr_t = lr * 0.5 * (1 + cos(pi * t / total_steps)).
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<ParamGroup> groups, std::size_t total_steps,
            double clip_norm = 0.0);

  // Applies one update from the accumulated grads, then clears them.
  void step();
  void zero_grad();
  double current_scale() const;
  std::size_t steps_taken() const { return t_; }
  // L2 norm of the accumulated gradient of one group (before clipping).
  double group_grad_norm(std::size_t group) const;

 private:
  OptimizerKind kind_;
  std::vector<ParamGroup> groups_;
  std::size_t total_;
  double clip_;
  std::size_t t_ = 0;
  std::vector<std::vector<std::vector<double>>> m_, v_;
};

}  // namespace led
