#include "led/core/optim.hpp"

#include <cmath>
#include <numbers>

namespace led {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerKind kind, std::vector<ParamGroup> groups, std::size_t total_steps,
                     double clip_norm)
    : kind_(kind), groups_(std::move(groups)), total_(total_steps), clip_(clip_norm) {
  if (kind_ == OptimizerKind::kAdam) {
    for (const auto& g : groups_) {
      m_.emplace_back();
      v_.emplace_back();
      for (const auto& p : g.params) {
        m_.back().emplace_back(p.numel(), 0.0);
        v_.back().emplace_back(p.numel(), 0.0);
      }
    }
  }
}

double Optimizer::current_scale() const {
  if (total_ == 0) return 1.0;
  const double frac = static_cast<double>(std::min(t_, total_)) / static_cast<double>(total_);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double Optimizer::group_grad_norm(std::size_t group) const {
  double s = 0.0;
  for (const auto& p : groups_.at(group).params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

void Optimizer::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.clear_grad();
}

void Optimizer::step() {
  double scale = current_scale();
  double clip_factor = 1.0;
  if (clip_ > 0.0) {
    double s = 0.0;
    for (std::size_t i = 0; i < groups_.size(); ++i) {
      const double n = group_grad_norm(i);
      s += n * n;
    }
    const double norm = std::sqrt(s);
    if (norm > clip_) clip_factor = clip_ / norm;
  }
  ++t_;
  constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& g = groups_[gi];
    const double lr = g.lr * scale;
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Tensor& p = g.params[pi];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto grad = p.grad();
      if (kind_ == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * clip_factor * grad[i];
      } else {
        auto& m = m_[gi][pi];
        auto& v = v_[gi][pi];
        const double c1 = 1.0 - std::pow(kB1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(kB2, static_cast<double>(t_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gg = grad[i] * clip_factor;
          m[i] = kB1 * m[i] + (1 - kB1) * gg;
          v[i] = kB2 * v[i] + (1 - kB2) * gg * gg;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
        }
      }
    }
  }
  zero_grad();
}

}  // namespace led
