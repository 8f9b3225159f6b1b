#include "led/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace led {

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw UsageError("finite_diff_check: eps must be positive");
  for (const Tensor& p : params) {
    if (!p.requires_grad()) throw UsageError("finite_diff_check: parameter does not require grad");
    const_cast<Tensor&>(p).clear_grad();
  }
  backward(f());
  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (const Tensor& cp : params) {
    Tensor p = cp;
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }
    auto data = p.mutable_data();
    for (std::size_t c : coords) {
      const double saved = data[c];
      data[c] = saved + options.eps;
      const double up = f().item();
      data[c] = saved - options.eps;
      const double down = f().item();
      data[c] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double err = std::fabs(analytic[c] - numeric) / std::max(1.0, std::fabs(analytic[c]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps) {
  GradCheckOptions o;
  o.eps = eps;
  return finite_diff_check(f, params, o);
}

}  // namespace led
