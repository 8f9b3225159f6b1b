#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace led {

using Shape = std::vector<std::size_t>;

// Error surfaces shared by every module.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DegenerateInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// One recorded operation. `backward` reads the output's grad buffer and
// accumulates into the grad buffers of inputs that require grad.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == no gradient buffer
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;  // null for leaves and constants
};

// Dense row-major float64 tensor. Copies share storage; values are treated
// as immutable once produced, except through `mutable_data()` which is
// reserved for parameter initialisation and optimiser updates.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  std::vector<double> to_vector() const { return impl_->data; }
  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  Tensor grad_tensor() const;
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }
  bool is_leaf() const { return !impl_->grad_fn; }

  // New leaf sharing nothing with the graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local recording switch.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse-mode sweep from a scalar produced by recorded ops. Leaves that
// require grad accumulate d(loss)/d(leaf); the recorded graph is released.
void backward(const Tensor& loss);

namespace detail {

// Builds an op result. Records `backward_fn` when recording is on and any
// input requires grad. Throws NumericError on non-finite output values.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward_fn);

// Grad buffer of `t`, allocated (zero) on first use.
std::vector<double>& grad_buffer(TensorImpl& t);

}  // namespace detail

}  // namespace led
