#include "led/core/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "led/core/flops.hpp"

namespace led {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
  return full(shape, 1.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev,
                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("at(): index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = value;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return Tensor::zeros(shape());
  return Tensor(shape(), impl_->grad);
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                         shape_str(shape));
    }
  }
  Tensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled || !backward_fn) return out;
  bool any = false;
  for (const Tensor& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) node->inputs.push_back(in.impl_ptr());
  node->backward = std::move(backward_fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward() on a tensor that was not produced by recorded ops");
  }
  FlopsPause pause;
  NoGradGuard no_grad;

  // Iterative post-order DFS for a topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->grad_fn && next < t->grad_fn->inputs.size()) {
      TensorImpl* child = t->grad_fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  TensorImpl* root = loss.impl();
  detail::grad_buffer(*root).assign(1, 1.0);
  std::vector<std::shared_ptr<Node>> released;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->grad_fn) continue;
    if (!t->grad.empty()) t->grad_fn->backward(*t);
    // Interior buffers are transient.
    t->grad.clear();
    t->grad.shrink_to_fit();
    released.push_back(std::move(t->grad_fn));
    t->grad_fn.reset();
    t->requires_grad = false;
  }
}

}  // namespace led
