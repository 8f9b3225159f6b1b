#include "led/core/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "led/core/flops.hpp"

namespace led {

using detail::grad_buffer;
using detail::make_result;

namespace {

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat index into `in` for every flat index of `out` under broadcasting.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> map(n);
  if (out == in) {
    std::iota(map.begin(), map.end(), 0);
    return map;
  }
  const std::size_t in_n = numel_of(in);
  if (in_n == 1) return map;  // all zero
  // Suffix broadcast (e.g. bias rows).
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  bool suffix = true;
  for (std::size_t i = 0; i < in.size(); ++i) suffix = suffix && in[i] == out[off + i];
  if (suffix) {
    for (std::size_t i = 0; i < n; ++i) map[i] = i % in_n;
    return map;
  }
  std::vector<std::size_t> in_strides(r, 0);
  const auto s = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i) in_strides[off + i] = in[i] == 1 ? 0 : s[i];
  std::vector<std::size_t> counter(r, 0);
  std::size_t idx = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = idx;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      idx += in_strides[d];
      if (counter[d] < out[d]) break;
      idx -= in_strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

enum class BinOp { kAdd, kSub, kMul };

// How an operand's elements line up with the broadcast output.
struct OperandIndex {
  enum class Kind { kSame, kScalar, kSuffix, kGeneral } kind = Kind::kSame;
  std::size_t period = 1;
  std::shared_ptr<std::vector<std::size_t>> map;

  OperandIndex(const Shape& out, const Shape& in) {
    const std::size_t in_n = numel_of(in);
    if (out == in) return;
    if (in_n == 1) {
      kind = Kind::kScalar;
      return;
    }
    const std::size_t off = out.size() - in.size();
    bool suffix = true;
    for (std::size_t i = 0; i < in.size(); ++i) suffix = suffix && in[i] == out[off + i];
    if (suffix) {
      kind = Kind::kSuffix;
      period = in_n;
      return;
    }
    kind = Kind::kGeneral;
    map = std::make_shared<std::vector<std::size_t>>(broadcast_map(out, in));
  }
};

// Calls f(i, ia, ib) for every output element with the operands' flat indices.
template <class F>
void for_each_pair(const OperandIndex& a, const OperandIndex& b, std::size_t n, F&& f) {
  using K = OperandIndex::Kind;
  auto with_b = [&](auto index_a) {
    switch (b.kind) {
      case K::kSame:
        for (std::size_t i = 0; i < n; ++i) f(i, index_a(i), i);
        break;
      case K::kScalar:
        for (std::size_t i = 0; i < n; ++i) f(i, index_a(i), std::size_t{0});
        break;
      case K::kSuffix:
        for (std::size_t i0 = 0; i0 < n; i0 += b.period)
          for (std::size_t j = 0; j < b.period; ++j) f(i0 + j, index_a(i0 + j), j);
        break;
      case K::kGeneral:
        for (std::size_t i = 0; i < n; ++i) f(i, index_a(i), (*b.map)[i]);
        break;
    }
  };
  switch (a.kind) {
    case K::kSame: with_b([](std::size_t i) { return i; }); break;
    case K::kScalar: with_b([](std::size_t) { return std::size_t{0}; }); break;
    case K::kSuffix: with_b([p = a.period](std::size_t i) { return i % p; }); break;
    case K::kGeneral: with_b([m = a.map.get()](std::size_t i) { return (*m)[i]; }); break;
  }
}

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = numel_of(out_shape);
  auto idx = std::make_shared<std::pair<OperandIndex, OperandIndex>>(
      OperandIndex(out_shape, a.shape()), OperandIndex(out_shape, b.shape()));
  std::vector<double> out(n);
  const double* da = a.data().data();
  const double* db = b.data().data();
  double* po = out.data();
  switch (op) {
    case BinOp::kAdd:
      for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = da[x] + db[y]; });
      break;
    case BinOp::kSub:
      for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = da[x] - db[y]; });
      break;
    case BinOp::kMul:
      for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = da[x] * db[y]; });
      break;
  }
  record_flops(n);
  return make_result(name, out_shape, std::move(out), {a, b}, [idx, op, n](TensorImpl& o) {
    TensorImpl& ia = *o.grad_fn->inputs[0];
    TensorImpl& ib = *o.grad_fn->inputs[1];
    const double* g = o.grad.data();
    if (ia.requires_grad) {
      double* ga = grad_buffer(ia).data();
      const double* vb = ib.data.data();
      if (op == BinOp::kMul) {
        for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] * vb[y]; });
      } else {
        for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
      }
    }
    if (ib.requires_grad) {
      double* gb = grad_buffer(ib).data();
      const double* va = ia.data.data();
      if (op == BinOp::kMul) {
        for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t x, std::size_t y) { gb[y] += g[i] * va[x]; });
      } else if (op == BinOp::kSub) {
        for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] -= g[i]; });
      } else {
        for_each_pair(idx->first, idx->second, n, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] += g[i]; });
      }
    }
  });
}

// Unary map with derivative expressed through (input, output).
template <typename F, typename D>
Tensor unary(const Tensor& a, const char* name, F f, D deriv) {
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i]);
  record_flops(da.size());
  return make_result(name, a.shape(), std::move(out), {a}, [deriv](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(in.data[i], o.data[i]);
  });
}

void check_axis(const Tensor& a, std::size_t axis, const char* op) {
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(a.shape()));
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[m,n] = A[m,k] B[k,n]
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Forward product. Every output element is accumulated as ((0 + a0 b0) + a1 b1)
// + ... in index order regardless of the extents, so a row's result does not
// depend on how many other rows or columns share the call (the causal-prefix
// property relies on this). The file is built without FMA contraction, which
// keeps the vector and scalar paths bit-identical.
using Lanes8 = double __attribute__((vector_size(64)));
using Lanes4 = double __attribute__((vector_size(32)));

template <std::size_t R, class V, std::size_t W>
void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
               std::size_t j0) {
  constexpr std::size_t kLanes = sizeof(V) / sizeof(double);
  V acc[R][W];
#pragma GCC unroll 4
  for (std::size_t r = 0; r < R; ++r)
#pragma GCC unroll 2
    for (std::size_t w = 0; w < W; ++w) acc[r][w] = V{};
  for (std::size_t p = 0; p < k; ++p) {
    V bv[W];
#pragma GCC unroll 2
    for (std::size_t w = 0; w < W; ++w) __builtin_memcpy(&bv[w], b + p * n + j0 + w * kLanes, sizeof(V));
#pragma GCC unroll 4
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * k + p];
#pragma GCC unroll 2
      for (std::size_t w = 0; w < W; ++w) acc[r][w] += av * bv[w];
    }
  }
#pragma GCC unroll 4
  for (std::size_t r = 0; r < R; ++r)
#pragma GCC unroll 2
    for (std::size_t w = 0; w < W; ++w) __builtin_memcpy(c + r * n + j0 + w * kLanes, &acc[r][w], sizeof(V));
}

template <std::size_t R>
void gemm_rows(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_tile<R, Lanes8, 2>(a, b, c, k, n, j);
  for (; j + 8 <= n; j += 8) gemm_tile<R, Lanes8, 1>(a, b, c, k, n, j);
  for (; j + 4 <= n; j += 4) gemm_tile<R, Lanes4, 1>(a, b, c, k, n, j);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t jj = j; jj < n; ++jj) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[r * k + p] * b[p * n + jj];
      c[r * n + jj] = s;
    }
}

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * k, b, c + i * n, k, n);
  for (; i < m; ++i) gemm_rows<1>(a + i * k, b, c + i * n, k, n);
}

// dA[m,k] += dC[m,n] B[k,n]^T
void gemm_grad_a(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
                 std::size_t n) {
  MutMap(da, m, k).noalias() += ConstMap(dc, m, n) * ConstMap(b, k, n).transpose();
}

// dB[k,n] += A[m,k]^T dC[m,n]
void gemm_grad_b(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
                 std::size_t n) {
  MutMap(db, k, n).noalias() += ConstMap(a, m, k).transpose() * ConstMap(dc, m, n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor tanh_gate(const Tensor& g) {
  static const double kEdge = std::nextafter(1.0, 0.0);
  return unary(
      g, "tanh_gate", [](double x) { return std::clamp(std::tanh(x), -kEdge, kEdge); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  const auto d = a.data();
  double s = 0.0;
  for (double v : d) s += v;
  record_flops(d.size());
  return make_result("sum", {1}, {s}, {a}, [](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto d = a.data();
  double s = 0.0;
  for (double v : d) s += v;
  const double inv = 1.0 / static_cast<double>(d.size());
  record_flops(d.size());
  return make_result("mean", {1}, {s * inv}, {a}, [inv](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (double& v : g) v += o.grad[0] * inv;
  });
}

namespace {
Tensor reduce_axis(const Tensor& a, std::size_t axis, bool keepdim, double scale,
                   const char* name) {
  check_axis(a, axis, name);
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim || a.rank() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto d = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += d[(o * sp.len + l) * sp.inner + i];
  for (double& v : out) v *= scale;
  record_flops(d.size());
  return make_result(name, out_shape, std::move(out), {a}, [sp, scale](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t oo = 0; oo < sp.outer; ++oo)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          g[(oo * sp.len + l) * sp.inner + i] += o.grad[oo * sp.inner + i] * scale;
  });
}
}  // namespace

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, 1.0, "sum_axis");
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis(a, axis, "mean_axis");
  return reduce_axis(a, axis, keepdim, 1.0 / static_cast<double>(a.dim(axis)), "mean_axis");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  const bool b_shared = b.rank() == 2;
  bool ok = k == kb;
  if (!b_shared) {
    ok = ok && a.rank() == b.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (b_shared) {
    gemm(pa, pb, out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      gemm(pa + t * m * k, pb + t * k * n, out.data() + t * m * n, m, k, n);
  }
  record_flops(2 * batch * m * k * n);
  return make_result("matmul", out_shape, std::move(out), {a, b},
                     [batch, m, k, n, b_shared](TensorImpl& o) {
                       TensorImpl& ia = *o.grad_fn->inputs[0];
                       TensorImpl& ib = *o.grad_fn->inputs[1];
                       const double* g = o.grad.data();
                       if (ia.requires_grad) {
                         double* ga = grad_buffer(ia).data();
                         if (b_shared) {
                           gemm_grad_a(g, ib.data.data(), ga, batch * m, k, n);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t)
                             gemm_grad_a(g + t * m * n, ib.data.data() + t * k * n, ga + t * m * k,
                                         m, k, n);
                         }
                       }
                       if (ib.requires_grad) {
                         double* gb = grad_buffer(ib).data();
                         if (b_shared) {
                           gemm_grad_b(ia.data.data(), g, gb, batch * m, k, n);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t)
                             gemm_grad_b(ia.data.data() + t * m * k, g + t * m * n, gb + t * k * n,
                                         m, k, n);
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

namespace {
Tensor softmax_impl(const Tensor& x, std::size_t axis, bool logspace) {
  const char* name = logspace ? "log_softmax" : "softmax";
  check_axis(x, axis, name);
  const AxisSplit sp = split_at(x.shape(), axis);
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, d[base + l * sp.inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(d[base + l * sp.inner] - mx);
      if (logspace) {
        const double lse = mx + std::log(s);
        for (std::size_t l = 0; l < sp.len; ++l)
          out[base + l * sp.inner] = d[base + l * sp.inner] - lse;
      } else {
        for (std::size_t l = 0; l < sp.len; ++l)
          out[base + l * sp.inner] = std::exp(d[base + l * sp.inner] - mx) / s;
      }
    }
  }
  record_flops(3 * d.size());
  return make_result(name, x.shape(), std::move(out), {x}, [sp, logspace](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t oo = 0; oo < sp.outer; ++oo) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = oo * sp.len * sp.inner + i;
        if (logspace) {
          double gs = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) gs += o.grad[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            g[idx] += o.grad[idx] - std::exp(o.data[idx]) * gs;
          }
        } else {
          double dot = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            dot += o.grad[idx] * o.data[idx];
          }
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t idx = base + l * sp.inner;
            g[idx] += o.data[idx] * (o.grad[idx] - dot);
          }
        }
      }
    }
  });
}
}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) { return softmax_impl(x, axis, false); }
Tensor log_softmax(const Tensor& x, std::size_t axis) { return softmax_impl(x, axis, true); }

Tensor masked_softmax(const Tensor& x, const std::vector<unsigned char>& allowed) {
  if (allowed.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) +
                         " entries for tensor " + shape_str(x.shape()));
  }
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  const auto d = x.data();
  std::vector<double> out(d.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < len; ++l)
      if (allowed[base + l]) mx = std::max(mx, d[base + l]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateInputError("masked_softmax: every entry of a row is masked");
    }
    double s = 0.0;
    for (std::size_t l = 0; l < len; ++l)
      if (allowed[base + l]) s += std::exp(d[base + l] - mx);
    for (std::size_t l = 0; l < len; ++l)
      if (allowed[base + l]) out[base + l] = std::exp(d[base + l] - mx) / s;
  }
  record_flops(3 * d.size());
  return make_result("masked_softmax", x.shape(), std::move(out), {x},
                     [rows, len](TensorImpl& o) {
                       TensorImpl& in = *o.grad_fn->inputs[0];
                       auto& g = grad_buffer(in);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * len;
                         double dot = 0.0;
                         for (std::size_t l = 0; l < len; ++l)
                           dot += o.grad[base + l] * o.data[base + l];
                         for (std::size_t l = 0; l < len; ++l)
                           g[base + l] += o.data[base + l] * (o.grad[base + l] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t dim = x.shape().back();
  if (gamma.numel() != dim || beta.numel() != dim) {
    throw DimensionError("layer_norm: affine params must have " + std::to_string(dim) +
                         " entries");
  }
  const std::size_t rows = x.numel() / dim;
  const auto d = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  std::vector<double> out(d.size());
  auto xhat = std::make_shared<std::vector<double>>(d.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = d.data() + r * dim;
    double mu = 0.0;
    for (std::size_t i = 0; i < dim; ++i) mu += row[i];
    mu /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(dim);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < dim; ++i) {
      const double h = (row[i] - mu) * rs;
      (*xhat)[r * dim + i] = h;
      out[r * dim + i] = h * gm[i] + bt[i];
    }
  }
  record_flops(8 * d.size());
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, dim, xhat, rstd](TensorImpl& o) {
                       TensorImpl& ix = *o.grad_fn->inputs[0];
                       TensorImpl& ig = *o.grad_fn->inputs[1];
                       TensorImpl& ib = *o.grad_fn->inputs[2];
                       const auto& g = o.grad;
                       if (ig.requires_grad) {
                         auto& gg = grad_buffer(ig);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < dim; ++i)
                             gg[i] += g[r * dim + i] * (*xhat)[r * dim + i];
                       }
                       if (ib.requires_grad) {
                         auto& gb = grad_buffer(ib);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < dim; ++i) gb[i] += g[r * dim + i];
                       }
                       if (ix.requires_grad) {
                         auto& gx = grad_buffer(ix);
                         const double inv_d = 1.0 / static_cast<double>(dim);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0;
                           double m2 = 0.0;
                           for (std::size_t i = 0; i < dim; ++i) {
                             const double dh = g[r * dim + i] * ig.data[i];
                             m1 += dh;
                             m2 += dh * (*xhat)[r * dim + i];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t i = 0; i < dim; ++i) {
                             const double dh = g[r * dim + i] * ig.data[i];
                             gx[r * dim + i] +=
                                 (*rstd)[r] * (dh - m1 - (*xhat)[r * dim + i] * m2);
                           }
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  return make_result("reshape", shape, a.to_vector(), {a}, [](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t r = a.rank();
  if (order.size() != r) throw DimensionError("permute: order rank mismatch");
  std::vector<bool> used(r, false);
  for (std::size_t o : order) {
    if (o >= r || used[o]) throw DimensionError("permute: invalid axis order");
    used[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[order[i]];
  const auto in_strides = strides_of(a.shape());
  // Moves contiguous runs when the last axis stays in place.
  const std::size_t run = r > 0 && order[r - 1] == r - 1 ? out_shape[r - 1] : 1;
  const std::size_t axes = run > 1 ? r - 1 : r;
  std::vector<std::size_t> src_strides(axes);
  for (std::size_t i = 0; i < axes; ++i) src_strides[i] = in_strides[order[i]];
  const std::size_t n = a.numel();
  const std::size_t runs = run == 0 ? 0 : n / run;
  auto map = std::make_shared<std::vector<std::size_t>>(runs);
  std::vector<std::size_t> counter(axes, 0);
  std::size_t idx = 0;
  for (std::size_t flat = 0; flat < runs; ++flat) {
    (*map)[flat] = idx;
    for (std::size_t dd = axes; dd-- > 0;) {
      ++counter[dd];
      idx += src_strides[dd];
      if (counter[dd] < out_shape[dd]) break;
      idx -= src_strides[dd] * counter[dd];
      counter[dd] = 0;
    }
  }
  const double* d = a.data().data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < runs; ++i) std::copy_n(d + (*map)[i], run, out.data() + i * run);
  return make_result("permute", out_shape, std::move(out), {a}, [map, run](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    double* g = grad_buffer(in).data();
    const double* go = o.grad.data();
    for (std::size_t i = 0; i < map->size(); ++i) {
      double* dst = g + (*map)[i];
      const double* src = go + i * run;
      for (std::size_t j = 0; j < run; ++j) dst[j] += src[j];
    }
  });
}

Tensor transpose(const Tensor& a, std::size_t i, std::size_t j) {
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  if (i >= a.rank() || j >= a.rank()) throw DimensionError("transpose: axis out of range");
  std::swap(order[i], order[j]);
  return permute(a, order);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(a, axis, "slice");
  if (length == 0 || start + length > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") invalid for axis of extent " +
                         std::to_string(a.dim(axis)));
  }
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  const auto d = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner),
                length * sp.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return make_result("slice", out_shape, std::move(out), {a},
                     [sp, start, length](TensorImpl& o) {
                       TensorImpl& in = *o.grad_fn->inputs[0];
                       auto& g = grad_buffer(in);
                       for (std::size_t oo = 0; oo < sp.outer; ++oo)
                         for (std::size_t t = 0; t < length * sp.inner; ++t)
                           g[(oo * sp.len + start) * sp.inner + t] +=
                               o.grad[oo * length * sp.inner + t];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  check_axis(parts[0], axis, "concat");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    s[axis] = out_shape[axis];
    if (s != out_shape) {
      throw DimensionError("concat: incompatible " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const AxisSplit sp = split_at(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  auto lens = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis);
    lens->push_back(len);
    const auto d = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * sp.inner));
    offset += len;
  }
  return make_result("concat", out_shape, std::move(out), parts,
                     [sp, total, lens](TensorImpl& o) {
                       std::size_t off = 0;
                       for (std::size_t pi = 0; pi < lens->size(); ++pi) {
                         const std::size_t len = (*lens)[pi];
                         TensorImpl& in = *o.grad_fn->inputs[pi];
                         if (in.requires_grad) {
                           auto& g = grad_buffer(in);
                           for (std::size_t oo = 0; oo < sp.outer; ++oo)
                             for (std::size_t t = 0; t < len * sp.inner; ++t)
                               g[oo * len * sp.inner + t] +=
                                   o.grad[(oo * total + off) * sp.inner + t];
                         }
                         off += len;
                       }
                     });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  if (ids.empty()) throw DimensionError("embedding: no ids");
  const std::size_t vocab = table.dim(0);
  const std::size_t dim = table.dim(1);
  std::vector<double> out(ids.size() * dim);
  const auto d = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[r]) + " >= vocab " +
                           std::to_string(vocab));
    }
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(ids[r] * dim), dim,
                out.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  return make_result("embedding", {ids.size(), dim}, std::move(out), {table},
                     [ids, dim](TensorImpl& o) {
                       TensorImpl& in = *o.grad_fn->inputs[0];
                       auto& g = grad_buffer(in);
                       for (std::size_t r = 0; r < ids.size(); ++r)
                         for (std::size_t i = 0; i < dim; ++i)
                           g[ids[r] * dim + i] += o.grad[r * dim + i];
                     });
}

Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  if (idx.size() != rows) {
    throw DimensionError("pick: need " + std::to_string(rows) + " indices, got " +
                         std::to_string(idx.size()));
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= len) throw DimensionError("pick: index out of range");
    out[r] = d[r * len + idx[r]];
  }
  return make_result("pick", out_shape, std::move(out), {x}, [idx, len](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * len + idx[r]] += o.grad[r];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("conv2d: expected rank-4 input and kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  const long hspan = static_cast<long>(H + 2 * padding) - static_cast<long>(kh);
  const long wspan = static_cast<long>(W + 2 * padding) - static_cast<long>(kw);
  if (hspan < 0 || wspan < 0) {
    throw DimensionError("conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                         " and kernel " + shape_str(kernel.shape()));
  }
  const std::size_t Ho = static_cast<std::size_t>(hspan) / stride + 1;
  const std::size_t Wo = static_cast<std::size_t>(wspan) / stride + 1;
  const auto xd = x.data();
  const auto kd = kernel.data();
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  // Visits (b, o, y, x, c, i, j) with in-bounds input tap; fn(out_idx, in_idx, k_idx).
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::size_t oi = ((b * Co + o) * Ho + oy) * Wo + ox;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < kh; ++i) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t j = 0; j < kw; ++j) {
                  const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  const std::size_t xi = ((b * C + c) * H + static_cast<std::size_t>(iy)) * W +
                                         static_cast<std::size_t>(ix);
                  const std::size_t ki = ((o * C + c) * kh + i) * kw + j;
                  fn(oi, xi, ki);
                }
              }
          }
  };
  visit([&](std::size_t oi, std::size_t xi, std::size_t ki) { out[oi] += xd[xi] * kd[ki]; });
  record_flops(2 * B * Co * Ho * Wo * C * kh * kw);
  return make_result("conv2d", {B, Co, Ho, Wo}, std::move(out), {x, kernel},
                     [visit](TensorImpl& o) {
                       TensorImpl& ix = *o.grad_fn->inputs[0];
                       TensorImpl& ik = *o.grad_fn->inputs[1];
                       if (ix.requires_grad) {
                         auto& gx = grad_buffer(ix);
                         visit([&](std::size_t oi, std::size_t xi, std::size_t ki) {
                           gx[xi] += o.grad[oi] * ik.data[ki];
                         });
                       }
                       if (ik.requires_grad) {
                         auto& gk = grad_buffer(ik);
                         visit([&](std::size_t oi, std::size_t xi, std::size_t ki) {
                           gk[ki] += o.grad[oi] * ix.data[xi];
                         });
                       }
                     });
}

namespace {
// Index map from unshuffled flat index to source flat index.
std::shared_ptr<std::vector<std::size_t>> unshuffle_map(std::size_t B, std::size_t C,
                                                        std::size_t H, std::size_t W,
                                                        std::size_t r) {
  const std::size_t Ho = H / r, Wo = W / r, Co = C * r * r;
  auto map = std::make_shared<std::vector<std::size_t>>(B * C * H * W);
  std::size_t flat = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      const std::size_t c = co / (r * r);
      const std::size_t i = (co / r) % r;
      const std::size_t j = co % r;
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x)
          (*map)[flat++] = ((b * C + c) * H + y * r + i) * W + x * r + j;
    }
  return map;
}
}  // namespace

Tensor pixel_unshuffle(const Tensor& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("pixel_unshuffle: expected [B,C,H,W]");
  if (r == 0 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw DimensionError("pixel_unshuffle: spatial extents of " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(r));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto map = unshuffle_map(B, C, H, W, r);
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[(*map)[i]];
  return make_result("pixel_unshuffle", {B, C * r * r, H / r, W / r}, std::move(out), {x},
                     [map](TensorImpl& o) {
                       TensorImpl& in = *o.grad_fn->inputs[0];
                       auto& g = grad_buffer(in);
                       for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += o.grad[i];
                     });
}

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  if (x.rank() != 4) throw DimensionError("pixel_shuffle: expected [B,C,H,W]");
  if (r == 0 || x.dim(1) % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(r * r));
  }
  const std::size_t B = x.dim(0), C = x.dim(1) / (r * r), H = x.dim(2) * r, W = x.dim(3) * r;
  auto map = unshuffle_map(B, C, H, W, r);
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[(*map)[i]] = d[i];
  return make_result("pixel_shuffle", {B, C, H, W}, std::move(out), {x}, [map](TensorImpl& o) {
    TensorImpl& in = *o.grad_fn->inputs[0];
    auto& g = grad_buffer(in);
    for (std::size_t i = 0; i < map->size(); ++i) g[i] += o.grad[(*map)[i]];
  });
}

Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions, double base) {
  if (x.rank() != 4) throw DimensionError("rope_apply: expected [B,T,h,d_h], got " +
                                          shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), H = x.dim(2), dh = x.dim(3);
  if (dh % 2 != 0) throw DimensionError("rope_apply: head dimension must be even, got " +
                                        std::to_string(dh));
  if (positions.size() != T) throw DimensionError("rope_apply: need one position per token");
  const std::size_t half = dh / 2;
  auto cs = std::make_shared<std::vector<double>>(T * half);
  auto sn = std::make_shared<std::vector<double>>(T * half);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < half; ++i) {
      const double theta =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double ang = static_cast<double>(positions[t]) * theta;
      (*cs)[t * half + i] = std::cos(ang);
      (*sn)[t * half + i] = std::sin(ang);
    }
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = ((b * T + t) * H + h) * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = (*cs)[t * half + i], s = (*sn)[t * half + i];
          const double x0 = d[off + 2 * i], x1 = d[off + 2 * i + 1];
          out[off + 2 * i] = x0 * c - x1 * s;
          out[off + 2 * i + 1] = x0 * s + x1 * c;
        }
      }
  record_flops(3 * d.size());
  return make_result("rope_apply", x.shape(), std::move(out), {x},
                     [B, T, H, dh, half, cs, sn](TensorImpl& o) {
                       TensorImpl& in = *o.grad_fn->inputs[0];
                       auto& g = grad_buffer(in);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t t = 0; t < T; ++t)
                           for (std::size_t h = 0; h < H; ++h) {
                             const std::size_t off = ((b * T + t) * H + h) * dh;
                             for (std::size_t i = 0; i < half; ++i) {
                               const double c = (*cs)[t * half + i], s = (*sn)[t * half + i];
                               const double g0 = o.grad[off + 2 * i], g1 = o.grad[off + 2 * i + 1];
                               g[off + 2 * i] += g0 * c + g1 * s;
                               g[off + 2 * i + 1] += -g0 * s + g1 * c;
                             }
                           }
                     });
}

}  // namespace led
