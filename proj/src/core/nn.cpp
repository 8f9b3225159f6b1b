#include "led/core/nn.hpp"

#include <cmath>

namespace led {

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias,
                    double gain) {
  Linear l;
  l.w = Tensor::randn({in, out}, rng, gain / std::sqrt(static_cast<double>(in)), true);
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out, bool bias) {
  Linear l;
  l.w = Tensor::zeros({in, out}, true);
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w", w);
  if (b.defined()) out.emplace_back(prefix + ".b", b);
}

std::uint64_t Linear::flops(std::uint64_t rows) const {
  const std::uint64_t mm = 2 * rows * in() * this->out();
  return mm + (b.defined() ? rows * this->out() : 0);
}

LayerNorm LayerNorm::init(std::size_t dim) {
  return {Tensor::ones({dim}, true), Tensor::zeros({dim}, true)};
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

AttentionWeights AttentionWeights::init(std::size_t dim, std::mt19937_64& rng,
                                        double out_gain) {
  AttentionWeights a;
  a.q = Linear::init(dim, dim, rng);
  a.k = Linear::init(dim, dim, rng);
  a.v = Linear::init(dim, dim, rng);
  a.o = Linear::init(dim, dim, rng, true, out_gain);
  return a;
}

void AttentionWeights::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

std::vector<unsigned char> attention_mask(std::size_t batch, std::size_t heads, std::size_t tq,
                                          std::size_t tk,
                                          const std::vector<std::size_t>* key_lengths,
                                          bool causal) {
  std::vector<unsigned char> m(batch * heads * tq * tk, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t valid = key_lengths ? (*key_lengths)[b] : tk;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = 0; j < tk; ++j) {
          bool ok = j < valid;
          if (causal) ok = ok && j <= i;
          m[((b * heads + h) * tq + i) * tk + j] = ok ? 1 : 0;
        }
  }
  return m;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  if (d % heads != 0) {
    throw ConfigError("width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return permute(reshape(x, {B, T, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t B = x.dim(0), H = x.dim(1), T = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, T, H * dh});
}

namespace {
// Projected, rotated heads: returns (q [B,h,Tq,dh], k [B,h,Tk,dh]).
std::pair<Tensor, Tensor> project_qk(const Tensor& xq, const Tensor& xkv,
                                     const AttentionWeights& w, const AttentionOptions& opt) {
  const std::size_t B = xq.dim(0), Tq = xq.dim(1), Tk = xkv.dim(1), d = w.q.out();
  if (d % opt.heads != 0) throw ConfigError("attention width not divisible by heads");
  const std::size_t dh = d / opt.heads;
  Tensor q = reshape(w.q(xq), {B, Tq, opt.heads, dh});
  Tensor k = reshape(w.k(xkv), {B, Tk, opt.heads, dh});
  if (opt.q_positions && opt.k_positions) {
    q = rope_apply(q, *opt.q_positions, opt.rope_base);
    k = rope_apply(k, *opt.k_positions, opt.rope_base);
  }
  return {permute(q, {0, 2, 1, 3}), permute(k, {0, 2, 1, 3})};
}
}  // namespace

Tensor attention_scores(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                        const AttentionOptions& opt) {
  auto [q, k] = project_qk(xq, xkv, w, opt);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
  return mul_scalar(matmul(q, transpose(k, 2, 3)), scale);
}

Tensor multi_head_attention(const Tensor& xq, const Tensor& xkv, const AttentionWeights& w,
                            const AttentionOptions& opt) {
  const std::size_t B = xq.dim(0), Tq = xq.dim(1), Tk = xkv.dim(1);
  Tensor scores = attention_scores(xq, xkv, w, opt);
  Tensor v = split_heads(w.v(xkv), opt.heads);
  Tensor probs;
  if (opt.causal || opt.key_lengths) {
    probs = masked_softmax(scores, attention_mask(B, opt.heads, Tq, Tk, opt.key_lengths,
                                                  opt.causal));
  } else {
    probs = softmax(scores, 3);
  }
  return w.o(merge_heads(matmul(probs, v)));
}

std::uint64_t attention_flops(std::uint64_t batch, std::uint64_t tq, std::uint64_t tk,
                              std::uint64_t dim, std::uint64_t heads, bool rope) {
  const std::uint64_t proj_q = 2 * batch * tq * dim * dim + batch * tq * dim;
  const std::uint64_t proj_kv = 2 * (2 * batch * tk * dim * dim + batch * tk * dim);
  const std::uint64_t proj_o = proj_q;
  const std::uint64_t rot = rope ? 3 * batch * (tq + tk) * dim : 0;
  // QK^T and PV each cost 2*tq*tk*d_h per head.
  const std::uint64_t products = 2 * (2 * batch * tq * tk * dim);
  // Scale (1) and softmax (3) per score entry.
  const std::uint64_t score_elems = 4 * batch * heads * tq * tk;
  return proj_q + proj_kv + proj_o + rot + products + score_elems;
}

std::uint64_t param_count(const ParamList& params) {
  std::uint64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace led
