#include "jqt/qlayers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "jqt/error.hpp"
#include "jqt/parallel.hpp"
#include "jqt/quantize.hpp"
#include "jqt/synthetic.hpp"

namespace jqt {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

DenseTensor normal_init(std::size_t rows, std::size_t cols, float stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, stddev);
  DenseTensor t(rows, cols);
  for (float& v : t.values()) v = d(rng);
  return t;
}

DenseTensor transpose(const DenseTensor& a) {
  DenseTensor t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

}  // namespace

DenseTensor dense_matmul(const DenseTensor& a, bool trans_a, const DenseTensor& b, bool trans_b) {
  const DenseTensor at = trans_a ? transpose(a) : DenseTensor();
  const DenseTensor bt = trans_b ? transpose(b) : DenseTensor();
  const DenseTensor& l = trans_a ? at : a;  // m x k
  const DenseTensor& r = trans_b ? bt : b;  // k x n
  if (l.cols() != r.rows()) throw DimensionError("dense_matmul: inner dimensions differ");
  const std::size_t m = l.rows(), k = l.cols(), n = r.cols();
  DenseTensor out(m, n);
  const float* lv = l.values().data();
  const float* rv = r.values().data();
  float* ov = out.values().data();
  parallel_for(m, [&](std::size_t i, std::size_t) {
    float* __restrict o = ov + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float s = lv[i * k + p];
      const float* __restrict rr = rv + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * rr[j];
    }
  });
  return out;
}

std::vector<float> column_sums(const DenseTensor& x) {
  std::vector<float> s(x.cols(), 0.0f);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) s[c] += x(r, c);
  return s;
}

// ---- Int8Ops ------------------------------------------------------------------

Int8Ops Int8Ops::with_scheme(const QuantScheme& s) {
  Int8Ops ops;
  ops.scheme = s;
  ops.tile = s.kind == QuantScheme::Kind::PerBlock ? TileConfig::for_block(s.block)
                                                   : TileConfig::defaults();
  return ops;
}

bool Int8Ops::integer_gemm() const {
  return scheme.kind == QuantScheme::Kind::PerBlock && scheme.block == tile.block;
}

std::string Int8Ops::name() const {
  return scheme.kind == QuantScheme::Kind::PerBlock
             ? scheme.name() + "(" + std::to_string(scheme.block) + ")"
             : scheme.name();
}

BlockQuantTensor Int8Ops::from_dense(const DenseTensor& x) const {
  return quantize_with_scheme(x, scheme);
}
DenseTensor Int8Ops::to_dense(const BlockQuantTensor& x) const { return dequantize(x); }
BlockQuantTensor Int8Ops::zeros(std::size_t rows, std::size_t cols) const {
  return BlockQuantTensor::zeros(rows, cols, scheme.shape_for(rows, cols));
}

BlockQuantTensor Int8Ops::mm_forward(const BlockQuantTensor& x, const BlockQuantTensor& w,
                                     std::span<const float> bias) const {
  if (integer_gemm()) return block_mm_forward(x, w, tile, ExecMode::Int8DataFlow, nullptr, bias);
  if (x.cols() != w.cols()) throw DimensionError("mm_forward: inner dimensions differ");
  DenseTensor y = dense_matmul(dequantize(x), false, dequantize(w), true);
  if (!bias.empty()) {
    if (bias.size() != y.cols()) throw DimensionError("mm_forward: bias length");
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bias[c];
  }
  return from_dense(y);
}

BlockQuantTensor Int8Ops::mm_grad_input(const BlockQuantTensor& dy,
                                        const BlockQuantTensor& w) const {
  if (integer_gemm()) return block_mm_grad_input(dy, w, tile);
  if (dy.cols() != w.rows()) throw DimensionError("mm_grad_input: inner dimensions differ");
  return from_dense(dense_matmul(dequantize(dy), false, dequantize(w), false));
}

DenseTensor Int8Ops::mm_grad_weight(const BlockQuantTensor& dy, const BlockQuantTensor& x) const {
  if (integer_gemm()) return dequantize(block_mm_grad_weight(dy, x, tile));
  if (dy.rows() != x.rows()) throw DimensionError("mm_grad_weight: inner dimensions differ");
  return dequantize(from_dense(dense_matmul(dequantize(dy), true, dequantize(x), false)));
}

BlockQuantTensor Int8Ops::gelu(const BlockQuantTensor& x) const {
  return gelu_forward(x, nonlinear);
}
BlockQuantTensor Int8Ops::gelu_backward(const BlockQuantTensor& x,
                                        const BlockQuantTensor& dy) const {
  return jqt::gelu_backward(x, dy, nonlinear);
}
BlockQuantTensor Int8Ops::dropout(const BlockQuantTensor& x, const DropoutState& st) const {
  return dropout_forward(x, st, nonlinear);
}
BlockQuantTensor Int8Ops::dropout_backward(const BlockQuantTensor& dy,
                                           const DropoutState& st) const {
  return jqt::dropout_backward(dy, st, nonlinear);
}
std::pair<BlockQuantTensor, RowStats> Int8Ops::add(const BlockQuantTensor& a,
                                                   const BlockQuantTensor& b) const {
  return add_forward(a, b, nonlinear);
}
BlockQuantTensor Int8Ops::sum(const BlockQuantTensor& a, const BlockQuantTensor& b) const {
  return add_forward(a, b, nonlinear).first;
}
std::pair<BlockQuantTensor, LayerNormContext> Int8Ops::layernorm(const BlockQuantTensor& x,
                                                                 const RowStats& st,
                                                                 const NormParams& p) const {
  return layernorm_forward(x, st, p, nonlinear);
}
LayerNormGrads Int8Ops::layernorm_backward(const LayerNormContext& ctx,
                                           const BlockQuantTensor& dy,
                                           const NormParams& p) const {
  return jqt::layernorm_backward(ctx, dy, p, nonlinear);
}

// ---- FloatOps ---------------------------------------------------------------------

DenseTensor FloatOps::mm_forward(const DenseTensor& x, const DenseTensor& w,
                                 std::span<const float> bias) const {
  DenseTensor y = dense_matmul(x, false, w, true);
  if (!bias.empty()) {
    if (bias.size() != y.cols()) throw DimensionError("mm_forward: bias length");
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bias[c];
  }
  return y;
}
DenseTensor FloatOps::mm_grad_input(const DenseTensor& dy, const DenseTensor& w) const {
  return dense_matmul(dy, false, w, false);
}
DenseTensor FloatOps::mm_grad_weight(const DenseTensor& dy, const DenseTensor& x) const {
  return dense_matmul(dy, true, x, false);
}

DenseTensor FloatOps::gelu(const DenseTensor& x) const {
  DenseTensor y = x;
  for (float& v : y.values()) v = kernels::gelu(v);
  return y;
}
DenseTensor FloatOps::gelu_backward(const DenseTensor& x, const DenseTensor& dy) const {
  if (x.rows() != dy.rows() || x.cols() != dy.cols()) throw DimensionError("gelu_backward: shapes");
  DenseTensor dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i)
    dx.values()[i] = dy.values()[i] * kernels::gelu_grad(x.values()[i]);
  return dx;
}
DenseTensor FloatOps::dropout(const DenseTensor& x, const DropoutState& st) const {
  if (st.rows != x.rows() || st.cols != x.cols()) throw DimensionError("dropout: mask shape");
  const float k = 1.0f / (1.0f - st.p);
  DenseTensor y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = st.keep(r, c) ? x(r, c) * k : 0.0f;
  return y;
}
DenseTensor FloatOps::dropout_backward(const DenseTensor& dy, const DropoutState& st) const {
  return dropout(dy, st);
}
std::pair<DenseTensor, RowStats> FloatOps::add(const DenseTensor& a, const DenseTensor& b) const {
  DenseTensor y = sum(a, b);
  RowStats st = compute_row_stats(y, y.cols());
  return {std::move(y), std::move(st)};
}
DenseTensor FloatOps::sum(const DenseTensor& a, const DenseTensor& b) const {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add: shapes differ");
  DenseTensor y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] += b.values()[i];
  return y;
}
std::pair<DenseTensor, FloatNormContext> FloatOps::layernorm(const DenseTensor& x,
                                                             const RowStats& st,
                                                             const NormParams& p) const {
  if (st.rows != x.rows()) throw StateError("layernorm: stats do not match input");
  if (p.gamma.size() != x.cols() || p.beta.size() != x.cols())
    throw DimensionError("layernorm: parameter length");
  FloatNormContext ctx{x, std::vector<float>(x.rows()), std::vector<float>(x.rows()), true};
  DenseTensor y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    ctx.mean[r] = static_cast<float>(st.row_mean(r));
    ctx.rstd[r] = static_cast<float>(
        1.0 / std::sqrt(st.row_variance(r) + static_cast<double>(p.eps)));
    kernels::layernorm_apply<float>(x.row(r), p.gamma, p.beta, ctx.mean[r], ctx.rstd[r], y.row(r));
  }
  return {std::move(y), std::move(ctx)};
}
FloatNormGrads FloatOps::layernorm_backward(const FloatNormContext& ctx, const DenseTensor& dy,
                                            const NormParams& p) const {
  if (!ctx.valid) throw StateError("layernorm_backward: no forward context");
  if (dy.rows() != ctx.input.rows() || dy.cols() != ctx.input.cols())
    throw StateError("layernorm_backward: gradient does not match saved input");
  FloatNormGrads g{DenseTensor(dy.rows(), dy.cols()), std::vector<float>(dy.cols(), 0.0f),
                   std::vector<float>(dy.cols(), 0.0f)};
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    kernels::layernorm_row_backward<float>(ctx.input.row(r), dy.row(r), p.gamma, ctx.mean[r],
                                           ctx.rstd[r], g.dx.row(r), g.dgamma, g.dbeta);
  }
  return g;
}

// ---- linear ----------------------------------------------------------------------------

template <class Ops>
void LinearLayer<Ops>::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  if (grad_weight.rows() != master_weight.rows() || grad_weight.cols() != master_weight.cols())
    grad_weight = DenseTensor(master_weight.rows(), master_weight.cols());
  grad_bias.resize(bias.size(), 0.0f);
  out.push_back({prefix + ".weight", master_weight.values(), grad_weight.values(), true});
  if (!bias.empty()) out.push_back({prefix + ".bias", bias, grad_bias, false});
}

template <class Ops>
typename Ops::Tensor linear_forward(const Ops& ops, LinearLayer<Ops>& layer,
                                    const typename Ops::Tensor& x) {
  layer.weight_q = ops.from_dense(layer.master_weight);
  auto y = ops.mm_forward(x, layer.weight_q, layer.bias);
  layer.saved_input = x;
  layer.has_saved = true;
  return y;
}

template <class Ops>
LinearGrads<Ops> linear_backward(const Ops& ops, LinearLayer<Ops>& layer,
                                 const typename Ops::Tensor& dy) {
  if (!layer.has_saved) throw StateError("linear_backward: no saved activation");
  if (dy.rows() != layer.saved_input.rows() || dy.cols() != layer.out_features())
    throw DimensionError("linear_backward: gradient shape");
  LinearGrads<Ops> g;
  g.dx = ops.mm_grad_input(dy, layer.weight_q);
  g.dw = ops.mm_grad_weight(dy, layer.saved_input);
  if (!layer.bias.empty()) g.dbias = column_sums(ops.to_dense(dy));
  layer.grad_weight = g.dw;
  layer.grad_bias = g.dbias;
  return g;
}

template BlockQuantTensor linear_forward(const Int8Ops&, LinearLayer<Int8Ops>&,
                                         const BlockQuantTensor&);
template DenseTensor linear_forward(const FloatOps&, LinearLayer<FloatOps>&, const DenseTensor&);
template LinearGrads<Int8Ops> linear_backward(const Int8Ops&, LinearLayer<Int8Ops>&,
                                              const BlockQuantTensor&);
template LinearGrads<FloatOps> linear_backward(const FloatOps&, LinearLayer<FloatOps>&,
                                               const DenseTensor&);

// ---- attention --------------------------------------------------------------------------

std::vector<float> AttentionCore::probabilities(const DenseTensor& qkv, std::size_t s,
                                                std::size_t h) const {
  const std::size_t L = seq_len, hd = head_dim, c = hidden();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> p(L * L, 0.0f);
  std::vector<float> e(L);
  for (std::size_t t = 0; t < L; ++t) {
    const float* q = qkv.row(s * L + t).data() + h * hd;
    float mx = -INFINITY;
    for (std::size_t j = 0; j <= t; ++j) {
      const float* k = qkv.row(s * L + j).data() + c + h * hd;
      float d = 0.0f;
      for (std::size_t i = 0; i < hd; ++i) d += q[i] * k[i];
      e[j] = d * scale;
      mx = std::max(mx, e[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      e[j] = std::exp(e[j] - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j <= t; ++j) p[t * L + j] = static_cast<float>(e[j] / total);
  }
  return p;
}

DenseTensor AttentionCore::forward(const DenseTensor& qkv, std::size_t sequences) const {
  const std::size_t L = seq_len, hd = head_dim, c = hidden();
  if (qkv.cols() != 3 * c || sequences * L > qkv.rows())
    throw DimensionError("attention: qkv shape");
  DenseTensor out(qkv.rows(), c);
  parallel_for(sequences * heads, [&](std::size_t task, std::size_t) {
    const std::size_t s = task / heads, h = task % heads;
    const std::vector<float> p = probabilities(qkv, s, h);
    for (std::size_t t = 0; t < L; ++t) {
      float* o = out.row(s * L + t).data() + h * hd;
      for (std::size_t j = 0; j <= t; ++j) {
        const float* v = qkv.row(s * L + j).data() + 2 * c + h * hd;
        const float pj = p[t * L + j];
        for (std::size_t i = 0; i < hd; ++i) o[i] += pj * v[i];
      }
    }
  });
  return out;
}

DenseTensor AttentionCore::backward(const DenseTensor& qkv, const DenseTensor& dout,
                                    std::size_t sequences) const {
  const std::size_t L = seq_len, hd = head_dim, c = hidden();
  if (qkv.cols() != 3 * c || sequences * L > qkv.rows() || dout.rows() != qkv.rows() ||
      dout.cols() != c)
    throw DimensionError("attention backward: shapes");
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  DenseTensor dqkv(qkv.rows(), 3 * c);
  parallel_for(sequences * heads, [&](std::size_t task, std::size_t) {
    const std::size_t s = task / heads, h = task % heads;
    const std::vector<float> p = probabilities(qkv, s, h);
    auto q = [&](std::size_t t) { return qkv.row(s * L + t).data() + h * hd; };
    auto k = [&](std::size_t t) { return qkv.row(s * L + t).data() + c + h * hd; };
    auto v = [&](std::size_t t) { return qkv.row(s * L + t).data() + 2 * c + h * hd; };
    auto dq = [&](std::size_t t) { return dqkv.row(s * L + t).data() + h * hd; };
    auto dk = [&](std::size_t t) { return dqkv.row(s * L + t).data() + c + h * hd; };
    auto dv = [&](std::size_t t) { return dqkv.row(s * L + t).data() + 2 * c + h * hd; };
    std::vector<float> ds(L);
    for (std::size_t t = 0; t < L; ++t) {
      const float* go = dout.row(s * L + t).data() + h * hd;
      float dot = 0.0f;
      for (std::size_t j = 0; j <= t; ++j) {
        float dp = 0.0f;
        for (std::size_t i = 0; i < hd; ++i) dp += go[i] * v(j)[i];
        ds[j] = dp;
        dot += p[t * L + j] * dp;
      }
      for (std::size_t j = 0; j <= t; ++j) {
        const float pj = p[t * L + j];
        const float g = pj * (ds[j] - dot) * scale;
        for (std::size_t i = 0; i < hd; ++i) {
          dv(j)[i] += pj * go[i];
          dq(t)[i] += g * k(j)[i];
          dk(j)[i] += g * q(t)[i];
        }
      }
    }
  });
  return dqkv;
}

// ---- transformer block --------------------------------------------------------------------

template <class Ops>
TransformerBlock<Ops>::TransformerBlock(const BlockConfig& cfg, std::uint64_t init_seed,
                                        std::size_t layers)
    : ln1(NormParams::identity(cfg.hidden)),
      ln2(NormParams::identity(cfg.hidden)),
      grad_ln1_gamma(cfg.hidden),
      grad_ln1_beta(cfg.hidden),
      grad_ln2_gamma(cfg.hidden),
      grad_ln2_beta(cfg.hidden),
      cfg_(cfg) {
  if (cfg.heads == 0 || cfg.hidden % cfg.heads != 0)
    throw ConfigError("block: hidden size must be a multiple of the head count");
  const std::size_t c = cfg.hidden, m = cfg.mlp_ratio * c;
  const float std_in = 0.02f;
  const float std_out = 0.02f / std::sqrt(2.0f * static_cast<float>(std::max<std::size_t>(layers, 1)));
  qkv = {normal_init(3 * c, c, std_in, mix(init_seed, 1)), std::vector<float>(3 * c, 0.0f)};
  proj = {normal_init(c, c, std_out, mix(init_seed, 2)), std::vector<float>(c, 0.0f)};
  fc1 = {normal_init(m, c, std_in, mix(init_seed, 3)), std::vector<float>(m, 0.0f)};
  fc2 = {normal_init(c, m, std_out, mix(init_seed, 4)), std::vector<float>(c, 0.0f)};
  attn_ = {cfg.heads, c / cfg.heads, cfg.seq_len};
}

template <class Ops>
std::pair<typename Ops::Tensor, RowStats> TransformerBlock<Ops>::forward(
    const Ops& ops, const Tensor& x, const RowStats& stats, std::size_t sequences,
    std::uint64_t dropout_seed, bool training) {
  sequences_ = sequences;
  const bool drop = training && cfg_.dropout > 0.0f;
  dropped_ = drop;
  const std::size_t n = x.rows(), c = cfg_.hidden;

  auto [a, ctx1] = ops.layernorm(x, stats, ln1);
  ctx1_ = std::move(ctx1);
  qkv_out_ = linear_forward(ops, qkv, a);
  Tensor o = ops.from_dense(attn_.forward(ops.to_dense(qkv_out_), sequences));
  Tensor p = linear_forward(ops, proj, o);
  if (drop) {
    drop1_ = DropoutState::make(cfg_.dropout, mix(dropout_seed, 1), n, c);
    p = ops.dropout(p, drop1_);
  }
  auto [h, st2] = ops.add(x, p);

  auto [b, ctx2] = ops.layernorm(h, st2, ln2);
  ctx2_ = std::move(ctx2);
  fc1_out_ = linear_forward(ops, fc1, b);
  Tensor g = ops.gelu(fc1_out_);
  Tensor m = linear_forward(ops, fc2, g);
  if (drop) {
    drop2_ = DropoutState::make(cfg_.dropout, mix(dropout_seed, 2), n, c);
    m = ops.dropout(m, drop2_);
  }
  has_forward_ = true;
  return ops.add(h, m);
}

template <class Ops>
typename Ops::Tensor TransformerBlock<Ops>::backward(const Ops& ops, const Tensor& dy) {
  if (!has_forward_) throw StateError("block backward: no forward context");
  const bool drop = dropped_;

  Tensor dm = drop ? ops.dropout_backward(dy, drop2_) : dy;
  Tensor dg = linear_backward(ops, fc2, dm).dx;
  Tensor df = ops.gelu_backward(fc1_out_, dg);
  Tensor db = linear_backward(ops, fc1, df).dx;
  auto g2 = ops.layernorm_backward(ctx2_, db, ln2);
  grad_ln2_gamma = std::move(g2.dgamma);
  grad_ln2_beta = std::move(g2.dbeta);
  Tensor dh = ops.sum(dy, g2.dx);

  Tensor dp = drop ? ops.dropout_backward(dh, drop1_) : dh;
  Tensor dout = linear_backward(ops, proj, dp).dx;
  Tensor dq = ops.from_dense(attn_.backward(ops.to_dense(qkv_out_), ops.to_dense(dout), sequences_));
  Tensor da = linear_backward(ops, qkv, dq).dx;
  auto g1 = ops.layernorm_backward(ctx1_, da, ln1);
  grad_ln1_gamma = std::move(g1.dgamma);
  grad_ln1_beta = std::move(g1.dbeta);
  return ops.sum(dh, g1.dx);
}

template <class Ops>
SavedBytes TransformerBlock<Ops>::saved_bytes() const {
  if (!has_forward_) throw StateError("saved_bytes: no forward context");
  SavedBytes s;
  auto count = [&](const Tensor& t) {
    ++s.tensors;
    s.elements += Ops::elements(t);
    s.bytes += Ops::bytes(t);
  };
  count(ctx1_.input);         // block input x
  count(qkv.saved_input);     // LN1 output
  count(qkv_out_);            // attention input
  count(proj.saved_input);    // attention output
  count(ctx2_.input);         // residual h
  count(fc1.saved_input);     // LN2 output
  count(fc1_out_);            // GELU input
  count(fc2.saved_input);     // GELU output
  s.aux_bytes = Ops::context_bytes(ctx1_) + Ops::context_bytes(ctx2_);
  return s;
}

template <class Ops>
void TransformerBlock<Ops>::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  qkv.append_params(prefix + ".qkv", out);
  proj.append_params(prefix + ".proj", out);
  fc1.append_params(prefix + ".fc1", out);
  fc2.append_params(prefix + ".fc2", out);
  grad_ln1_gamma.resize(cfg_.hidden);
  grad_ln1_beta.resize(cfg_.hidden);
  grad_ln2_gamma.resize(cfg_.hidden);
  grad_ln2_beta.resize(cfg_.hidden);
  out.push_back({prefix + ".ln1.gamma", ln1.gamma, grad_ln1_gamma, false});
  out.push_back({prefix + ".ln1.beta", ln1.beta, grad_ln1_beta, false});
  out.push_back({prefix + ".ln2.gamma", ln2.gamma, grad_ln2_gamma, false});
  out.push_back({prefix + ".ln2.beta", ln2.beta, grad_ln2_beta, false});
}

template class TransformerBlock<Int8Ops>;
template class TransformerBlock<FloatOps>;

// ---- model --------------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab < 2) throw ConfigError("model: vocab must be at least 2");
  if (seq_len == 0 || layers == 0 || hidden == 0 || mlp_ratio == 0)
    throw ConfigError("model: dimensions must be positive");
  if (heads == 0 || hidden % heads != 0)
    throw ConfigError("model: hidden size must be a multiple of the head count");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("model: dropout must be in [0, 1)");
  if (!(outlier_factor >= 0.0f) || !(outlier_fraction >= 0.0f && outlier_fraction <= 1.0f))
    throw ConfigError("model: outlier gain settings");
}

template <class Ops>
TransformerModel<Ops>::TransformerModel(const ModelConfig& cfg)
    : ln_f(NormParams::identity(cfg.hidden)), cfg_(cfg) {
  cfg.validate();
  const std::size_t c = cfg.hidden;
  tok_emb = normal_init(cfg.vocab, c, 0.02f, mix(cfg.init_seed, 101));
  pos_emb = normal_init(cfg.seq_len, c, 0.02f, mix(cfg.init_seed, 102));
  head = normal_init(cfg.vocab, c, 0.02f, mix(cfg.init_seed, 103));
  gain_.assign(c, 1.0f);
  if (cfg.outlier_factor > 0.0f) {
    // fixed channel set, independent of the run seed
    for (std::size_t ch : outlier_channels(c, cfg.outlier_fraction, 0)) gain_[ch] = cfg.outlier_factor;
  }
  BlockConfig bc{c, cfg.heads, cfg.mlp_ratio, cfg.seq_len, cfg.dropout};
  for (std::size_t i = 0; i < cfg.layers; ++i)
    blocks_.emplace_back(bc, mix(cfg.init_seed, 200 + i), cfg.layers);
  grad_tok_ = DenseTensor(cfg.vocab, c);
  grad_pos_ = DenseTensor(cfg.seq_len, c);
  grad_head_ = DenseTensor(cfg.vocab, c);
  grad_lnf_gamma_.assign(c, 0.0f);
  grad_lnf_beta_.assign(c, 0.0f);
}

template <class Ops>
double TransformerModel<Ops>::forward(const Ops& ops, const TokenBatch& batch,
                                      std::uint64_t dropout_seed, bool training) {
  const std::size_t L = cfg_.seq_len, c = cfg_.hidden, real = batch.sequences * L;
  if (batch.rows < real || batch.tokens.size() != batch.rows || batch.targets.size() != batch.rows)
    throw DimensionError("model: malformed batch");
  DenseTensor xt(batch.rows, c), xp(batch.rows, c);
  for (std::size_t r = 0; r < real; ++r) {
    const std::int32_t tok = batch.tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab)
      throw DomainError("model: token id out of range");
    for (std::size_t i = 0; i < c; ++i) {
      xt(r, i) = tok_emb(static_cast<std::size_t>(tok), i) * gain_[i];
      xp(r, i) = pos_emb(r % L, i) * gain_[i];
    }
  }
  auto [x, st] = ops.add(ops.from_dense(xt), ops.from_dense(xp));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto out = blocks_[i].forward(ops, x, st, batch.sequences, mix(dropout_seed, i), training);
    x = std::move(out.first);
    st = std::move(out.second);
  }
  auto [z, ctx] = ops.layernorm(x, st, ln_f);
  ctx_f_ = std::move(ctx);
  final_ = ops.to_dense(z);
  logits_ = dense_matmul(final_, false, head, true);

  double loss = 0.0;
  counted_ = 0;
  for (std::size_t r = 0; r < real; ++r) {
    const std::int32_t t = batch.targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= cfg_.vocab) throw DomainError("model: target out of range");
    const auto row = logits_.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double se = 0.0;
    for (float v : row) se += std::exp(static_cast<double>(v) - mx);
    loss += std::log(se) + mx - static_cast<double>(row[static_cast<std::size_t>(t)]);
    ++counted_;
  }
  batch_ = batch;
  has_forward_ = true;
  return counted_ ? loss / static_cast<double>(counted_) : 0.0;
}

template <class Ops>
void TransformerModel<Ops>::backward(const Ops& ops) {
  if (!has_forward_) throw StateError("model backward: no forward context");
  const std::size_t L = cfg_.seq_len, c = cfg_.hidden, v = cfg_.vocab;
  const std::size_t real = batch_.sequences * L;

  // Per-token gradient (p - onehot) enters the quantized flow unnormalized; the
  // 1/count factor is applied to the FP32 parameter gradients at the end.
  DenseTensor dlogits(logits_.rows(), v);
  for (std::size_t r = 0; r < real; ++r) {
    const std::int32_t t = batch_.targets[r];
    if (t < 0) continue;
    const auto row = logits_.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double se = 0.0;
    for (float z : row) se += std::exp(static_cast<double>(z) - mx);
    for (std::size_t j = 0; j < v; ++j)
      dlogits(r, j) = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / se);
    dlogits(r, static_cast<std::size_t>(t)) -= 1.0f;
  }
  grad_head_ = dense_matmul(dlogits, true, final_, false);
  const DenseTensor dfinal = dense_matmul(dlogits, false, head, false);
  auto gf = ops.layernorm_backward(ctx_f_, ops.from_dense(dfinal), ln_f);
  grad_lnf_gamma_ = std::move(gf.dgamma);
  grad_lnf_beta_ = std::move(gf.dbeta);
  Tensor dx = std::move(gf.dx);
  for (std::size_t i = blocks_.size(); i-- > 0;) dx = blocks_[i].backward(ops, dx);

  const DenseTensor dd = ops.to_dense(dx);
  grad_tok_ = DenseTensor(v, c);
  grad_pos_ = DenseTensor(L, c);
  for (std::size_t r = 0; r < real; ++r) {
    const auto tok = static_cast<std::size_t>(batch_.tokens[r]);
    for (std::size_t i = 0; i < c; ++i) {
      grad_tok_(tok, i) += dd(r, i) * gain_[i];
      grad_pos_(r % L, i) += dd(r, i) * gain_[i];
    }
  }
  if (counted_ > 0) {
    const float inv = 1.0f / static_cast<float>(counted_);
    for (ParamRef& p : params())
      for (float& g : p.grad) g *= inv;
  }
}

template <class Ops>
std::vector<ParamRef> TransformerModel<Ops>::params() {
  std::vector<ParamRef> out;
  out.push_back({"tok_emb", tok_emb.values(), grad_tok_.values(), false});
  out.push_back({"pos_emb", pos_emb.values(), grad_pos_.values(), false});
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].append_params("block" + std::to_string(i), out);
  out.push_back({"ln_f.gamma", ln_f.gamma, grad_lnf_gamma_, false});
  out.push_back({"ln_f.beta", ln_f.beta, grad_lnf_beta_, false});
  out.push_back({"head", head.values(), grad_head_.values(), true});
  return out;
}

template class TransformerModel<Int8Ops>;
template class TransformerModel<FloatOps>;

// ---- parameter files ------------------------------------------------------------------------

namespace {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw StateError("params: truncated file");
  return v;
}

}  // namespace

void save_params(const std::string& path, const std::vector<ParamRef>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StateError("params: cannot write " + path);
  out.write("JQTP", 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint64_t>(out, p.value.size());
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(float)));
  }
  if (!out) throw StateError("params: write failed for " + path);
}

void load_params(const std::string& path, const std::vector<ParamRef>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("params: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "JQTP", 4) != 0)
    throw StateError("params: bad magic in " + path);
  if (get<std::uint32_t>(in) != params.size()) throw StateError("params: parameter count differs");
  for (const ParamRef& p : params) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw StateError("params: truncated file");
    if (name != p.name) throw StateError("params: expected " + p.name + ", found " + name);
    if (get<std::uint64_t>(in) != p.value.size()) throw StateError("params: size differs for " + name);
    if (!in.read(reinterpret_cast<char*>(p.value.data()),
                 static_cast<std::streamsize>(p.value.size() * sizeof(float))))
      throw StateError("params: truncated file");
  }
}

}  // namespace jqt
