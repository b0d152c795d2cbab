#pragma once

// Fused INT8 non-linear operators. Each one loads INT8 tiles, dequantizes to
// float, applies the operator and requantizes per block before storing, so
// nothing but (int8 values, binary16 scales) leaves an operator.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "jqt/qgemm.hpp"
#include "jqt/tensor.hpp"

namespace jqt {

struct NonlinearConfig {
  std::size_t tile_rows = 64;
  std::size_t tile_cols = 64;
  ExecMode mode = ExecMode::Int8DataFlow;
};

/// Per-row, per-column-segment mean and sum of squares of the float Add
/// output, taken before quantization. `width` columns per segment.
struct RowStats {
  std::size_t rows = 0;
  std::size_t segments = 0;
  std::size_t width = 0;
  std::vector<double> mean;   // rows x segments
  std::vector<double> sumsq;  // rows x segments

  double row_mean(std::size_t r) const;
  double row_variance(std::size_t r) const;
  std::size_t storage_bytes() const { return 2 * rows * segments * sizeof(float); }
};

/// Dropout probability, seed and the keep mask derived from them.
struct DropoutState {
  float p = 0.0f;
  std::uint64_t seed = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> mask;  // bitset, row-major, 1 = keep

  /// Builds the mask from a counter-based generator keyed by (seed, index),
  /// so it is reproducible from (seed, shape) alone.
  static DropoutState make(float p, std::uint64_t seed, std::size_t rows, std::size_t cols);

  bool keep(std::size_t r, std::size_t c) const {
    const std::size_t i = r * cols + c;
    return (mask[i >> 6] >> (i & 63)) & 1u;
  }
  std::size_t kept() const;
};

struct NormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  float eps = 1e-5f;

  static NormParams identity(std::size_t c) {
    return {std::vector<float>(c, 1.0f), std::vector<float>(c, 0.0f), 1e-5f};
  }
};

struct LayerNormContext {
  BlockQuantTensor input;
  std::vector<float> mean;
  std::vector<float> rstd;
  bool valid = false;
};

struct LayerNormGrads {
  BlockQuantTensor dx;
  std::vector<float> dgamma;
  std::vector<float> dbeta;
};

namespace kernels {

template <class T>
T normal_cdf(T x) {
  return T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
}

template <class T>
T normal_pdf(T x) {
  return std::exp(-T(0.5) * x * x) * (std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>);
}

template <class T>
T gelu(T x) {
  return x * normal_cdf(x);
}

template <class T>
T gelu_grad(T x) {
  return x * normal_pdf(x) + normal_cdf(x);
}

/// y = gamma * (x - mean) * rstd + beta
template <class T>
void layernorm_apply(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                     T mean, T rstd, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = gamma[i] * ((x[i] - mean) * rstd) + beta[i];
  }
}

/// Reference row LayerNorm with directly computed statistics.
template <class T>
void layernorm_row(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                   T eps, std::span<T> y, T* mean_out = nullptr, T* rstd_out = nullptr) {
  T mean = 0;
  for (T v : x) mean += v;
  mean /= static_cast<T>(x.size());
  T var = 0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(x.size());
  const T rstd = T(1) / std::sqrt(var + eps);
  layernorm_apply(x, gamma, beta, mean, rstd, y);
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

/// Standard LayerNorm gradient for one row; dgamma/dbeta are accumulated.
template <class T>
void layernorm_row_backward(std::span<const T> x, std::span<const T> dy, std::span<const T> gamma,
                            T mean, T rstd, std::span<T> dx, std::span<T> dgamma,
                            std::span<T> dbeta) {
  const std::size_t n = x.size();
  T mean_g = 0;
  T mean_gx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T g = dy[i] * gamma[i];
    mean_g += g;
    mean_gx += g * xhat;
    dgamma[i] += dy[i] * xhat;
    dbeta[i] += dy[i];
  }
  mean_g /= static_cast<T>(n);
  mean_gx /= static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    dx[i] = rstd * (dy[i] * gamma[i] - mean_g - xhat * mean_gx);
  }
}

/// Uniform [0, 1) draw for element `index` under `seed`.
double dropout_uniform(std::uint64_t seed, std::uint64_t index);

}  // namespace kernels

BlockQuantTensor gelu_forward(const BlockQuantTensor& x, const NonlinearConfig& cfg = {},
                              AccessCounters* counters = nullptr);
BlockQuantTensor gelu_backward(const BlockQuantTensor& x, const BlockQuantTensor& dy,
                               const NonlinearConfig& cfg = {},
                               AccessCounters* counters = nullptr);

/// Masks integer values and multiplies every block scale by 1/(1-p). Integer
/// values are never rescaled.
BlockQuantTensor dropout_forward(const BlockQuantTensor& x, const DropoutState& state,
                                 const NonlinearConfig& cfg = {},
                                 AccessCounters* counters = nullptr);
BlockQuantTensor dropout_backward(const BlockQuantTensor& dy, const DropoutState& state,
                                  const NonlinearConfig& cfg = {},
                                  AccessCounters* counters = nullptr);

/// y = deq(x1) + deq(x2), requantized, plus the RowStats of the float sum.
std::pair<BlockQuantTensor, RowStats> add_forward(const BlockQuantTensor& x1,
                                                  const BlockQuantTensor& x2,
                                                  const NonlinearConfig& cfg = {},
                                                  AccessCounters* counters = nullptr);

/// Column width of the RowStats segments add_forward produces for this shape.
std::size_t stats_width(std::size_t cols, BlockShape block, const NonlinearConfig& cfg);

/// Row statistics of a dense matrix with the given segment width.
RowStats compute_row_stats(const DenseTensor& y, std::size_t width);

/// LayerNorm that takes its row mean/variance from the stats of the Add that
/// produced x. x must be that Add's output.
std::pair<BlockQuantTensor, LayerNormContext> layernorm_forward(const BlockQuantTensor& x,
                                                                const RowStats& stats,
                                                                const NormParams& params,
                                                                const NonlinearConfig& cfg = {},
                                                                AccessCounters* counters = nullptr);
LayerNormGrads layernorm_backward(const LayerNormContext& ctx, const BlockQuantTensor& dy,
                                  const NormParams& params, const NonlinearConfig& cfg = {},
                                  AccessCounters* counters = nullptr);

}  // namespace jqt
