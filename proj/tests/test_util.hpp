#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "jqt/qgemm.hpp"
#include "jqt/quantize.hpp"
#include "jqt/synthetic.hpp"
#include "jqt/tensor.hpp"

namespace jqt::testing {

inline DenseTensor gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            float stddev = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, stddev);
  DenseTensor t(rows, cols);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

inline DenseTensor uniform(std::size_t rows, std::size_t cols, std::uint64_t seed, float lo,
                           float hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  DenseTensor t(rows, cols);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

inline DenseTensor channel_outliers(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                    double fraction, float factor) {
  return channel_outlier_matrix(rows, cols, fraction, factor, seed);
}

/// Random block-quantized tensor with arbitrary int8 values and binary16 scales.
inline BlockQuantTensor random_bqt(std::size_t rows, std::size_t cols, std::size_t block,
                                   std::uint64_t seed, bool unit_scales = false) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> val(-127, 127);
  std::uniform_real_distribution<float> sc(0.01f, 2.0f);
  std::vector<std::int8_t> values(rows * cols);
  for (auto& v : values) v = static_cast<std::int8_t>(val(rng));
  std::vector<float> scales((rows / block) * (cols / block));
  for (auto& s : scales) s = unit_scales ? 1.0f : block_scale(sc(rng) * 127.0f);
  return {rows, cols, {block, block}, std::move(values), std::move(scales)};
}

/// Dense FP64 product of dequantized operands: op(A) * op(B).
inline std::vector<double> dense_product(const DenseTensor& a, bool ta, const DenseTensor& b,
                                         bool tb, std::size_t& m_out, std::size_t& n_out) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a(p, i) : a(i, p);
        const double bv = tb ? b(j, p) : b(p, j);
        s += av * bv;
      }
      out[i * n + j] = s;
    }
  }
  m_out = m;
  n_out = n;
  return out;
}

/// max |y - ref| / max |ref| (0 when ref is identically zero and y matches).
inline double normwise_rel_error(const DenseTensor& y, const std::vector<double>& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    num = std::max(num, std::fabs(static_cast<double>(y.values()[i]) - ref[i]));
    den = std::max(den, std::fabs(ref[i]));
  }
  return den == 0.0 ? num : num / den;
}

}  // namespace jqt::testing
