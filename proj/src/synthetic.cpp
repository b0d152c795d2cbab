#include "jqt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace jqt {

DenseTensor gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  DenseTensor t(rows, cols);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

std::vector<std::size_t> outlier_channels(std::size_t cols, double fraction, std::uint64_t seed) {
  const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(cols)));
  const std::size_t n = std::min(cols, std::max<std::size_t>(1, want));
  std::vector<std::size_t> idx(cols);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (cols - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

DenseTensor channel_outlier_matrix(std::size_t rows, std::size_t cols, double fraction,
                                   float factor, std::uint64_t seed) {
  DenseTensor t = gaussian_matrix(rows, cols, seed);
  for (std::size_t c : outlier_channels(cols, fraction, seed)) {
    for (std::size_t r = 0; r < rows; ++r) t(r, c) *= factor;
  }
  return t;
}

}  // namespace jqt
