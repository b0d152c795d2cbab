#pragma once

#include <cstdint>
#include <vector>

#include "jqt/tensor.hpp"

namespace jqt {

/// Standard Gaussian matrix from a seeded 64-bit Mersenne Twister.
DenseTensor gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed);

/// Column indices of the outlier channels: max(1, round(fraction * cols))
/// distinct columns drawn from the seed, sorted.
std::vector<std::size_t> outlier_channels(std::size_t cols, double fraction, std::uint64_t seed);

/// Gaussian matrix whose outlier channels are multiplied by `factor`.
DenseTensor channel_outlier_matrix(std::size_t rows, std::size_t cols, double fraction,
                                   float factor, std::uint64_t seed);

}  // namespace jqt
