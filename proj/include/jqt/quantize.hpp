#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>

#include "jqt/tensor.hpp"

namespace jqt {

/// Symmetric quantization with one scale per B x B block:
/// s = max|x| / 127 stored on the binary16 grid (1.0 for an all-zero block),
/// q = clamp(round_half_even(x / s), -127, 127).
/// Throws DimensionError unless both dims are positive multiples of B and
/// DomainError on non-finite input or a scale beyond binary16 range.
BlockQuantTensor quantize_per_block(const DenseTensor& x, std::size_t block);

/// Quantization with an arbitrary group shape; the shared kernel behind every
/// scheme, so per-block with B = N = C is bit-identical to per-tensor.
BlockQuantTensor quantize_blocks(const DenseTensor& x, BlockShape shape);

BlockQuantTensor quantize_with_scheme(const DenseTensor& x, const QuantScheme& scheme);

DenseTensor dequantize(const BlockQuantTensor& xq);

struct QuantError {
  double mse = 0.0;
  double mean_abs = 0.0;
};

QuantError quantization_error(const DenseTensor& x, const QuantScheme& scheme);

/// Binary16-grid scale for a group whose largest magnitude is max_abs.
float block_scale(float max_abs);

/// Quantizes one group in place: writes values into out and returns the
/// scale. Elements are read through a strided view of a row-major buffer.
float quantize_group(const float* src, std::size_t ld, std::size_t rows, std::size_t cols,
                     std::int8_t* dst, std::size_t ld_dst);

// ---- "JQT1" fixture files --------------------------------------------------
//
// Little endian: magic "JQT1", u32 rows, u32 cols, u32 block, rows*cols int8
// values row-major, then the scale matrix row-major as binary16 bit patterns.

void write_jqt(std::ostream& out, const BlockQuantTensor& t);
BlockQuantTensor read_jqt(std::istream& in);
void save_jqt(const std::string& path, const BlockQuantTensor& t);
BlockQuantTensor load_jqt(const std::string& path);

}  // namespace jqt
