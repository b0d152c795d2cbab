#pragma once

// Three-level tiled INT8 matrix multiply with in-tile dequantize-accumulate.
//
//   compute tile      B_N x B_C x B_D, output tiles independent, k ascending
//   quantization blk  B x B x B, one int32 product per (p, q) block pair
//   micro kernel      16 x 16 x 16 exact integer multiply-accumulate
//
// Every output element is accumulated in float as
//   acc += s_a(p, k) * int32_product(p, q, k) * s_b(k, q)
// over k-blocks in ascending order, so the result does not depend on the
// tile sizes or the number of worker threads.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>

#include "jqt/tensor.hpp"

namespace jqt {

struct TileConfig {
  std::size_t tile_n = 128;  // B_N, output rows per compute tile
  std::size_t tile_c = 32;   // B_C, inner-axis step; must equal block
  std::size_t tile_d = 128;  // B_D, output cols per compute tile
  std::size_t block = 32;    // B, quantization block size

  static TileConfig defaults() { return {}; }
  static TileConfig for_block(std::size_t b) { return {4 * b, b, 4 * b, b}; }

  /// Throws ConfigError when the tiling constraints do not hold.
  void validate() const;

  friend bool operator==(const TileConfig&, const TileConfig&) = default;
};

/// Traffic and operation counts of one kernel call, in elements.
struct AccessCounters {
  std::uint64_t int8_load_store = 0;
  std::uint64_t fp16_load_store = 0;
  std::uint64_t int_mac = 0;
  std::uint64_t dequant_ops = 0;
  std::uint64_t quant_ops = 0;

  void reset() { *this = {}; }
  AccessCounters& operator+=(const AccessCounters& o);
  std::uint64_t bytes_moved() const { return int8_load_store + 2 * fp16_load_store; }

  friend bool operator==(const AccessCounters&, const AccessCounters&) = default;
};

/// Int8DataFlow: INT8 in / INT8 out, quantize and dequantize fused in-tile.
/// QcdEmulation: identical math, but traffic is charged as the 16-bit
/// operands of a quantize-compute-dequantize pipeline.
enum class ExecMode { Int8DataFlow, QcdEmulation };

std::string to_string(ExecMode m);
ExecMode parse_exec_mode(const std::string& s);

using Int8Tile16 = std::array<std::int8_t, 256>;
using Int32Tile16 = std::array<std::int32_t, 256>;

/// Exact 16x16x16 product C = A * Bt of row-major int8 tiles, where Bt is the
/// right-hand operand already laid out as (inner x output).
Int32Tile16 micro_mm_16(const Int8Tile16& a, const Int8Tile16& bt);

/// C += A * B on strided 16x16 fragments.
void micro_mm_16_acc(const std::int8_t* a, std::size_t lda, const std::int8_t* b,
                     std::size_t ldb, std::int32_t* c, std::size_t ldc);

// ---- pre-quantization accumulators ----------------------------------------
//
// These return the float accumulator before output requantization. The
// block_mm_* functions below quantize it per B x B block.

/// Y = X * W^T with X: N x C, W: D x C.
DenseTensor mm_forward_accum(const BlockQuantTensor& x, const BlockQuantTensor& w,
                             const TileConfig& cfg, ExecMode mode = ExecMode::Int8DataFlow,
                             AccessCounters* counters = nullptr);
/// dX = dY * W with dY: N x D, W: D x C.
DenseTensor mm_grad_input_accum(const BlockQuantTensor& dy, const BlockQuantTensor& w,
                                const TileConfig& cfg, ExecMode mode = ExecMode::Int8DataFlow,
                                AccessCounters* counters = nullptr);
/// dW = dY^T * X with dY: N x D, X: N x C.
DenseTensor mm_grad_weight_accum(const BlockQuantTensor& dy, const BlockQuantTensor& x,
                                 const TileConfig& cfg, ExecMode mode = ExecMode::Int8DataFlow,
                                 AccessCounters* counters = nullptr);

/// Forward MM with output requantization. An optional bias (length D) is
/// added to the float accumulator before quantization. Counters, when given,
/// are reset and then filled for this call.
BlockQuantTensor block_mm_forward(const BlockQuantTensor& x, const BlockQuantTensor& w,
                                  const TileConfig& cfg, ExecMode mode = ExecMode::Int8DataFlow,
                                  AccessCounters* counters = nullptr,
                                  std::span<const float> bias = {});
BlockQuantTensor block_mm_grad_input(const BlockQuantTensor& dy, const BlockQuantTensor& w,
                                     const TileConfig& cfg,
                                     ExecMode mode = ExecMode::Int8DataFlow,
                                     AccessCounters* counters = nullptr);
BlockQuantTensor block_mm_grad_weight(const BlockQuantTensor& dy, const BlockQuantTensor& x,
                                      const TileConfig& cfg,
                                      ExecMode mode = ExecMode::Int8DataFlow,
                                      AccessCounters* counters = nullptr);

/// Closed-form counters for an M x K x Nout call, summed over output tiles
/// (edge tiles use their actual extents).
AccessCounters expected_counters(std::size_t m, std::size_t k, std::size_t n,
                                 const TileConfig& cfg, ExecMode mode);

// ---- counter dump ----------------------------------------------------------

struct CounterRecord {
  std::string op_name;
  std::size_t n = 0, c = 0, d = 0, block = 0;
  ExecMode mode = ExecMode::Int8DataFlow;
  AccessCounters counters;
};

void write_counter_header(std::ostream& out);
void write_counter_row(std::ostream& out, const CounterRecord& rec);

}  // namespace jqt
