#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace jqt {

/// Row-major matrix of 32-bit reals. Full-precision intermediates only.
class DenseTensor {
 public:
  DenseTensor() = default;
  DenseTensor(std::size_t rows, std::size_t cols, float fill = 0.0f);
  DenseTensor(std::size_t rows, std::size_t cols, std::vector<float> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }

  float& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::span<float> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  bool all_finite() const;

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> values_;
};

/// Extent of one quantization group. Square (B, B) is the per-block format;
/// the other schemes are the degenerate shapes (N, C), (1, C) and (N, 1).
struct BlockShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  bool square() const { return rows == cols; }
  friend bool operator==(const BlockShape&, const BlockShape&) = default;
};

/// INT8 values in [-127, 127] plus one binary16-grid scale per block.
///
/// This is the only tensor type that crosses operator boundaries in the
/// INT8 data flow. Instances are immutable once constructed; the
/// constructor enforces every format invariant.
class BlockQuantTensor {
 public:
  BlockQuantTensor() = default;
  BlockQuantTensor(std::size_t rows, std::size_t cols, BlockShape block,
                   std::vector<std::int8_t> values, std::vector<float> scales);

  /// All-zero tensor (every scale 1.0).
  static BlockQuantTensor zeros(std::size_t rows, std::size_t cols, BlockShape block);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  BlockShape block_shape() const { return block_; }
  /// Square block size B; throws DimensionError for non-square grouping.
  std::size_t block() const;

  std::size_t scale_rows() const { return rows_ / block_.rows; }
  std::size_t scale_cols() const { return cols_ / block_.cols; }

  std::int8_t value(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  float scale(std::size_t i, std::size_t j) const { return scales_[i * scale_cols() + j]; }
  /// Scale of the block holding element (r, c).
  float scale_of(std::size_t r, std::size_t c) const {
    return scale(r / block_.rows, c / block_.cols);
  }

  std::span<const std::int8_t> values() const { return values_; }
  std::span<const float> scales() const { return scales_; }

  /// Bytes held: one per value plus two per binary16 scale.
  std::size_t storage_bytes() const { return values_.size() + 2 * scales_.size(); }

  friend bool operator==(const BlockQuantTensor&, const BlockQuantTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  BlockShape block_{};
  std::vector<std::int8_t> values_;
  std::vector<float> scales_;
};

/// Scale granularity.
struct QuantScheme {
  enum class Kind { PerTensor, PerToken, PerChannel, PerBlock };

  Kind kind = Kind::PerBlock;
  std::size_t block = 32;  // used by PerBlock only

  static QuantScheme per_tensor() { return {Kind::PerTensor, 0}; }
  static QuantScheme per_token() { return {Kind::PerToken, 0}; }
  static QuantScheme per_channel() { return {Kind::PerChannel, 0}; }
  static QuantScheme per_block(std::size_t b) { return {Kind::PerBlock, b}; }

  /// Group extent this scheme uses for a rows x cols matrix.
  BlockShape shape_for(std::size_t rows, std::size_t cols) const;

  /// "per-tensor", "per-token", "per-channel", "per-block".
  std::string name() const;
  static QuantScheme parse(const std::string& name, std::size_t block = 32);

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

}  // namespace jqt
