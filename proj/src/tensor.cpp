#include "jqt/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "jqt/error.hpp"
#include "jqt/half.hpp"

namespace jqt {

DenseTensor::DenseTensor(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

DenseTensor::DenseTensor(std::size_t rows, std::size_t cols, std::vector<float> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw DimensionError("DenseTensor: value count does not match shape");
  }
}

bool DenseTensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

BlockQuantTensor::BlockQuantTensor(std::size_t rows, std::size_t cols, BlockShape block,
                                   std::vector<std::int8_t> values, std::vector<float> scales)
    : rows_(rows), cols_(cols), block_(block), values_(std::move(values)), scales_(std::move(scales)) {
  if (rows == 0 || cols == 0 || block.rows == 0 || block.cols == 0) {
    throw DimensionError("BlockQuantTensor: empty shape or block");
  }
  if (rows % block.rows != 0 || cols % block.cols != 0) {
    throw DimensionError("BlockQuantTensor: dims must be multiples of the block shape");
  }
  if (values_.size() != rows * cols) {
    throw DimensionError("BlockQuantTensor: value count does not match shape");
  }
  if (scales_.size() != scale_rows() * scale_cols()) {
    throw DimensionError("BlockQuantTensor: scale count does not match block grid");
  }
  if (std::any_of(values_.begin(), values_.end(), [](std::int8_t v) { return v == -128; })) {
    throw DomainError("BlockQuantTensor: -128 is outside the symmetric range");
  }
  for (float s : scales_) {
    if (!std::isfinite(s) || s < 0.0f || half::round(s) != s) {
      throw DomainError("BlockQuantTensor: scale must be finite, non-negative, binary16-exact");
    }
  }
}

BlockQuantTensor BlockQuantTensor::zeros(std::size_t rows, std::size_t cols, BlockShape block) {
  if (block.rows == 0 || block.cols == 0) throw DimensionError("BlockQuantTensor: empty block");
  const std::size_t n_scales = (rows / block.rows) * (cols / block.cols);
  return {rows, cols, block, std::vector<std::int8_t>(rows * cols, 0),
          std::vector<float>(n_scales, 1.0f)};
}

std::size_t BlockQuantTensor::block() const {
  if (!block_.square()) throw DimensionError("BlockQuantTensor: grouping is not square");
  return block_.rows;
}

BlockShape QuantScheme::shape_for(std::size_t rows, std::size_t cols) const {
  switch (kind) {
    case Kind::PerTensor:
      return {rows, cols};
    case Kind::PerToken:
      return {1, cols};
    case Kind::PerChannel:
      return {rows, 1};
    case Kind::PerBlock:
      if (block == 0) throw ConfigError("per-block scheme needs a positive block size");
      return {block, block};
  }
  return {rows, cols};
}

std::string QuantScheme::name() const {
  switch (kind) {
    case Kind::PerTensor:
      return "per-tensor";
    case Kind::PerToken:
      return "per-token";
    case Kind::PerChannel:
      return "per-channel";
    case Kind::PerBlock:
      return "per-block";
  }
  return "?";
}

QuantScheme QuantScheme::parse(const std::string& name, std::size_t block) {
  if (name == "per-tensor") return per_tensor();
  if (name == "per-token") return per_token();
  if (name == "per-channel") return per_channel();
  if (name == "per-block") {
    if (block == 0) throw ConfigError("per-block scheme needs a positive block size");
    return per_block(block);
  }
  throw ConfigError("unknown quantization scheme '" + name + "'");
}

}  // namespace jqt
