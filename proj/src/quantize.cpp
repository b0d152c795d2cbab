#include "jqt/quantize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "jqt/error.hpp"
#include "jqt/half.hpp"
#include "jqt/parallel.hpp"

namespace jqt {

float block_scale(float max_abs) {
  if (!std::isfinite(max_abs)) throw DomainError("quantize: non-finite input");
  if (max_abs == 0.0f) return 1.0f;
  const float exact = max_abs / 127.0f;
  std::uint16_t bits = half::from_float(exact);
  float s = half::to_float(bits);
  if (!std::isfinite(s)) throw DomainError("quantize: scale exceeds binary16 range");
  // Deep in the binary16 subnormal range nearest rounding can lose so much
  // that clamping at 127 would exceed half a step; step up one ulp instead.
  if (s < exact && 127.0f * (exact - s) > 0.5f * s) {
    s = half::to_float(static_cast<std::uint16_t>(bits + 1));
  }
  return s;
}

float quantize_group(const float* src, std::size_t ld, std::size_t rows, std::size_t cols,
                     std::int8_t* dst, std::size_t ld_dst) {
  float max_abs = 0.0f;
  bool finite = true;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = src + r * ld;
    for (std::size_t c = 0; c < cols; ++c) {
      const float a = std::fabs(row[c]);
      finite &= a <= std::numeric_limits<float>::max();
      max_abs = a > max_abs ? a : max_abs;
    }
  }
  if (!finite) throw DomainError("quantize: non-finite input");
  const float s = block_scale(max_abs);
  // Adding and subtracting 1.5 * 2^23 rounds half-to-even for |q| <= 2^22;
  // clamping first keeps q in range and commutes with rounding at +-127.
  const float magic = 12582912.0f;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = src + r * ld;
    std::int8_t* out = dst + r * ld_dst;
    for (std::size_t c = 0; c < cols; ++c) {
      float q = row[c] / s;
      q = q < -127.0f ? -127.0f : (q > 127.0f ? 127.0f : q);
      out[c] = static_cast<std::int8_t>(static_cast<int>((q + magic) - magic));
    }
  }
  return s;
}

BlockQuantTensor quantize_blocks(const DenseTensor& x, BlockShape shape) {
  if (shape.rows == 0 || shape.cols == 0 || x.rows() == 0 || x.cols() == 0 ||
      x.rows() % shape.rows != 0 || x.cols() % shape.cols != 0) {
    throw DimensionError("quantize: dims must be positive multiples of the block shape");
  }
  const std::size_t lr = x.rows() / shape.rows;
  const std::size_t lc = x.cols() / shape.cols;
  std::vector<std::int8_t> values(x.size());
  std::vector<float> scales(lr * lc);
  parallel_for(lr, [&](std::size_t i, int) {
    for (std::size_t j = 0; j < lc; ++j) {
      const std::size_t offset = i * shape.rows * x.cols() + j * shape.cols;
      scales[i * lc + j] = quantize_group(x.values().data() + offset, x.cols(), shape.rows,
                                          shape.cols, values.data() + offset, x.cols());
    }
  });
  return {x.rows(), x.cols(), shape, std::move(values), std::move(scales)};
}

BlockQuantTensor quantize_per_block(const DenseTensor& x, std::size_t block) {
  if (block == 0) throw DimensionError("quantize: block size must be positive");
  return quantize_blocks(x, {block, block});
}

BlockQuantTensor quantize_with_scheme(const DenseTensor& x, const QuantScheme& scheme) {
  return quantize_blocks(x, scheme.shape_for(x.rows(), x.cols()));
}

DenseTensor dequantize(const BlockQuantTensor& xq) {
  DenseTensor out(xq.rows(), xq.cols());
  const BlockShape b = xq.block_shape();
  const std::size_t cols = xq.cols();
  const std::int8_t* v = xq.values().data();
  float* o = out.values().data();
  for (std::size_t r = 0; r < xq.rows(); ++r) {
    for (std::size_t j = 0; j < xq.scale_cols(); ++j) {
      const float s = xq.scale(r / b.rows, j);
      const std::size_t c0 = j * b.cols;
      for (std::size_t c = c0; c < c0 + b.cols; ++c) {
        o[r * cols + c] = static_cast<float>(v[r * cols + c]) * s;
      }
    }
  }
  return out;
}

QuantError quantization_error(const DenseTensor& x, const QuantScheme& scheme) {
  const DenseTensor back = dequantize(quantize_with_scheme(x, scheme));
  double sq = 0.0;
  double ab = 0.0;
  const auto a = x.values();
  const auto b = back.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sq += d * d;
    ab += std::fabs(d);
  }
  const double n = static_cast<double>(a.size());
  return {sq / n, ab / n};
}

namespace {

constexpr std::array<char, 4> kMagic{'J', 'Q', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw DomainError("jqt: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_jqt(std::ostream& out, const BlockQuantTensor& t) {
  const std::size_t b = t.block();
  out.write(kMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(t.rows()));
  put_u32(out, static_cast<std::uint32_t>(t.cols()));
  put_u32(out, static_cast<std::uint32_t>(b));
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.values().size()));
  for (float s : t.scales()) {
    const std::uint16_t h = half::from_float(s);
    const std::array<char, 2> bytes{static_cast<char>(h & 0xff), static_cast<char>(h >> 8)};
    out.write(bytes.data(), 2);
  }
}

BlockQuantTensor read_jqt(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw DomainError("jqt: bad magic");
  const std::uint32_t rows = get_u32(in);
  const std::uint32_t cols = get_u32(in);
  const std::uint32_t block = get_u32(in);
  if (block == 0 || rows == 0 || cols == 0 || rows % block != 0 || cols % block != 0) {
    throw DimensionError("jqt: inconsistent header");
  }
  std::vector<std::int8_t> values(static_cast<std::size_t>(rows) * cols);
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size()))) {
    throw DomainError("jqt: truncated values");
  }
  std::vector<float> scales(static_cast<std::size_t>(rows / block) * (cols / block));
  for (float& s : scales) {
    std::array<unsigned char, 2> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 2)) throw DomainError("jqt: truncated scales");
    s = half::to_float(static_cast<std::uint16_t>(b[0] | (b[1] << 8)));
  }
  return {rows, cols, {block, block}, std::move(values), std::move(scales)};
}

void save_jqt(const std::string& path, const BlockQuantTensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("jqt: cannot open " + path + " for writing");
  write_jqt(out, t);
}

BlockQuantTensor load_jqt(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("jqt: cannot open " + path);
  return read_jqt(in);
}

}  // namespace jqt
