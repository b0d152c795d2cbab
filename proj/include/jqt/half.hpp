#pragma once

// Software binary16 storage emulation. Only conversion is provided: scales
// are stored on the binary16 grid and all arithmetic on them is float.

#include <bit>
#include <cmath>
#include <cstdint>

namespace jqt::half {

/// float -> binary16 bit pattern, round to nearest, ties to even.
/// Values at or beyond 65520 become infinity, NaN stays NaN.
inline std::uint16_t from_float(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t abs = x & 0x7fffffffu;
  if (abs >= 0x7f800000u) {
    return static_cast<std::uint16_t>(sign | (abs > 0x7f800000u ? 0x7e00u : 0x7c00u));
  }
  if (abs >= 0x477ff000u) {
    return static_cast<std::uint16_t>(sign | 0x7c00u);
  }
  if (abs < 0x38800000u) {
    // Subnormal range: the result is m * 2^-24. Scaling by 2^24 is exact.
    const float a = std::bit_cast<float>(abs);
    const auto m = static_cast<std::uint32_t>(std::nearbyint(a * 16777216.0f));
    return static_cast<std::uint16_t>(sign | m);
  }
  const std::uint32_t exp = (abs >> 23) - 127 + 15;
  const std::uint32_t mant = abs & 0x7fffffu;
  std::uint32_t h = (exp << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
    ++h;  // may carry into the exponent, which is the correct result
  }
  return static_cast<std::uint16_t>(sign | h);
}

inline float to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float v = static_cast<float>(mant) * 5.9604644775390625e-08f;  // 2^-24
    return sign ? -v : v;
  }
  if (exp == 31) {
    return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  }
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

/// Nearest binary16-representable value.
inline float round(float f) { return to_float(from_float(f)); }

inline bool is_representable(float f) { return std::isnan(f) || round(f) == f; }

constexpr float kMax = 65504.0f;

}  // namespace jqt::half
