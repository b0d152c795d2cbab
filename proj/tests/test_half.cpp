#include "jqt/half.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace jqt {
namespace {

// Independent decode: sign * 2^(e-15) * (1 + m/1024), subnormals 2^-14 * m/1024.
double decode_reference(std::uint16_t h) {
  const int sign = (h & 0x8000) ? -1 : 1;
  const int e = (h >> 10) & 0x1f;
  const int m = h & 0x3ff;
  if (e == 0) return sign * std::ldexp(static_cast<double>(m) / 1024.0, -14);
  return sign * std::ldexp(1.0 + static_cast<double>(m) / 1024.0, e - 15);
}

TEST(Half, KnownPatterns) {
  EXPECT_EQ(half::from_float(1.0f), 0x3C00);
  EXPECT_EQ(half::from_float(-2.0f), 0xC000);
  EXPECT_EQ(half::from_float(65504.0f), 0x7BFF);
  EXPECT_EQ(half::from_float(65519.0f), 0x7BFF);
  EXPECT_EQ(half::from_float(65520.0f), 0x7C00);
  EXPECT_EQ(half::from_float(std::ldexp(1.0f, -24)), 0x0001);
  EXPECT_EQ(half::from_float(std::ldexp(1.0f, -25)), 0x0000);  // tie to even (zero)
  EXPECT_EQ(half::from_float(0.1f), 0x2E66);
  EXPECT_TRUE(std::isnan(half::to_float(half::from_float(NAN))));
}

TEST(Half, DecodeMatchesReferenceForEveryFinitePattern) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const auto bits = static_cast<std::uint16_t>(h);
    if (((bits >> 10) & 0x1f) == 0x1f) continue;
    const double ref = decode_reference(bits);
    ASSERT_EQ(static_cast<double>(half::to_float(bits)), ref) << std::hex << h;
    if (ref != 0.0) {
      ASSERT_EQ(half::from_float(static_cast<float>(ref)), bits) << std::hex << h;
    }
  }
}

TEST(Half, RoundsToNearestTiesToEven) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> expo(-26.0, 15.9);
  for (int i = 0; i < 200000; ++i) {
    const float f = static_cast<float>(std::exp2(expo(rng)) * (1.0 + 0.001 * (i % 7)));
    const std::uint16_t h = half::from_float(f);
    const double got = decode_reference(h);
    const double up = decode_reference(static_cast<std::uint16_t>(h + 1));
    const double down = h == 0 ? 0.0 : decode_reference(static_cast<std::uint16_t>(h - 1));
    const double err = std::fabs(got - f);
    ASSERT_LE(err, std::fabs(up - f)) << f;
    ASSERT_LE(err, std::fabs(down - f)) << f;
    const bool tie = err == std::fabs(up - f) || (h > 0 && err == std::fabs(down - f));
    if (tie) {
      ASSERT_EQ(h & 1, 0) << "tie must go to even, f=" << f;
    }
  }
}

}  // namespace
}  // namespace jqt
