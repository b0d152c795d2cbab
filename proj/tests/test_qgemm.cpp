#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "jqt/error.hpp"
#include "jqt/parallel.hpp"
#include "jqt/qgemm.hpp"
#include "test_util.hpp"

namespace jqt {
namespace {

using testing::dense_product;
using testing::normwise_rel_error;
using testing::random_bqt;

Int8Tile16 random_tile(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-127, 127);
  Int8Tile16 t{};
  for (auto& v : t) v = static_cast<std::int8_t>(d(rng));
  return t;
}

BlockQuantTensor identity_weight(std::size_t n, std::size_t block) {
  DenseTensor eye(n, n);
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0f;
  return quantize_per_block(eye, block);
}

TEST(MicroKernel, IdentityLeftOperand) {
  std::mt19937_64 rng(1);
  Int8Tile16 eye{};
  for (int i = 0; i < 16; ++i) eye[i * 16 + i] = 1;
  const Int8Tile16 b = random_tile(rng);
  const Int32Tile16 c = micro_mm_16(eye, b);
  for (int i = 0; i < 256; ++i) EXPECT_EQ(c[i], b[i]);
}

TEST(MicroKernel, SaturatedInputsClosedForm) {
  Int8Tile16 a;
  a.fill(127);
  const Int32Tile16 c = micro_mm_16(a, a);
  for (auto v : c) EXPECT_EQ(v, 258064);  // 16 * 127^2
  Int8Tile16 n;
  n.fill(-127);
  for (auto v : micro_mm_16(a, n)) EXPECT_EQ(v, -258064);
}

TEST(MicroKernel, MatchesInt64BruteForce) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const Int8Tile16 a = random_tile(rng);
    const Int8Tile16 b = random_tile(rng);
    const Int32Tile16 c = micro_mm_16(a, b);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        std::int64_t ref = 0;
        for (int k = 0; k < 16; ++k) ref += std::int64_t{a[i * 16 + k]} * b[k * 16 + j];
        ASSERT_EQ(c[i * 16 + j], ref);
      }
    }
  }
}

TEST(BlockMmForward, IdentityWeightReproducesInput) {
  const auto xq = quantize_per_block(testing::gaussian(64, 96, 3), 32);
  const auto y = block_mm_forward(xq, identity_weight(96, 32), TileConfig::defaults());
  EXPECT_EQ(y, quantize_per_block(dequantize(xq), 32));
  EXPECT_EQ(y, xq);
}

TEST(BlockMmForward, UnitScaleIntegerOracleIsExact) {
  const auto xq = random_bqt(64, 64, 32, 10, true);
  const auto wq = random_bqt(64, 64, 32, 11, true);
  const DenseTensor acc = mm_forward_accum(xq, wq, TileConfig::defaults());
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t j = 0; j < 64; ++j) {
      std::int64_t ref = 0;
      for (std::size_t k = 0; k < 64; ++k) ref += std::int64_t{xq.value(i, k)} * wq.value(j, k);
      ASSERT_EQ(acc(i, j), static_cast<float>(ref));
    }
  }
}

TEST(BlockMmForward, BiasIsAddedBeforeQuantization) {
  const auto xq = random_bqt(64, 32, 32, 4);
  const auto wq = random_bqt(32, 32, 32, 5);
  std::vector<float> bias(32);
  for (std::size_t i = 0; i < 32; ++i) bias[i] = 0.1f * static_cast<float>(i) - 1.0f;
  DenseTensor acc = mm_forward_accum(xq, wq, TileConfig::defaults());
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 32; ++c) acc(r, c) += bias[c];
  EXPECT_EQ(block_mm_forward(xq, wq, TileConfig::defaults(), ExecMode::Int8DataFlow, nullptr, bias),
            quantize_per_block(acc, 32));
}

TEST(BlockMmGradInput, ZeroAndIdentity) {
  const auto w = random_bqt(64, 96, 32, 6);
  const auto dx = block_mm_grad_input(BlockQuantTensor::zeros(32, 64, {32, 32}), w, TileConfig::defaults());
  EXPECT_EQ(dx, BlockQuantTensor::zeros(32, 96, {32, 32}));
  const auto dyq = quantize_per_block(testing::gaussian(64, 64, 7), 32);
  EXPECT_EQ(block_mm_grad_input(dyq, identity_weight(64, 32), TileConfig::defaults()),
            quantize_per_block(dequantize(dyq), 32));
}

TEST(BlockMmGradWeight, ZeroGradient) {
  const auto x = random_bqt(64, 96, 32, 8);
  EXPECT_EQ(block_mm_grad_weight(BlockQuantTensor::zeros(64, 32, {32, 32}), x, TileConfig::defaults()),
            BlockQuantTensor::zeros(32, 96, {32, 32}));
}

TEST(BlockMmGradWeight, SingleTokenBlockMatchesScaledOuterProducts) {
  const auto dy = random_bqt(32, 64, 32, 12);
  const auto x = random_bqt(32, 96, 32, 13);
  const DenseTensor acc = mm_grad_weight_accum(dy, x, TileConfig::defaults());
  for (std::size_t d = 0; d < 64; ++d) {
    for (std::size_t c = 0; c < 96; ++c) {
      std::int64_t dot = 0;
      for (std::size_t n = 0; n < 32; ++n) dot += std::int64_t{dy.value(n, d)} * x.value(n, c);
      const float expect = dy.scale(0, d / 32) * static_cast<float>(dot) * x.scale(0, c / 32);
      ASSERT_EQ(acc(d, c), expect);
    }
  }
}

TEST(BlockMm, AllThreeMatchDenseOracle) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> dim(1, 6);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 32 * dim(rng), c = 32 * dim(rng), d = 32 * dim(rng);
    const auto x = random_bqt(n, c, 32, rng());
    const auto w = random_bqt(d, c, 32, rng());
    const auto dy = random_bqt(n, d, 32, rng());
    const DenseTensor xf = dequantize(x), wf = dequantize(w), dyf = dequantize(dy);
    std::size_t m = 0, k = 0;
    const TileConfig cfg = TileConfig::defaults();
    EXPECT_LE(normwise_rel_error(mm_forward_accum(x, w, cfg), dense_product(xf, false, wf, true, m, k)), 1e-6);
    EXPECT_LE(normwise_rel_error(mm_grad_input_accum(dy, w, cfg), dense_product(dyf, false, wf, false, m, k)), 1e-6);
    EXPECT_LE(normwise_rel_error(mm_grad_weight_accum(dy, x, cfg), dense_product(dyf, true, xf, false, m, k)), 1e-6);
  }
}

TEST(BlockMm, TilingAndThreadTransparency) {
  const auto x = random_bqt(160, 96, 32, 31);
  const auto w = random_bqt(224, 96, 32, 32);
  const auto dy = random_bqt(160, 224, 32, 33);
  const std::vector<TileConfig> cfgs = {{128, 32, 128, 32}, {64, 32, 64, 32}, {32, 32, 32, 32}, {96, 32, 64, 32}};
  set_num_threads(1);
  const auto y0 = block_mm_forward(x, w, cfgs[0]);
  const auto gi0 = mm_grad_input_accum(dy, w, cfgs[0]);
  const auto gw0 = mm_grad_weight_accum(dy, x, cfgs[0]);
  for (int threads : {1, 3, 8}) {
    set_num_threads(threads);
    for (const auto& cfg : cfgs) {
      EXPECT_EQ(block_mm_forward(x, w, cfg), y0);
      EXPECT_EQ(mm_grad_input_accum(dy, w, cfg), gi0);
      EXPECT_EQ(mm_grad_weight_accum(dy, x, cfg), gw0);
    }
  }
  set_num_threads(1);
}

TEST(BlockMmCounters, SingleTileMatchesTableFormulas) {
  const std::size_t c = 96;
  const auto x = random_bqt(128, c, 32, 40);
  const auto w = random_bqt(128, c, 32, 41);
  AccessCounters ctr;
  block_mm_forward(x, w, TileConfig::defaults(), ExecMode::Int8DataFlow, &ctr);
  EXPECT_EQ(ctr.int8_load_store, (128u + 128u) * c + 128u * 128u);
  EXPECT_EQ(ctr.dequant_ops, 128u * 128u * (c / 32));
  EXPECT_EQ(ctr.quant_ops, 128u * 128u);
  EXPECT_EQ(ctr.int_mac, 128u * 128u * c);
  EXPECT_EQ(ctr.fp16_load_store, 0u);

  block_mm_forward(x, w, TileConfig::defaults(), ExecMode::QcdEmulation, &ctr);
  EXPECT_EQ(ctr.fp16_load_store, (128u + 128u) * c + 128u * 128u);
  EXPECT_EQ(ctr.int8_load_store, 0u);
  EXPECT_EQ(ctr.dequant_ops, 0u);
  EXPECT_EQ(ctr.quant_ops, 0u);
}

TEST(BlockMmCounters, ResetPerCallAndSummedOverTiles) {
  const auto x = random_bqt(256, 64, 32, 42);
  const auto w = random_bqt(384, 64, 32, 43);
  AccessCounters ctr;
  ctr.int_mac = 12345;
  block_mm_forward(x, w, TileConfig::defaults(), ExecMode::Int8DataFlow, &ctr);
  AccessCounters per_tile;
  per_tile.int8_load_store = (128 + 128) * 64 + 128 * 128;
  per_tile.dequant_ops = 128 * 128 * 2;
  per_tile.quant_ops = 128 * 128;
  per_tile.int_mac = 128 * 128 * 64;
  AccessCounters six;
  for (int i = 0; i < 6; ++i) six += per_tile;
  EXPECT_EQ(ctr, six);
  EXPECT_EQ(ctr, expected_counters(256, 64, 384, TileConfig::defaults(), ExecMode::Int8DataFlow));
}

TEST(BlockMm, QcdModeKeepsTheMath) {
  const auto x = random_bqt(64, 64, 32, 50);
  const auto w = random_bqt(96, 64, 32, 51);
  EXPECT_EQ(block_mm_forward(x, w, TileConfig::defaults(), ExecMode::QcdEmulation),
            block_mm_forward(x, w, TileConfig::defaults(), ExecMode::Int8DataFlow));
}

TEST(BlockMm, Errors) {
  const auto x = random_bqt(64, 64, 32, 1);
  const auto w = random_bqt(64, 96, 32, 2);
  EXPECT_THROW(block_mm_forward(x, w, TileConfig::defaults()), DimensionError);
  EXPECT_THROW(block_mm_forward(x, x, TileConfig{128, 64, 128, 32}), ConfigError);
  EXPECT_THROW(block_mm_forward(x, x, TileConfig{100, 32, 128, 32}), ConfigError);
  EXPECT_THROW(block_mm_forward(x, x, TileConfig{120, 24, 120, 24}), ConfigError);
  const auto x16 = random_bqt(64, 64, 16, 3);
  EXPECT_THROW(block_mm_forward(x16, x, TileConfig::defaults()), DimensionError);
  EXPECT_THROW(block_mm_grad_input(x, random_bqt(96, 64, 32, 5), TileConfig::defaults()), DimensionError);
  EXPECT_THROW(block_mm_grad_weight(random_bqt(32, 64, 32, 4), x, TileConfig::defaults()), DimensionError);
}

TEST(BlockMm, Block16And64) {
  for (std::size_t b : {16u, 64u}) {
    const auto x = random_bqt(128, 128, b, 60 + b);
    const auto w = random_bqt(64, 128, b, 61 + b);
    std::size_t m = 0, k = 0;
    EXPECT_LE(normwise_rel_error(mm_forward_accum(x, w, TileConfig::for_block(b)),
                                 dense_product(dequantize(x), false, dequantize(w), true, m, k)),
              1e-6);
  }
}

TEST(CounterCsv, FixedSchema) {
  std::ostringstream out;
  write_counter_header(out);
  AccessCounters k;
  k.int8_load_store = 1;
  k.fp16_load_store = 2;
  k.int_mac = 3;
  k.dequant_ops = 4;
  k.quant_ops = 5;
  write_counter_row(out, {"forward", 128, 64, 256, 32, ExecMode::QcdEmulation, k});
  EXPECT_EQ(out.str(),
            "op_name,N,C,D,B,mode,int8_ls,fp16_ls,int_mac,dequant,quant\n"
            "forward,128,64,256,32,qcd,1,2,3,4,5\n");
}

}  // namespace
}  // namespace jqt
