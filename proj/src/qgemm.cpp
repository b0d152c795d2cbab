#include "jqt/qgemm.hpp"

#include <algorithm>
#include <ostream>
#include <vector>

#include "jqt/error.hpp"
#include "jqt/parallel.hpp"
#include "jqt/quantize.hpp"

namespace jqt {

namespace {

constexpr std::size_t kFrag = 16;

inline void micro_kernel(const std::int8_t* a, std::size_t lda, const std::int8_t* b,
                         std::size_t ldb, std::int32_t* c, std::size_t ldc) {
  for (std::size_t i = 0; i < kFrag; ++i) {
    std::int32_t* crow = c + i * ldc;
    // local accumulator: int8 pointers may alias crow, which would force a
    // reload/store of the row on every k step
    std::int32_t acc[kFrag];
    for (std::size_t j = 0; j < kFrag; ++j) acc[j] = crow[j];
    for (std::size_t k = 0; k < kFrag; ++k) {
      const std::int16_t av = a[i * lda + k];
      const std::int8_t* brow = b + k * ldb;
      for (std::size_t j = 0; j < kFrag; ++j) {
        acc[j] += static_cast<std::int16_t>(av * brow[j]);
      }
    }
    for (std::size_t j = 0; j < kFrag; ++j) crow[j] = acc[j];
  }
}

// Logical M x K operand over block-quantized storage: element (i, k) lives at
// data[i * rs + k * cs], the scale of block (bi, bk) at scales[bi * srs + bk * scs].
struct OperandView {
  const std::int8_t* data;
  std::size_t rs, cs;
  const float* scales;
  std::size_t srs, scs;
};

OperandView direct(const BlockQuantTensor& t) {
  return {t.values().data(), t.cols(), 1, t.scales().data(), t.scale_cols(), 1};
}

OperandView transposed(const BlockQuantTensor& t) {
  return {t.values().data(), 1, t.cols(), t.scales().data(), 1, t.scale_cols()};
}

void add_tile_counters(AccessCounters& ctr, std::size_t bn, std::size_t bd, std::size_t k,
                       std::size_t block, ExecMode mode) {
  const std::uint64_t traffic = (bn + bd) * k + bn * bd;
  ctr.int_mac += static_cast<std::uint64_t>(bn) * bd * k;
  if (mode == ExecMode::Int8DataFlow) {
    ctr.int8_load_store += traffic;
    ctr.dequant_ops += static_cast<std::uint64_t>(bn) * bd * (k / block);
    ctr.quant_ops += static_cast<std::uint64_t>(bn) * bd;
  } else {
    ctr.fp16_load_store += traffic;
  }
}

void check_operand(const BlockQuantTensor& t, const TileConfig& cfg, const char* what) {
  if (!t.block_shape().square() || t.block_shape().rows != cfg.block) {
    throw DimensionError(std::string("qgemm: ") + what + " is not blocked with B = cfg.block");
  }
}

DenseTensor tiled_mm(const OperandView& a, const OperandView& b, std::size_t m, std::size_t k,
                     std::size_t n, const TileConfig& cfg, ExecMode mode,
                     AccessCounters* counters) {
  const std::size_t blk = cfg.block;
  const std::size_t tn = std::min(cfg.tile_n, m);
  const std::size_t td = std::min(cfg.tile_d, n);
  const std::size_t tiles_n = (m + tn - 1) / tn;
  const std::size_t tiles_d = (n + td - 1) / td;
  const std::size_t k_blocks = k / blk;
  const std::size_t frags = blk / kFrag;

  DenseTensor out(m, n);
  std::vector<AccessCounters> shards(static_cast<std::size_t>(std::max(1, workers_for(tiles_n * tiles_d))));

  parallel_for(tiles_n * tiles_d, [&](std::size_t task, int worker) {
    const std::size_t i0 = (task / tiles_d) * tn;
    const std::size_t j0 = (task % tiles_d) * td;
    const std::size_t bn = std::min(tn, m - i0);
    const std::size_t bd = std::min(td, n - j0);
    std::vector<float> acc(bn * bd, 0.0f);
    std::vector<std::int8_t> a_panel(bn * blk);
    std::vector<std::int8_t> b_panel(blk * bd);
    std::vector<std::int32_t> prod(blk * blk);

    for (std::size_t kb = 0; kb < k_blocks; ++kb) {
      for (std::size_t r = 0; r < bn; ++r) {
        for (std::size_t c = 0; c < blk; ++c) {
          a_panel[r * blk + c] = a.data[(i0 + r) * a.rs + (kb * blk + c) * a.cs];
        }
      }
      for (std::size_t r = 0; r < blk; ++r) {
        for (std::size_t c = 0; c < bd; ++c) {
          b_panel[r * bd + c] = b.data[(kb * blk + r) * b.rs + (j0 + c) * b.cs];
        }
      }
      for (std::size_t p = 0; p < bn / blk; ++p) {
        const float sa = a.scales[(i0 / blk + p) * a.srs + kb * a.scs];
        for (std::size_t q = 0; q < bd / blk; ++q) {
          const float sb = b.scales[kb * b.srs + (j0 / blk + q) * b.scs];
          std::fill(prod.begin(), prod.end(), 0);
          for (std::size_t mi = 0; mi < frags; ++mi) {
            for (std::size_t ni = 0; ni < frags; ++ni) {
              for (std::size_t ki = 0; ki < frags; ++ki) {
                micro_kernel(a_panel.data() + (p * blk + mi * kFrag) * blk + ki * kFrag, blk,
                             b_panel.data() + ki * kFrag * bd + q * blk + ni * kFrag, bd,
                             prod.data() + mi * kFrag * blk + ni * kFrag, blk);
              }
            }
          }
          for (std::size_t r = 0; r < blk; ++r) {
            float* arow = acc.data() + (p * blk + r) * bd + q * blk;
            const std::int32_t* prow = prod.data() + r * blk;
            for (std::size_t c = 0; c < blk; ++c) {
              arow[c] += sa * static_cast<float>(prow[c]) * sb;
            }
          }
        }
      }
    }
    for (std::size_t r = 0; r < bn; ++r) {
      std::copy_n(acc.data() + r * bd, bd, out.values().data() + (i0 + r) * n + j0);
    }
    add_tile_counters(shards[static_cast<std::size_t>(worker)], bn, bd, k, blk, mode);
  });

  if (counters != nullptr) {
    counters->reset();
    for (const auto& s : shards) *counters += s;
  }
  return out;
}

BlockQuantTensor requantize(DenseTensor acc, std::size_t block, std::span<const float> bias) {
  if (!bias.empty()) {
    if (bias.size() != acc.cols()) throw DimensionError("qgemm: bias length != output cols");
    for (std::size_t r = 0; r < acc.rows(); ++r) {
      auto row = acc.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
  }
  return quantize_per_block(acc, block);
}

}  // namespace

void TileConfig::validate() const {
  if (block == 0 || block % 16 != 0) throw ConfigError("TileConfig: B must be a positive multiple of 16");
  if (tile_c != block) throw ConfigError("TileConfig: B_C must equal B");
  if (tile_n == 0 || tile_n % block != 0 || tile_d == 0 || tile_d % block != 0) {
    throw ConfigError("TileConfig: B_N and B_D must be positive multiples of B");
  }
}

AccessCounters& AccessCounters::operator+=(const AccessCounters& o) {
  int8_load_store += o.int8_load_store;
  fp16_load_store += o.fp16_load_store;
  int_mac += o.int_mac;
  dequant_ops += o.dequant_ops;
  quant_ops += o.quant_ops;
  return *this;
}

std::string to_string(ExecMode m) { return m == ExecMode::Int8DataFlow ? "int8" : "qcd"; }

ExecMode parse_exec_mode(const std::string& s) {
  if (s == "int8") return ExecMode::Int8DataFlow;
  if (s == "qcd") return ExecMode::QcdEmulation;
  throw ConfigError("unknown mode '" + s + "' (expected int8 or qcd)");
}

void micro_mm_16_acc(const std::int8_t* a, std::size_t lda, const std::int8_t* b,
                     std::size_t ldb, std::int32_t* c, std::size_t ldc) {
  micro_kernel(a, lda, b, ldb, c, ldc);
}

Int32Tile16 micro_mm_16(const Int8Tile16& a, const Int8Tile16& bt) {
  Int32Tile16 c{};
  micro_kernel(a.data(), kFrag, bt.data(), kFrag, c.data(), kFrag);
  return c;
}

DenseTensor mm_forward_accum(const BlockQuantTensor& x, const BlockQuantTensor& w,
                             const TileConfig& cfg, ExecMode mode, AccessCounters* counters) {
  cfg.validate();
  check_operand(x, cfg, "X");
  check_operand(w, cfg, "W");
  if (x.cols() != w.cols()) throw DimensionError("qgemm forward: X and W inner dims differ");
  return tiled_mm(direct(x), transposed(w), x.rows(), x.cols(), w.rows(), cfg, mode, counters);
}

DenseTensor mm_grad_input_accum(const BlockQuantTensor& dy, const BlockQuantTensor& w,
                                const TileConfig& cfg, ExecMode mode,
                                AccessCounters* counters) {
  cfg.validate();
  check_operand(dy, cfg, "dY");
  check_operand(w, cfg, "W");
  if (dy.cols() != w.rows()) throw DimensionError("qgemm grad_input: dY cols != W rows");
  return tiled_mm(direct(dy), direct(w), dy.rows(), dy.cols(), w.cols(), cfg, mode, counters);
}

DenseTensor mm_grad_weight_accum(const BlockQuantTensor& dy, const BlockQuantTensor& x,
                                 const TileConfig& cfg, ExecMode mode,
                                 AccessCounters* counters) {
  cfg.validate();
  check_operand(dy, cfg, "dY");
  check_operand(x, cfg, "X");
  if (dy.rows() != x.rows()) throw DimensionError("qgemm grad_weight: dY rows != X rows");
  return tiled_mm(transposed(dy), direct(x), dy.cols(), dy.rows(), x.cols(), cfg, mode, counters);
}

BlockQuantTensor block_mm_forward(const BlockQuantTensor& x, const BlockQuantTensor& w,
                                  const TileConfig& cfg, ExecMode mode, AccessCounters* counters,
                                  std::span<const float> bias) {
  return requantize(mm_forward_accum(x, w, cfg, mode, counters), cfg.block, bias);
}

BlockQuantTensor block_mm_grad_input(const BlockQuantTensor& dy, const BlockQuantTensor& w,
                                     const TileConfig& cfg, ExecMode mode,
                                     AccessCounters* counters) {
  return requantize(mm_grad_input_accum(dy, w, cfg, mode, counters), cfg.block, {});
}

BlockQuantTensor block_mm_grad_weight(const BlockQuantTensor& dy, const BlockQuantTensor& x,
                                      const TileConfig& cfg, ExecMode mode,
                                      AccessCounters* counters) {
  return requantize(mm_grad_weight_accum(dy, x, cfg, mode, counters), cfg.block, {});
}

AccessCounters expected_counters(std::size_t m, std::size_t k, std::size_t n,
                                 const TileConfig& cfg, ExecMode mode) {
  cfg.validate();
  AccessCounters total;
  const std::size_t tn = std::min(cfg.tile_n, m);
  const std::size_t td = std::min(cfg.tile_d, n);
  for (std::size_t i0 = 0; i0 < m; i0 += tn) {
    for (std::size_t j0 = 0; j0 < n; j0 += td) {
      add_tile_counters(total, std::min(tn, m - i0), std::min(td, n - j0), k, cfg.block, mode);
    }
  }
  return total;
}

void write_counter_header(std::ostream& out) {
  out << "op_name,N,C,D,B,mode,int8_ls,fp16_ls,int_mac,dequant,quant\n";
}

void write_counter_row(std::ostream& out, const CounterRecord& rec) {
  const auto& k = rec.counters;
  out << rec.op_name << ',' << rec.n << ',' << rec.c << ',' << rec.d << ',' << rec.block << ','
      << to_string(rec.mode) << ',' << k.int8_load_store << ',' << k.fp16_load_store << ','
      << k.int_mac << ',' << k.dequant_ops << ',' << k.quant_ops << '\n';
}

}  // namespace jqt
