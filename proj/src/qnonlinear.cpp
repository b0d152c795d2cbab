#include "jqt/qnonlinear.hpp"

#include <algorithm>
#include <bit>

#include "jqt/error.hpp"
#include "jqt/half.hpp"
#include "jqt/parallel.hpp"
#include "jqt/quantize.hpp"

namespace jqt {

namespace {

struct TileGrid {
  std::size_t tile_rows, tile_cols, count_r, count_c;
};

std::size_t round_up(std::size_t v, std::size_t m) { return (std::max<std::size_t>(v, 1) + m - 1) / m * m; }

TileGrid make_grid(std::size_t rows, std::size_t cols, BlockShape b, const NonlinearConfig& cfg) {
  const std::size_t tr = std::min(round_up(cfg.tile_rows, b.rows), rows);
  const std::size_t tc = std::min(round_up(cfg.tile_cols, b.cols), cols);
  return {tr, tc, (rows + tr - 1) / tr, (cols + tc - 1) / tc};
}

void charge(AccessCounters* ctr, const NonlinearConfig& cfg, std::size_t inputs,
            std::size_t elems, bool requantizes = true) {
  if (ctr == nullptr) return;
  ctr->reset();
  const std::uint64_t traffic = static_cast<std::uint64_t>(inputs + 1) * elems;
  if (cfg.mode == ExecMode::Int8DataFlow) {
    ctr->int8_load_store += traffic;
    if (requantizes) {
      ctr->dequant_ops += static_cast<std::uint64_t>(inputs) * elems;
      ctr->quant_ops += elems;
    }
  } else {
    ctr->fp16_load_store += traffic;
  }
}

void require_same(const BlockQuantTensor& a, const BlockQuantTensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || !(a.block_shape() == b.block_shape())) {
    throw DimensionError(std::string(op) + ": operand shapes or blockings differ");
  }
}

// Tile body: (row0, col0, height, width, dequantized inputs, output buffer).
using TileFn = std::function<void(std::size_t, std::size_t, std::size_t, std::size_t,
                                  const std::vector<std::vector<float>>&, std::vector<float>&)>;

// Dequantize -> f -> requantize over independent tiles. Blocks never straddle
// tiles, so the output is the same for any tile partition.
BlockQuantTensor map_tiles(const std::vector<const BlockQuantTensor*>& ins,
                           const NonlinearConfig& cfg, const TileFn& fn) {
  const BlockQuantTensor& x0 = *ins.front();
  const BlockShape b = x0.block_shape();
  const std::size_t rows = x0.rows();
  const std::size_t cols = x0.cols();
  const TileGrid g = make_grid(rows, cols, b, cfg);
  const std::size_t lc = x0.scale_cols();
  std::vector<std::int8_t> values(rows * cols);
  std::vector<float> scales(x0.scale_rows() * lc);

  parallel_for(g.count_r * g.count_c, [&](std::size_t task, int) {
    const std::size_t r0 = (task / g.count_c) * g.tile_rows;
    const std::size_t c0 = (task % g.count_c) * g.tile_cols;
    const std::size_t h = std::min(g.tile_rows, rows - r0);
    const std::size_t w = std::min(g.tile_cols, cols - c0);
    std::vector<std::vector<float>> bufs(ins.size(), std::vector<float>(h * w));
    for (std::size_t i = 0; i < ins.size(); ++i) {
      const BlockQuantTensor& t = *ins[i];
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          bufs[i][r * w + c] = static_cast<float>(t.value(r0 + r, c0 + c)) * t.scale_of(r0 + r, c0 + c);
        }
      }
    }
    std::vector<float> out(h * w);
    fn(r0, c0, h, w, bufs, out);
    for (std::size_t br = 0; br < h / b.rows; ++br) {
      for (std::size_t bc = 0; bc < w / b.cols; ++bc) {
        const std::size_t gr = r0 + br * b.rows;
        const std::size_t gc = c0 + bc * b.cols;
        scales[(gr / b.rows) * lc + gc / b.cols] =
            quantize_group(out.data() + br * b.rows * w + bc * b.cols, w, b.rows, b.cols,
                           values.data() + gr * cols + gc, cols);
      }
    }
  });
  return {rows, cols, b, std::move(values), std::move(scales)};
}

BlockQuantTensor apply_mask(const BlockQuantTensor& x, const DropoutState& st) {
  if (!(st.p >= 0.0f && st.p < 1.0f)) throw DomainError("dropout: p must lie in [0, 1)");
  if (st.rows != x.rows() || st.cols != x.cols() || st.mask.size() < (x.size() + 63) / 64) {
    throw DimensionError("dropout: state shape does not match the tensor");
  }
  std::vector<std::int8_t> values(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (!st.keep(r, c)) values[r * x.cols() + c] = 0;
    }
  }
  const float factor = 1.0f / (1.0f - st.p);
  std::vector<float> scales(x.scales().begin(), x.scales().end());
  for (float& s : scales) {
    s = half::round(s * factor);
    if (!std::isfinite(s)) throw DomainError("dropout: rescaled scale exceeds binary16 range");
  }
  return {x.rows(), x.cols(), x.block_shape(), std::move(values), std::move(scales)};
}

}  // namespace

double RowStats::row_mean(std::size_t r) const {
  double m = 0.0;
  for (std::size_t j = 0; j < segments; ++j) m += mean[r * segments + j];
  return m / static_cast<double>(segments);
}

double RowStats::row_variance(std::size_t r) const {
  double sq = 0.0;
  for (std::size_t j = 0; j < segments; ++j) sq += sumsq[r * segments + j];
  const double m = row_mean(r);
  return std::max(0.0, sq / static_cast<double>(segments * width) - m * m);
}

namespace kernels {

double dropout_uniform(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over a Weyl sequence keyed by the seed
  std::uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

}  // namespace kernels

DropoutState DropoutState::make(float p, std::uint64_t seed, std::size_t rows, std::size_t cols) {
  if (!(p >= 0.0f && p < 1.0f)) throw DomainError("dropout: p must lie in [0, 1)");
  DropoutState st{p, seed, rows, cols, std::vector<std::uint64_t>((rows * cols + 63) / 64, 0)};
  for (std::size_t i = 0; i < rows * cols; ++i) {
    if (kernels::dropout_uniform(seed, i) >= static_cast<double>(p)) {
      st.mask[i >> 6] |= std::uint64_t{1} << (i & 63);
    }
  }
  return st;
}

std::size_t DropoutState::kept() const {
  std::size_t n = 0;
  for (std::uint64_t w : mask) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

BlockQuantTensor gelu_forward(const BlockQuantTensor& x, const NonlinearConfig& cfg,
                              AccessCounters* counters) {
  auto y = map_tiles({&x}, cfg, [](std::size_t, std::size_t, std::size_t h, std::size_t w,
                                   const auto& in, auto& out) {
    for (std::size_t i = 0; i < h * w; ++i) out[i] = kernels::gelu(in[0][i]);
  });
  charge(counters, cfg, 1, x.size());
  return y;
}

BlockQuantTensor gelu_backward(const BlockQuantTensor& x, const BlockQuantTensor& dy,
                               const NonlinearConfig& cfg, AccessCounters* counters) {
  require_same(x, dy, "gelu_backward");
  auto dx = map_tiles({&dy, &x}, cfg, [](std::size_t, std::size_t, std::size_t h, std::size_t w,
                                         const auto& in, auto& out) {
    for (std::size_t i = 0; i < h * w; ++i) out[i] = in[0][i] * kernels::gelu_grad(in[1][i]);
  });
  charge(counters, cfg, 2, x.size());
  return dx;
}

BlockQuantTensor dropout_forward(const BlockQuantTensor& x, const DropoutState& state,
                                 const NonlinearConfig& cfg, AccessCounters* counters) {
  auto y = apply_mask(x, state);
  charge(counters, cfg, 1, x.size(), false);
  return y;
}

BlockQuantTensor dropout_backward(const BlockQuantTensor& dy, const DropoutState& state,
                                  const NonlinearConfig& cfg, AccessCounters* counters) {
  auto dx = apply_mask(dy, state);
  charge(counters, cfg, 1, dy.size(), false);
  return dx;
}

std::size_t stats_width(std::size_t cols, BlockShape block, const NonlinearConfig& cfg) {
  const std::size_t cap = std::max(cfg.tile_cols, block.cols);
  for (std::size_t k = cap / block.cols; k >= 1; --k) {
    const std::size_t w = k * block.cols;
    if (cols % w == 0) return w;
  }
  return block.cols;
}

RowStats compute_row_stats(const DenseTensor& y, std::size_t width) {
  if (width == 0 || y.cols() % width != 0) throw DimensionError("row stats: width must divide cols");
  RowStats st{y.rows(), y.cols() / width, width, {}, {}};
  st.mean.assign(st.rows * st.segments, 0.0);
  st.sumsq.assign(st.rows * st.segments, 0.0);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t j = 0; j < st.segments; ++j) {
      double s = 0.0, sq = 0.0;
      for (std::size_t c = j * width; c < (j + 1) * width; ++c) {
        const double v = y(r, c);
        s += v;
        sq += v * v;
      }
      st.mean[r * st.segments + j] = s / static_cast<double>(width);
      st.sumsq[r * st.segments + j] = sq;
    }
  }
  return st;
}

std::pair<BlockQuantTensor, RowStats> add_forward(const BlockQuantTensor& x1,
                                                  const BlockQuantTensor& x2,
                                                  const NonlinearConfig& cfg,
                                                  AccessCounters* counters) {
  require_same(x1, x2, "add_forward");
  const std::size_t width = stats_width(x1.cols(), x1.block_shape(), cfg);
  NonlinearConfig tiles = cfg;
  tiles.tile_cols = width;
  RowStats st{x1.rows(), x1.cols() / width, width, {}, {}};
  st.mean.assign(st.rows * st.segments, 0.0);
  st.sumsq.assign(st.rows * st.segments, 0.0);
  auto y = map_tiles({&x1, &x2}, tiles, [&](std::size_t r0, std::size_t c0, std::size_t h,
                                            std::size_t w, const auto& in, auto& out) {
    const std::size_t seg = c0 / width;
    for (std::size_t r = 0; r < h; ++r) {
      double s = 0.0, sq = 0.0;
      for (std::size_t c = 0; c < w; ++c) {
        const float v = in[0][r * w + c] + in[1][r * w + c];
        out[r * w + c] = v;
        s += v;
        sq += static_cast<double>(v) * v;
      }
      st.mean[(r0 + r) * st.segments + seg] = s / static_cast<double>(width);
      st.sumsq[(r0 + r) * st.segments + seg] = sq;
    }
  });
  charge(counters, cfg, 2, x1.size());
  return {std::move(y), std::move(st)};
}

std::pair<BlockQuantTensor, LayerNormContext> layernorm_forward(const BlockQuantTensor& x,
                                                                const RowStats& stats,
                                                                const NormParams& params,
                                                                const NonlinearConfig& cfg,
                                                                AccessCounters* counters) {
  if (stats.rows != x.rows() || stats.segments * stats.width != x.cols() || stats.segments == 0) {
    throw StateError("layernorm_forward: row stats do not describe this tensor");
  }
  if (params.gamma.size() != x.cols() || params.beta.size() != x.cols()) {
    throw DimensionError("layernorm_forward: gamma/beta length != cols");
  }
  if (!(params.eps > 0.0f)) throw ConfigError("layernorm: eps must be positive");
  LayerNormContext ctx{x, std::vector<float>(x.rows()), std::vector<float>(x.rows()), true};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double var = stats.row_variance(r);
    ctx.mean[r] = static_cast<float>(stats.row_mean(r));
    ctx.rstd[r] = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(params.eps)));
  }
  NonlinearConfig rows_cfg = cfg;
  rows_cfg.tile_cols = x.cols();
  auto y = map_tiles({&x}, rows_cfg, [&](std::size_t r0, std::size_t, std::size_t h,
                                         std::size_t w, const auto& in, auto& out) {
    for (std::size_t r = 0; r < h; ++r) {
      kernels::layernorm_apply<float>({in[0].data() + r * w, w}, params.gamma, params.beta,
                                      ctx.mean[r0 + r], ctx.rstd[r0 + r], {out.data() + r * w, w});
    }
  });
  charge(counters, cfg, 1, x.size());
  return {std::move(y), std::move(ctx)};
}

LayerNormGrads layernorm_backward(const LayerNormContext& ctx, const BlockQuantTensor& dy,
                                  const NormParams& params, const NonlinearConfig& cfg,
                                  AccessCounters* counters) {
  if (!ctx.valid) throw StateError("layernorm_backward: no forward context");
  if (ctx.input.rows() != dy.rows() || ctx.input.cols() != dy.cols() ||
      ctx.mean.size() != dy.rows()) {
    throw StateError("layernorm_backward: context is stale for this gradient");
  }
  const std::size_t cols = dy.cols();
  NonlinearConfig rows_cfg = cfg;
  rows_cfg.tile_cols = cols;
  const TileGrid g = make_grid(dy.rows(), cols, dy.block_shape(), rows_cfg);
  // per-tile partial parameter grads, reduced in tile order afterwards
  std::vector<std::vector<float>> part_g(g.count_r, std::vector<float>(cols, 0.0f));
  std::vector<std::vector<float>> part_b(g.count_r, std::vector<float>(cols, 0.0f));
  auto dx = map_tiles({&dy, &ctx.input}, rows_cfg,
                      [&](std::size_t r0, std::size_t, std::size_t h, std::size_t w,
                          const auto& in, auto& out) {
                        auto& pg = part_g[r0 / g.tile_rows];
                        auto& pb = part_b[r0 / g.tile_rows];
                        for (std::size_t r = 0; r < h; ++r) {
                          kernels::layernorm_row_backward<float>(
                              {in[1].data() + r * w, w}, {in[0].data() + r * w, w}, params.gamma,
                              ctx.mean[r0 + r], ctx.rstd[r0 + r], {out.data() + r * w, w}, pg, pb);
                        }
                      });
  LayerNormGrads grads{std::move(dx), std::vector<float>(cols, 0.0f), std::vector<float>(cols, 0.0f)};
  for (std::size_t t = 0; t < g.count_r; ++t) {
    for (std::size_t c = 0; c < cols; ++c) {
      grads.dgamma[c] += part_g[t][c];
      grads.dbeta[c] += part_b[t][c];
    }
  }
  charge(counters, cfg, 2, dy.size());
  return grads;
}

}  // namespace jqt
