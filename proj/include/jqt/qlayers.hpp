#pragma once

// Quantized linear layers, the FP32 attention core and a pre-norm transformer
// block / small language model built on top of them.
//
// Layers are templated on an operator policy:
//   Int8Ops   tensors are BlockQuantTensor; per-block schemes run the tiled
//             integer GEMM, other schemes dequantize, multiply in FP32 and
//             requantize with the scheme's grouping
//   FloatOps  tensors are DenseTensor, everything in FP32

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jqt/qgemm.hpp"
#include "jqt/qnonlinear.hpp"
#include "jqt/tensor.hpp"

namespace jqt {

/// C = op(A) * op(B) in FP32 with k-ascending accumulation.
DenseTensor dense_matmul(const DenseTensor& a, bool trans_a, const DenseTensor& b, bool trans_b);

/// Column sums of a dense matrix.
std::vector<float> column_sums(const DenseTensor& x);

struct FloatNormContext {
  DenseTensor input;
  std::vector<float> mean;
  std::vector<float> rstd;
  bool valid = false;
};

struct Int8Ops {
  using Tensor = BlockQuantTensor;
  using NormContext = LayerNormContext;

  QuantScheme scheme = QuantScheme::per_block(32);
  TileConfig tile = TileConfig::defaults();
  NonlinearConfig nonlinear;

  static Int8Ops per_block(const TileConfig& cfg) {
    return {QuantScheme::per_block(cfg.block), cfg, {}};
  }
  static Int8Ops with_scheme(const QuantScheme& s);

  /// True when linear layers run the integer GEMM.
  bool integer_gemm() const;

  Tensor from_dense(const DenseTensor& x) const;
  DenseTensor to_dense(const Tensor& x) const;
  Tensor zeros(std::size_t rows, std::size_t cols) const;

  Tensor mm_forward(const Tensor& x, const Tensor& w, std::span<const float> bias) const;
  Tensor mm_grad_input(const Tensor& dy, const Tensor& w) const;
  DenseTensor mm_grad_weight(const Tensor& dy, const Tensor& x) const;

  Tensor gelu(const Tensor& x) const;
  Tensor gelu_backward(const Tensor& x, const Tensor& dy) const;
  Tensor dropout(const Tensor& x, const DropoutState& st) const;
  Tensor dropout_backward(const Tensor& dy, const DropoutState& st) const;
  std::pair<Tensor, RowStats> add(const Tensor& a, const Tensor& b) const;
  Tensor sum(const Tensor& a, const Tensor& b) const;
  std::pair<Tensor, NormContext> layernorm(const Tensor& x, const RowStats& st,
                                           const NormParams& p) const;
  LayerNormGrads layernorm_backward(const NormContext& ctx, const Tensor& dy,
                                    const NormParams& p) const;

  static std::size_t bytes(const Tensor& t) { return t.storage_bytes(); }
  static std::size_t elements(const Tensor& t) { return t.rows() * t.cols(); }
  static std::size_t context_bytes(const NormContext& c) {
    return (c.mean.size() + c.rstd.size()) * sizeof(float);
  }
  std::string name() const;
};

struct FloatNormGrads {
  DenseTensor dx;
  std::vector<float> dgamma;
  std::vector<float> dbeta;
};

struct FloatOps {
  using Tensor = DenseTensor;
  using NormContext = FloatNormContext;

  Tensor from_dense(const DenseTensor& x) const { return x; }
  DenseTensor to_dense(const Tensor& x) const { return x; }
  Tensor zeros(std::size_t rows, std::size_t cols) const { return DenseTensor(rows, cols); }

  Tensor mm_forward(const Tensor& x, const Tensor& w, std::span<const float> bias) const;
  Tensor mm_grad_input(const Tensor& dy, const Tensor& w) const;
  DenseTensor mm_grad_weight(const Tensor& dy, const Tensor& x) const;

  Tensor gelu(const Tensor& x) const;
  Tensor gelu_backward(const Tensor& x, const Tensor& dy) const;
  Tensor dropout(const Tensor& x, const DropoutState& st) const;
  Tensor dropout_backward(const Tensor& dy, const DropoutState& st) const;
  std::pair<Tensor, RowStats> add(const Tensor& a, const Tensor& b) const;
  Tensor sum(const Tensor& a, const Tensor& b) const;
  std::pair<Tensor, NormContext> layernorm(const Tensor& x, const RowStats& st,
                                           const NormParams& p) const;
  FloatNormGrads layernorm_backward(const NormContext& ctx, const Tensor& dy,
                                    const NormParams& p) const;

  static std::size_t bytes(const Tensor& t) { return t.values().size() * sizeof(float); }
  static std::size_t elements(const Tensor& t) { return t.rows() * t.cols(); }
  static std::size_t context_bytes(const NormContext& c) {
    return (c.mean.size() + c.rstd.size()) * sizeof(float);
  }
  std::string name() const { return "fp32"; }
};

/// Trainable parameter view used by the optimizer and checkpoints.
struct ParamRef {
  std::string name;
  std::span<float> value;
  std::span<float> grad;
  bool decay = false;
};

template <class Ops>
struct LinearLayer {
  using Tensor = typename Ops::Tensor;

  DenseTensor master_weight;  // D x C
  std::vector<float> bias;    // empty when the layer has no bias
  Tensor weight_q;
  Tensor saved_input;
  bool has_saved = false;
  DenseTensor grad_weight;
  std::vector<float> grad_bias;

  LinearLayer() = default;
  LinearLayer(DenseTensor w, std::vector<float> b)
      : master_weight(std::move(w)), bias(std::move(b)) {}

  std::size_t in_features() const { return master_weight.cols(); }
  std::size_t out_features() const { return master_weight.rows(); }
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

using QuantLinear = LinearLayer<Int8Ops>;

template <class Ops>
struct LinearGrads {
  typename Ops::Tensor dx;
  DenseTensor dw;
  std::vector<float> dbias;
};

/// Requantizes the master weight, runs the forward MM and saves the input.
template <class Ops>
typename Ops::Tensor linear_forward(const Ops& ops, LinearLayer<Ops>& layer,
                                    const typename Ops::Tensor& x);

/// Uses the saved input; also stores dW / dbias on the layer. Throws
/// StateError when no forward has run.
template <class Ops>
LinearGrads<Ops> linear_backward(const Ops& ops, LinearLayer<Ops>& layer,
                                 const typename Ops::Tensor& dy);

inline BlockQuantTensor linear_forward(QuantLinear& layer, const BlockQuantTensor& x,
                                       const TileConfig& cfg = TileConfig::defaults()) {
  return linear_forward(Int8Ops::per_block(cfg), layer, x);
}
inline LinearGrads<Int8Ops> linear_backward(QuantLinear& layer, const BlockQuantTensor& dy,
                                            const TileConfig& cfg = TileConfig::defaults()) {
  return linear_backward(Int8Ops::per_block(cfg), layer, dy);
}

/// Causal multi-head self-attention on a fused (N x 3C) QKV matrix whose rows
/// are `sequences` back-to-back sequences of `seq_len` tokens. Rows beyond
/// sequences * seq_len are padding and produce zeros.
struct AttentionCore {
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t seq_len = 0;

  std::size_t hidden() const { return heads * head_dim; }

  DenseTensor forward(const DenseTensor& qkv, std::size_t sequences) const;
  DenseTensor backward(const DenseTensor& qkv, const DenseTensor& dout,
                       std::size_t sequences) const;

  /// Softmax probabilities of one (sequence, head), seq_len x seq_len.
  std::vector<float> probabilities(const DenseTensor& qkv, std::size_t sequence,
                                   std::size_t head) const;
};

struct BlockConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t seq_len = 16;
  float dropout = 0.0f;
};

/// Byte accounting of the tensors a block keeps for its backward pass.
struct SavedBytes {
  std::size_t tensors = 0;   // number of saved activation matrices
  std::size_t elements = 0;  // total elements in them
  std::size_t bytes = 0;     // as stored (values plus scales for INT8)
  std::size_t aux_bytes = 0; // LayerNorm mean / rstd vectors

  /// Same tensors stored as 16-bit floats.
  std::size_t fp16_baseline() const { return 2 * elements; }
  double ratio_to_fp16() const {
    return static_cast<double>(bytes) / static_cast<double>(fp16_baseline());
  }
};

template <class Ops>
class TransformerBlock {
 public:
  using Tensor = typename Ops::Tensor;

  TransformerBlock(const BlockConfig& cfg, std::uint64_t init_seed, std::size_t layers = 1);

  /// Input is the output of an Add together with its RowStats. Returns the
  /// block's final Add output and stats.
  std::pair<Tensor, RowStats> forward(const Ops& ops, const Tensor& x, const RowStats& stats,
                                      std::size_t sequences, std::uint64_t dropout_seed,
                                      bool training = true);
  /// Gradient w.r.t. the block input; parameter grads are stored in place.
  Tensor backward(const Ops& ops, const Tensor& dy);

  SavedBytes saved_bytes() const;
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);

  const BlockConfig& config() const { return cfg_; }

  LinearLayer<Ops> qkv, proj, fc1, fc2;
  NormParams ln1, ln2;
  std::vector<float> grad_ln1_gamma, grad_ln1_beta, grad_ln2_gamma, grad_ln2_beta;

 private:
  BlockConfig cfg_;
  AttentionCore attn_;
  std::size_t sequences_ = 0;
  bool has_forward_ = false;
  bool dropped_ = false;
  typename Ops::NormContext ctx1_, ctx2_;
  Tensor qkv_out_, fc1_out_;
  DropoutState drop1_, drop2_;
};

struct ModelConfig {
  std::size_t vocab = 16;
  std::size_t seq_len = 16;
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  float dropout = 0.0f;
  float outlier_fraction = 0.01f;
  float outlier_factor = 0.0f;  // 0 disables the embedding gain
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
};

/// Token batch: `sequences` rows of seq_len tokens, padded with ignored rows
/// up to `rows`. target < 0 marks positions without a loss term.
struct TokenBatch {
  std::size_t sequences = 0;
  std::size_t rows = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
};

template <class Ops>
class TransformerModel {
 public:
  using Tensor = typename Ops::Tensor;

  explicit TransformerModel(const ModelConfig& cfg);

  /// Mean cross-entropy over positions with a target.
  /// Dropout is active only when `training` is set.
  double forward(const Ops& ops, const TokenBatch& batch, std::uint64_t dropout_seed = 0,
                 bool training = true);
  /// Fills every parameter gradient for the last forward.
  void backward(const Ops& ops);

  std::vector<ParamRef> params();
  const ModelConfig& config() const { return cfg_; }
  const std::vector<float>& embedding_gain() const { return gain_; }
  std::vector<TransformerBlock<Ops>>& blocks() { return blocks_; }
  const DenseTensor& last_logits() const { return logits_; }

  DenseTensor tok_emb, pos_emb, head;
  NormParams ln_f;

 private:
  ModelConfig cfg_;
  std::vector<float> gain_;
  std::vector<TransformerBlock<Ops>> blocks_;
  DenseTensor grad_tok_, grad_pos_, grad_head_;
  std::vector<float> grad_lnf_gamma_, grad_lnf_beta_;
  // forward context
  TokenBatch batch_;
  typename Ops::NormContext ctx_f_;
  DenseTensor final_, logits_;
  std::size_t counted_ = 0;
  bool has_forward_ = false;
};

/// Flat binary dump of parameter values: "JQTP", count, then per parameter
/// name length, name, element count and little-endian float32 data.
void save_params(const std::string& path, const std::vector<ParamRef>& params);
/// Loads into matching parameters; throws StateError on name/size mismatch.
void load_params(const std::string& path, const std::vector<ParamRef>& params);

extern template class TransformerBlock<Int8Ops>;
extern template class TransformerBlock<FloatOps>;
extern template class TransformerModel<Int8Ops>;
extern template class TransformerModel<FloatOps>;

}  // namespace jqt
