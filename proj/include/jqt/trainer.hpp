#pragma once

// Toy-scale training harness: deterministic tasks, AdamW on FP32 master
// parameters, scheme-selected block stacks, CSV / JSON artifacts.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "jqt/qlayers.hpp"

namespace jqt {

/// CopySequence: each example is `length` random tokens followed by the same
/// tokens again; only the repeated half carries targets. label_noise replaces
/// a target with a uniform random token with that probability.
/// CharLM: byte-level next-character prediction over a text file, split
/// contiguously (first 90% train, rest validation).
struct ToyTask {
  enum class Kind { CopySequence, CharLM };

  Kind kind = Kind::CopySequence;
  std::size_t vocab = 16;
  std::size_t length = 8;
  float label_noise = 0.0f;
  std::size_t train_size = 4096;  // sequences in the training pool
  std::size_t val_size = 256;
  std::string corpus_path;
  std::size_t context = 16;

  static ToyTask copy(std::size_t vocab, std::size_t length, float label_noise = 0.0f);
  static ToyTask char_lm(std::string path, std::size_t context);

  std::size_t seq_len() const { return kind == Kind::CopySequence ? 2 * length : context; }
  void validate() const;
};

struct Sequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;  // -1 = no loss term
};

struct TaskData {
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::vector<Sequence> train;
  std::vector<Sequence> val;
};

/// Deterministic in (task, seed). Train and validation sets are disjoint.
TaskData generate_task_data(const ToyTask& task, std::uint64_t seed);

/// Packs sequences into a batch with rows padded up to a multiple of `pad`.
TokenBatch make_batch(const std::vector<Sequence>& pool, const std::vector<std::size_t>& indices,
                      std::size_t pad);

/// Training batch `step` of a run: `batch` sequences drawn from the pool with
/// a generator keyed by (seed, step).
TokenBatch training_batch(const TaskData& data, std::size_t batch, std::size_t pad,
                          std::uint64_t seed, std::size_t step);

struct AdamWConfig {
  float lr = 1.5e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-8f;
  float weight_decay = 0.1f;
};

/// AdamW with decoupled weight decay on parameters flagged `decay`.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<ParamRef>& params, float lr_scale = 1.0f);
  std::size_t steps_taken() const { return t_; }

  /// Moment buffers, in parameter order.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  void set_steps_taken(std::size_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Global L2 norm of all gradients; scales them to `max_norm` when above it.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamRef>& params, double max_norm);

struct TrainConfig {
  ModelConfig model;
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  AdamWConfig optim;
  std::size_t warmup_steps = 0;
  double grad_clip = 1.0;
  std::size_t block = 32;
  std::string scheme = "per-block";  // per-block | per-token | per-channel | per-tensor | fp32
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;

  void validate() const;
};

struct TrainRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double grad_norm = 0.0;
  std::string scheme;
  double wallclock = 0.0;  // seconds since the run started; kept out of CSV
  bool diverged = false;
};

struct RunOptions {
  std::string checkpoint_dir;  // written at the end of the run when set
  std::string resume_from;     // checkpoint directory to continue from
  std::function<void(const TrainRecord&)> on_record;
};

/// Trains from the config's seed (or a checkpoint) and returns one record per
/// evaluation, plus a final record at the last step. A non-finite loss emits
/// a record with diverged = true and stops the run.
std::vector<TrainRecord> run_training(const TrainConfig& cfg, const ToyTask& task,
                                      const RunOptions& opts = {});

/// Mean validation loss of a model over the whole validation set.
template <class Ops>
double evaluate(TransformerModel<Ops>& model, const Ops& ops, const TaskData& data,
                std::size_t batch, std::size_t pad);

void write_records_header(std::ostream& out);
void write_record_row(std::ostream& out, const TrainRecord& r);

struct RunResult {
  std::string label;
  std::vector<TrainRecord> records;
};

struct ComparisonRow {
  std::string label;
  std::size_t final_step = 0;
  double final_val_loss = 0.0;
  double best_val_loss = 0.0;
  double rel_gap_final = 0.0;  // (final - reference final) / reference final
  double rel_gap_best = 0.0;
};

/// The first run is the reference. Runs are aligned on the reference's step
/// grid; a run with a different grid is linearly resampled onto it.
std::vector<ComparisonRow> compare_runs(const std::vector<RunResult>& runs);
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

/// Linear interpolation of val_loss at `step` (clamped to the record range).
double val_loss_at(const std::vector<TrainRecord>& records, double step);

// ---- JSON ------------------------------------------------------------------------

/// Strict parsers: unknown keys and wrong types raise ConfigError.
ToyTask task_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& model, const nlohmann::json& train);
nlohmann::json to_json(const ToyTask& t);
nlohmann::json to_json(const TrainConfig& c);

}  // namespace jqt
