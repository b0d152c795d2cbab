#pragma once

// Subcommands behind the jqt command-line tool. Each takes a parsed RunSpec,
// writes its artifacts under spec.out_dir and returns a process exit code.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jqt/qgemm.hpp"
#include "jqt/quantize.hpp"
#include "jqt/tensor.hpp"
#include "jqt/trainer.hpp"

namespace jqt::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDivergence = 3, kSelftestFailure = 4 };

constexpr int kSchemaVersion = 1;

struct RunSpec {
  std::string subcommand;
  std::string config_path;  // empty = built-in defaults
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::optional<std::string> mode;
  std::optional<std::string> scheme;
  std::optional<std::size_t> block;
  std::string resume_dir;
  bool allow_divergence = false;
};

/// Reads a config file and checks the top-level schema. An empty path gives
/// {"schema_version": 1}.
nlohmann::json load_config(const std::string& path);

// ---- quant-error -----------------------------------------------------------------

struct QuantErrorConfig {
  std::vector<std::pair<std::size_t, std::size_t>> sizes = {{256, 256}, {1024, 1024}};
  std::vector<std::string> schemes = {"per-tensor", "per-token", "per-channel", "per-block"};
  std::vector<float> outlier_factors = {1.0f, 5.0f, 10.0f, 30.0f};
  double outlier_fraction = 0.01;
  std::size_t block = 32;
  std::size_t trials = 3;
  std::uint64_t seed = 0;
};

struct QuantErrorRow {
  std::size_t rows = 0, cols = 0;
  float outlier_factor = 1.0f;
  std::size_t trial = 0;
  std::string scheme;
  std::size_t block = 0;
  QuantError error;
};

QuantErrorConfig quant_error_config(const nlohmann::json& root, const RunSpec& spec);
std::vector<QuantErrorRow> quant_error_sweep(const QuantErrorConfig& cfg);
void write_quant_error_csv(std::ostream& out, const std::vector<QuantErrorRow>& rows);

// ---- bench -------------------------------------------------------------------------

struct BenchConfig {
  std::vector<std::array<std::size_t, 3>> gemm_sizes = {
      {128, 128, 128}, {256, 64, 384}, {256, 256, 256}, {512, 256, 128}, {96, 160, 224}};
  std::vector<std::pair<std::size_t, std::size_t>> nonlinear_sizes = {{256, 256}, {512, 128}};
  std::vector<ExecMode> modes = {ExecMode::Int8DataFlow, ExecMode::QcdEmulation};
  std::size_t block = 32;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
};

struct BenchTiming {
  std::string op_name;
  std::size_t n = 0, c = 0, d = 0;
  ExecMode mode = ExecMode::Int8DataFlow;
  double best_seconds = 0.0;
};

struct BenchResult {
  std::vector<CounterRecord> counters;
  std::vector<BenchTiming> timings;
  std::vector<std::string> mismatches;  // counter rows that break the closed forms
};

BenchConfig bench_config(const nlohmann::json& root, const RunSpec& spec);
BenchResult run_bench(const BenchConfig& cfg);

// ---- train ---------------------------------------------------------------------------

struct SweepRun {
  std::string label;
  std::string scheme;
  std::optional<float> outlier_factor;
};

struct TrainSweepConfig {
  ToyTask task;
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {0};
  std::vector<SweepRun> runs;
  bool checkpoints = true;
};

struct SweepOutcome {
  SweepRun run;
  std::uint64_t seed = 0;
  std::vector<TrainRecord> records;
  std::string records_file;  // relative to the output directory
  bool diverged() const { return !records.empty() && records.back().diverged; }
};

TrainSweepConfig train_sweep_config(const nlohmann::json& root, const RunSpec& spec);

/// Runs every (seed, run) pair. With out_dir set, per-run record CSVs,
/// comparison.csv and manifest.json are written there.
std::vector<SweepOutcome> run_sweep(const TrainSweepConfig& cfg, const std::string& out_dir,
                                    const std::string& resume_dir, std::ostream* log);

/// Per-seed comparison against the first run of the sweep.
void write_sweep_comparison(std::ostream& out, const std::vector<SweepOutcome>& outcomes);

// ---- selftest ------------------------------------------------------------------------------

struct SelftestConfig {
  std::size_t micro_cases = 2000;
  std::size_t gemm_cases = 10;
  std::size_t roundtrip_tensors = 20;
  std::size_t fd_points = 1000;
  std::vector<std::string> fixtures;  // JQT1 files to validate
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

SelftestConfig selftest_config(const nlohmann::json& root);
std::vector<CheckResult> run_selftest(const SelftestConfig& cfg);

// ---- entry points ----------------------------------------------------------------------------

int cmd_quant_error(const RunSpec& spec, std::ostream& log);
int cmd_bench(const RunSpec& spec, std::ostream& log);
int cmd_train(const RunSpec& spec, std::ostream& log);
int cmd_selftest(const RunSpec& spec, std::ostream& log);

/// Dispatches on spec.subcommand and maps ConfigError to kConfigError.
int run(const RunSpec& spec, std::ostream& log, std::ostream& err);

}  // namespace jqt::cli
