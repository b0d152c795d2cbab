#include "jqt/cli.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "jqt/error.hpp"
#include "jqt/parallel.hpp"
#include "jqt/qnonlinear.hpp"
#include "jqt/quantize.hpp"
#include "jqt/synthetic.hpp"

namespace jqt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kTopLevel = {"schema_version", "task",  "model",    "train",
                                         "sweep",          "quant_error", "bench", "selftest"};

void only_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_as(const json& v, const std::string& what) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0))
        throw ConfigError("");
    } else {
      if (!v.is_number()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("bad value for '" + what + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = get_as<T>(j.at(key), where + "." + key);
}

template <class T>
std::vector<T> read_list(const json& j, const char* key, std::vector<T> fallback,
                         const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& a = j.at(key);
  if (!a.is_array() || a.empty()) throw ConfigError(where + "." + key + ": expected a non-empty array");
  std::vector<T> out;
  for (const json& v : a) out.push_back(get_as<T>(v, where + "." + key));
  return out;
}

std::vector<std::size_t> read_shape(const json& v, std::size_t rank, const std::string& where) {
  if (!v.is_array() || v.size() != rank)
    throw ConfigError(where + ": expected arrays of " + std::to_string(rank) + " sizes");
  std::vector<std::size_t> s;
  for (const json& x : v) {
    const auto n = get_as<std::size_t>(x, where);
    if (n == 0) throw ConfigError(where + ": sizes must be positive");
    s.push_back(n);
  }
  return s;
}

const json& section(const json& root, const char* key) {
  static const json empty = json::object();
  return root.contains(key) ? root.at(key) : empty;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = fs::path(dir) / ".jqt_write_probe";
  std::ofstream f(probe);
  if (ec || !f) throw ConfigError("output directory is not writable: " + dir);
  f.close();
  fs::remove(probe, ec);
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  std::ofstream f(fs::path(dir) / name);
  if (!f) throw StateError("cannot write " + (fs::path(dir) / name).string());
  return f;
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void check_scheme_name(const std::string& s, bool allow_fp32) {
  if (allow_fp32 && s == "fp32") return;
  QuantScheme::parse(s, 32);
}

}  // namespace

json load_config(const std::string& path) {
  json root = {{"schema_version", kSchemaVersion}};
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    root = json::parse(in, nullptr, false);
    if (root.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
  }
  only_keys(root, kTopLevel, "config");
  if (!root.contains("schema_version") || !root["schema_version"].is_number_integer() ||
      root["schema_version"].get<int>() != kSchemaVersion) {
    throw ConfigError("config: schema_version must be " + std::to_string(kSchemaVersion));
  }
  return root;
}

// ---- quant-error -----------------------------------------------------------------

QuantErrorConfig quant_error_config(const json& root, const RunSpec& spec) {
  QuantErrorConfig c;
  const json& j = section(root, "quant_error");
  only_keys(j, {"sizes", "schemes", "outlier_factors", "outlier_fraction", "block", "trials", "seed"},
            "quant_error");
  if (j.contains("sizes")) {
    if (!j["sizes"].is_array() || j["sizes"].empty())
      throw ConfigError("quant_error.sizes: expected a non-empty array");
    c.sizes.clear();
    for (const json& s : j["sizes"]) {
      const auto v = read_shape(s, 2, "quant_error.sizes");
      c.sizes.emplace_back(v[0], v[1]);
    }
  }
  c.schemes = read_list<std::string>(j, "schemes", c.schemes, "quant_error");
  c.outlier_factors = read_list<float>(j, "outlier_factors", c.outlier_factors, "quant_error");
  read(j, "outlier_fraction", c.outlier_fraction, "quant_error");
  read(j, "block", c.block, "quant_error");
  read(j, "trials", c.trials, "quant_error");
  read(j, "seed", c.seed, "quant_error");
  if (spec.scheme) c.schemes = {*spec.scheme};
  if (spec.block) c.block = *spec.block;
  if (spec.seed) c.seed = *spec.seed;

  for (const auto& s : c.schemes) check_scheme_name(s, false);
  if (c.block == 0) throw ConfigError("quant_error.block must be positive");
  if (c.trials == 0) throw ConfigError("quant_error.trials must be positive");
  if (!(c.outlier_fraction > 0.0 && c.outlier_fraction <= 1.0))
    throw ConfigError("quant_error.outlier_fraction must be in (0, 1]");
  for (float f : c.outlier_factors)
    if (!(f > 0.0f) || !std::isfinite(f)) throw ConfigError("quant_error.outlier_factors must be positive");
  for (auto [r, cols] : c.sizes)
    if (r % c.block || cols % c.block)
      throw ConfigError("quant_error.sizes must be multiples of the block size");
  return c;
}

std::vector<QuantErrorRow> quant_error_sweep(const QuantErrorConfig& cfg) {
  std::vector<QuantErrorRow> rows;
  for (auto [r, c] : cfg.sizes) {
    for (float factor : cfg.outlier_factors) {
      for (std::size_t t = 0; t < cfg.trials; ++t) {
        const DenseTensor x = channel_outlier_matrix(r, c, cfg.outlier_fraction, factor, cfg.seed + t);
        for (const auto& name : cfg.schemes) {
          const QuantScheme s = QuantScheme::parse(name, cfg.block);
          rows.push_back({r, c, factor, t, name, s.kind == QuantScheme::Kind::PerBlock ? cfg.block : 0,
                          quantization_error(x, s)});
        }
      }
    }
  }
  return rows;
}

void write_quant_error_csv(std::ostream& out, const std::vector<QuantErrorRow>& rows) {
  out << "rows,cols,outlier_factor,trial,scheme,block,mse,mean_abs\n";
  for (const auto& r : rows) {
    out << r.rows << ',' << r.cols << ',' << fmt(r.outlier_factor) << ',' << r.trial << ','
        << r.scheme << ',' << r.block << ',' << fmt(r.error.mse) << ',' << fmt(r.error.mean_abs)
        << '\n';
  }
}

int cmd_quant_error(const RunSpec& spec, std::ostream& log) {
  const json root = load_config(spec.config_path);
  const QuantErrorConfig cfg = quant_error_config(root, spec);
  ensure_dir(spec.out_dir);
  const auto rows = quant_error_sweep(cfg);
  if (!spec.out_dir.empty()) {
    auto f = open_out(spec.out_dir, "quant_error.csv");
    write_quant_error_csv(f, rows);
  } else {
    write_quant_error_csv(log, rows);
  }
  log << "quant-error: " << rows.size() << " rows\n";
  return kOk;
}

// ---- bench ---------------------------------------------------------------------------

BenchConfig bench_config(const json& root, const RunSpec& spec) {
  BenchConfig c;
  const json& j = section(root, "bench");
  only_keys(j, {"gemm_sizes", "nonlinear_sizes", "modes", "block", "repeats", "seed"}, "bench");
  if (j.contains("gemm_sizes")) {
    if (!j["gemm_sizes"].is_array()) throw ConfigError("bench.gemm_sizes: expected an array");
    c.gemm_sizes.clear();
    for (const json& s : j["gemm_sizes"]) {
      const auto v = read_shape(s, 3, "bench.gemm_sizes");
      c.gemm_sizes.push_back({v[0], v[1], v[2]});
    }
  }
  if (j.contains("nonlinear_sizes")) {
    if (!j["nonlinear_sizes"].is_array()) throw ConfigError("bench.nonlinear_sizes: expected an array");
    c.nonlinear_sizes.clear();
    for (const json& s : j["nonlinear_sizes"]) {
      const auto v = read_shape(s, 2, "bench.nonlinear_sizes");
      c.nonlinear_sizes.emplace_back(v[0], v[1]);
    }
  }
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : read_list<std::string>(j, "modes", {}, "bench")) c.modes.push_back(parse_exec_mode(m));
  }
  read(j, "block", c.block, "bench");
  read(j, "repeats", c.repeats, "bench");
  read(j, "seed", c.seed, "bench");
  if (spec.mode) c.modes = {parse_exec_mode(*spec.mode)};
  if (spec.block) c.block = *spec.block;
  if (spec.seed) c.seed = *spec.seed;

  TileConfig::for_block(c.block).validate();
  if (c.repeats == 0) throw ConfigError("bench.repeats must be positive");
  for (const auto& s : c.gemm_sizes)
    for (std::size_t v : s)
      if (v % c.block) throw ConfigError("bench: GEMM size " + std::to_string(v) + " is not a multiple of B");
  for (auto [r, cols] : c.nonlinear_sizes)
    if (r % c.block || cols % c.block) throw ConfigError("bench: non-linear sizes must be multiples of B");
  return c;
}

namespace {

BlockQuantTensor bench_operand(std::size_t rows, std::size_t cols, std::size_t block,
                               std::uint64_t seed) {
  return quantize_per_block(gaussian_matrix(rows, cols, seed), block);
}

template <class F>
double best_time(std::size_t repeats, F&& f) {
  double best = 0.0;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    best = i == 0 ? s : std::min(best, s);
  }
  return best;
}

}  // namespace

BenchResult run_bench(const BenchConfig& cfg) {
  BenchResult res;
  const TileConfig tiles = TileConfig::for_block(cfg.block);
  auto record = [&](std::string op, std::size_t n, std::size_t c, std::size_t d, ExecMode mode,
                    const AccessCounters& k, double secs) {
    res.counters.push_back({op, n, c, d, cfg.block, mode, k});
    res.timings.push_back({std::move(op), n, c, d, mode, secs});
  };

  std::uint64_t seed = cfg.seed;
  for (const auto& [n, c, d] : cfg.gemm_sizes) {
    const auto x = bench_operand(n, c, cfg.block, seed++);
    const auto w = bench_operand(d, c, cfg.block, seed++);
    const auto dy = bench_operand(n, d, cfg.block, seed++);
    for (ExecMode mode : cfg.modes) {
      struct Case {
        const char* name;
        std::size_t m, k, out;
        std::function<void(AccessCounters*)> run;
      };
      const Case cases[] = {
          {"forward", n, c, d, [&](AccessCounters* k) { block_mm_forward(x, w, tiles, mode, k); }},
          {"grad_input", n, d, c, [&](AccessCounters* k) { block_mm_grad_input(dy, w, tiles, mode, k); }},
          {"grad_weight", d, n, c, [&](AccessCounters* k) { block_mm_grad_weight(dy, x, tiles, mode, k); }},
      };
      for (const Case& cs : cases) {
        AccessCounters k;
        cs.run(&k);
        const double secs = best_time(cfg.repeats, [&] { cs.run(nullptr); });
        if (!(k == expected_counters(cs.m, cs.k, cs.out, tiles, mode))) {
          res.mismatches.push_back(std::string(cs.name) + " " + std::to_string(n) + "x" +
                                   std::to_string(c) + "x" + std::to_string(d) + " " + to_string(mode));
        }
        record(cs.name, n, c, d, mode, k, secs);
      }
    }
  }

  for (const auto& [r, c] : cfg.nonlinear_sizes) {
    const auto a = bench_operand(r, c, cfg.block, seed++);
    const auto b = bench_operand(r, c, cfg.block, seed++);
    const auto st = DropoutState::make(0.1f, seed++, r, c);
    const NormParams np = NormParams::identity(c);
    for (ExecMode mode : cfg.modes) {
      NonlinearConfig nc;
      nc.mode = mode;
      const auto [sum, stats] = add_forward(a, b, nc);
      const auto [ln, ctx] = layernorm_forward(sum, stats, np, nc);
      const std::pair<const char*, std::function<void(AccessCounters*)>> ops[] = {
          {"gelu_forward", [&](AccessCounters* k) { gelu_forward(a, nc, k); }},
          {"gelu_backward", [&](AccessCounters* k) { gelu_backward(a, b, nc, k); }},
          {"dropout_forward", [&](AccessCounters* k) { dropout_forward(a, st, nc, k); }},
          {"dropout_backward", [&](AccessCounters* k) { dropout_backward(b, st, nc, k); }},
          {"add_forward", [&](AccessCounters* k) { add_forward(a, b, nc, k); }},
          {"layernorm_forward", [&](AccessCounters* k) { layernorm_forward(sum, stats, np, nc, k); }},
          {"layernorm_backward", [&](AccessCounters* k) { layernorm_backward(ctx, b, np, nc, k); }},
      };
      for (const auto& [name, run] : ops) {
        AccessCounters k;
        run(&k);
        const double secs = best_time(cfg.repeats, [&] { run(nullptr); });
        record(name, r, c, 0, mode, k, secs);
      }
    }
  }

  // element-wise operators move half the bytes of their 16-bit counterparts
  for (const CounterRecord& i8 : res.counters) {
    if (i8.mode != ExecMode::Int8DataFlow || i8.d != 0) continue;
    for (const CounterRecord& f16 : res.counters) {
      if (f16.mode == ExecMode::QcdEmulation && f16.op_name == i8.op_name && f16.n == i8.n &&
          f16.c == i8.c && 2 * i8.counters.bytes_moved() != f16.counters.bytes_moved()) {
        res.mismatches.push_back(i8.op_name + " " + std::to_string(i8.n) + "x" +
                                 std::to_string(i8.c) + " byte ratio");
      }
    }
  }
  return res;
}

int cmd_bench(const RunSpec& spec, std::ostream& log) {
  const json root = load_config(spec.config_path);
  const BenchConfig cfg = bench_config(root, spec);
  ensure_dir(spec.out_dir);
  const BenchResult res = run_bench(cfg);

  std::ostringstream counters, timing;
  write_counter_header(counters);
  for (const auto& r : res.counters) write_counter_row(counters, r);
  timing << "op_name,N,C,D,B,mode,repeats,best_seconds\n";
  for (const auto& t : res.timings) {
    timing << t.op_name << ',' << t.n << ',' << t.c << ',' << t.d << ',' << cfg.block << ','
           << to_string(t.mode) << ',' << cfg.repeats << ',' << fmt(t.best_seconds) << '\n';
  }
  if (!spec.out_dir.empty()) {
    open_out(spec.out_dir, "counters.csv") << counters.str();
    open_out(spec.out_dir, "timing.csv") << timing.str();
  } else {
    log << counters.str();
  }
  for (const auto& m : res.mismatches) log << "counter mismatch: " << m << '\n';
  log << "bench: " << res.counters.size() << " counter rows, "
      << (res.mismatches.empty() ? "all closed forms hold" : "closed forms violated") << '\n';
  return res.mismatches.empty() ? kOk : kSelftestFailure;
}

// ---- train -------------------------------------------------------------------------------

namespace {

bool safe_label(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.' || ch == '+';
  });
}

std::string run_stem(const SweepOutcome& o) { return o.run.label + "_s" + std::to_string(o.seed); }

}  // namespace

TrainSweepConfig train_sweep_config(const json& root, const RunSpec& spec) {
  TrainSweepConfig c;
  c.task = root.contains("task") ? task_from_json(root["task"]) : ToyTask::copy(16, 8);
  c.base = train_config_from_json(section(root, "model"), section(root, "train"));
  const json& s = section(root, "sweep");
  only_keys(s, {"seeds", "runs", "checkpoints"}, "sweep");
  c.seeds = read_list<std::uint64_t>(s, "seeds", {c.base.seed}, "sweep");
  read(s, "checkpoints", c.checkpoints, "sweep");
  if (s.contains("runs")) {
    if (!s["runs"].is_array() || s["runs"].empty()) throw ConfigError("sweep.runs: expected a non-empty array");
    for (const json& r : s["runs"]) {
      only_keys(r, {"label", "scheme", "outlier_factor"}, "sweep.runs[]");
      SweepRun run;
      read(r, "scheme", run.scheme, "sweep.runs[]");
      run.label = run.scheme;
      read(r, "label", run.label, "sweep.runs[]");
      if (r.contains("outlier_factor")) run.outlier_factor = get_as<float>(r["outlier_factor"], "outlier_factor");
      c.runs.push_back(run);
    }
  } else {
    for (const char* name : {"fp32", "per-block", "per-token", "per-channel", "per-tensor"})
      c.runs.push_back({name, name, std::nullopt});
  }
  if (spec.scheme) c.runs = {{*spec.scheme, *spec.scheme, std::nullopt}};
  if (spec.seed) c.seeds = {*spec.seed};
  if (spec.block) c.base.block = *spec.block;

  c.task.validate();
  std::set<std::string> labels;
  for (const SweepRun& r : c.runs) {
    if (r.scheme.empty()) throw ConfigError("sweep.runs[]: scheme is required");
    check_scheme_name(r.scheme, true);
    if (!safe_label(r.label)) throw ConfigError("sweep.runs[]: bad label '" + r.label + "'");
    if (!labels.insert(r.label).second) throw ConfigError("sweep.runs[]: duplicate label " + r.label);
    if (r.outlier_factor && !(*r.outlier_factor >= 0.0f))
      throw ConfigError("sweep.runs[]: outlier_factor must be non-negative");
    TrainConfig t = c.base;
    t.scheme = r.scheme;
    t.validate();
  }
  return c;
}

std::vector<SweepOutcome> run_sweep(const TrainSweepConfig& cfg, const std::string& out_dir,
                                    const std::string& resume_dir, std::ostream* log) {
  std::vector<SweepOutcome> outcomes;
  std::vector<double> seconds;
  for (std::uint64_t seed : cfg.seeds) {
    for (const SweepRun& run : cfg.runs) {
      SweepOutcome o;
      o.run = run;
      o.seed = seed;
      TrainConfig t = cfg.base;
      t.scheme = run.scheme;
      t.seed = seed;
      if (run.outlier_factor) t.model.outlier_factor = *run.outlier_factor;

      RunOptions opts;
      if (!out_dir.empty() && cfg.checkpoints)
        opts.checkpoint_dir = (fs::path(out_dir) / "checkpoints" / run_stem(o)).string();
      if (!resume_dir.empty())
        opts.resume_from = (fs::path(resume_dir) / "checkpoints" / run_stem(o)).string();
      const auto t0 = std::chrono::steady_clock::now();
      o.records = run_training(t, cfg.task, opts);
      seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      o.records_file = "runs/" + run_stem(o) + ".csv";

      if (!out_dir.empty()) {
        fs::create_directories(fs::path(out_dir) / "runs");
        auto f = open_out(out_dir, o.records_file);
        write_records_header(f);
        for (const auto& r : o.records) write_record_row(f, r);
      }
      if (log) {
        *log << run.label << " seed " << seed << ": ";
        if (o.records.empty()) *log << "no new steps\n";
        else if (o.diverged()) *log << "diverged at step " << o.records.back().step << '\n';
        else *log << "final val loss " << fmt(o.records.back().val_loss) << '\n';
      }
      outcomes.push_back(std::move(o));
    }
  }

  if (!out_dir.empty()) {
    {
      auto f = open_out(out_dir, "comparison.csv");
      write_sweep_comparison(f, outcomes);
    }
    json runs = json::array();
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      const auto& o = outcomes[i];
      json r = {{"label", o.run.label}, {"scheme", o.run.scheme}, {"seed", o.seed},
                {"records", o.records_file}, {"diverged", o.diverged()}, {"wall_seconds", seconds[i]}};
      if (o.run.outlier_factor) r["outlier_factor"] = *o.run.outlier_factor;
      if (!o.records.empty()) {
        r["final_step"] = o.records.back().step;
        r["final_val_loss"] = o.records.back().val_loss;
      }
      runs.push_back(r);
    }
    json schemes = json::array();
    for (const auto& r : cfg.runs) schemes.push_back(r.scheme);
    const json manifest = {{"schema_version", kSchemaVersion},
                           {"command", "train"},
                           {"created_utc", utc_timestamp()},
                           {"task", to_json(cfg.task)},
                           {"config", to_json(cfg.base)},
                           {"seeds", cfg.seeds},
                           {"schemes", schemes},
                           {"resumed_from", resume_dir},
                           {"runs", runs}};
    open_out(out_dir, "manifest.json") << manifest.dump(2) << '\n';
  }
  return outcomes;
}

void write_sweep_comparison(std::ostream& out, const std::vector<SweepOutcome>& outcomes) {
  out << "seed,label,final_step,final_val_loss,best_val_loss,rel_gap_final,rel_gap_best\n";
  std::vector<std::uint64_t> seeds;
  for (const auto& o : outcomes)
    if (std::find(seeds.begin(), seeds.end(), o.seed) == seeds.end()) seeds.push_back(o.seed);
  for (std::uint64_t seed : seeds) {
    std::vector<RunResult> runs;
    for (const auto& o : outcomes)
      if (o.seed == seed && !o.records.empty()) runs.push_back({o.run.label, o.records});
    if (runs.empty()) continue;
    for (const ComparisonRow& r : compare_runs(runs)) {
      out << seed << ',' << r.label << ',' << r.final_step << ',' << fmt(r.final_val_loss) << ','
          << fmt(r.best_val_loss) << ',' << fmt(r.rel_gap_final) << ',' << fmt(r.rel_gap_best) << '\n';
    }
  }
}

int cmd_train(const RunSpec& spec, std::ostream& log) {
  const json root = load_config(spec.config_path);
  const TrainSweepConfig cfg = train_sweep_config(root, spec);
  if (!spec.resume_dir.empty() && !fs::is_directory(spec.resume_dir))
    throw ConfigError("--resume: not a directory: " + spec.resume_dir);
  ensure_dir(spec.out_dir);
  const auto outcomes = run_sweep(cfg, spec.out_dir, spec.resume_dir, &log);
  const bool diverged = std::any_of(outcomes.begin(), outcomes.end(),
                                    [](const SweepOutcome& o) { return o.diverged(); });
  if (diverged && !spec.allow_divergence) {
    log << "train: at least one run diverged\n";
    return kDivergence;
  }
  return kOk;
}

// ---- selftest ------------------------------------------------------------------------------

SelftestConfig selftest_config(const json& root) {
  SelftestConfig c;
  const json& j = section(root, "selftest");
  only_keys(j, {"micro_cases", "gemm_cases", "roundtrip_tensors", "fd_points", "fixtures"}, "selftest");
  read(j, "micro_cases", c.micro_cases, "selftest");
  read(j, "gemm_cases", c.gemm_cases, "selftest");
  read(j, "roundtrip_tensors", c.roundtrip_tensors, "selftest");
  read(j, "fd_points", c.fd_points, "selftest");
  c.fixtures = read_list<std::string>(j, "fixtures", {}, "selftest");
  return c;
}

namespace {

using Check = std::function<std::string()>;  // empty string = pass

std::string check_micro_kernel(std::size_t cases) {
  std::mt19937_64 rng(0x5E1F);
  std::uniform_int_distribution<int> v(-128, 127);
  for (std::size_t n = 0; n < cases; ++n) {
    Int8Tile16 a, b;
    for (auto& x : a) x = static_cast<std::int8_t>(v(rng));
    for (auto& x : b) x = static_cast<std::int8_t>(v(rng));
    const Int32Tile16 c = micro_mm_16(a, b);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        std::int64_t s = 0;
        for (int k = 0; k < 16; ++k) s += std::int64_t{a[i * 16 + k]} * std::int64_t{b[k * 16 + j]};
        if (s != c[i * 16 + j]) return "case " + std::to_string(n) + " differs";
      }
    }
  }
  return {};
}

std::string check_gemm_oracle(std::size_t cases) {
  std::mt19937_64 rng(0x6E33);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  const TileConfig tiles;
  for (std::size_t n = 0; n < cases; ++n) {
    const std::size_t N = 32 * dim(rng), C = 32 * dim(rng), D = 32 * dim(rng);
    const auto x = bench_operand(N, C, 32, rng());
    const auto w = bench_operand(D, C, 32, rng());
    const DenseTensor y = mm_forward_accum(x, w, tiles);
    const DenseTensor xd = dequantize(x), wd = dequantize(w);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < D; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < C; ++k) s += double{xd(i, k)} * double{wd(j, k)};
        num = std::max(num, std::fabs(s - y(i, j)));
        den = std::max(den, std::fabs(s));
      }
    }
    if (num > 1e-6 * den) return "relative error " + fmt(num / den) + " at " + std::to_string(N) + "x" +
                                  std::to_string(C) + "x" + std::to_string(D);
  }
  return {};
}

std::string check_roundtrip(std::size_t tensors) {
  for (std::size_t t = 0; t < tensors; ++t) {
    DenseTensor x = channel_outlier_matrix(64, 96, 0.02, 1.0f + 10.0f * static_cast<float>(t % 4), 77 + t);
    const float spread = std::exp2(static_cast<float>(t % 9) - 4.0f);
    for (float& v : x.values()) v *= spread;
    for (const auto& s : {QuantScheme::per_tensor(), QuantScheme::per_token(),
                          QuantScheme::per_channel(), QuantScheme::per_block(32)}) {
      const auto q = quantize_with_scheme(x, s);
      const DenseTensor back = dequantize(q);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
          const double sc = q.scale_of(r, c);
          if (std::fabs(double{x(r, c)} - back(r, c)) > sc / 2 + sc * std::ldexp(1.0, -10))
            return s.name() + " tensor " + std::to_string(t);
        }
      }
    }
  }
  return {};
}

std::string check_gelu_gradient(std::size_t points) {
  std::mt19937_64 rng(0x6E1);
  std::uniform_real_distribution<double> d(-4.0, 4.0);
  const double h = 1e-3;
  for (std::size_t i = 0; i < points; ++i) {
    const double x = d(rng);
    const double fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2 * h);
    if (std::fabs(kernels::gelu_grad(static_cast<float>(x)) - fd) > 1e-4) return "x = " + fmt(x);
  }
  return {};
}

std::string check_layernorm_gradient(std::size_t points) {
  std::mt19937_64 rng(0x1A7);
  std::uniform_real_distribution<double> d(-4.0, 4.0);
  const std::size_t n = 32;
  const double h = 1e-3;
  std::size_t done = 0;
  while (done < points) {
    std::vector<float> x(n), dy(n), g(n), b(n), y(n), dx(n), dg(n, 0.0f), db(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<float>(d(rng));
      dy[i] = static_cast<float>(d(rng) / 4);
      g[i] = static_cast<float>(1 + d(rng) / 8);
      b[i] = static_cast<float>(d(rng) / 8);
    }
    float mean = 0, rstd = 0;
    kernels::layernorm_row<float>(x, g, b, 1e-5f, y, &mean, &rstd);
    kernels::layernorm_row_backward<float>(x, dy, g, mean, rstd, dx, dg, db);
    std::vector<double> xd(x.begin(), x.end()), gd(g.begin(), g.end()), bd(b.begin(), b.end());
    auto loss = [&] {
      std::vector<double> yd(n);
      kernels::layernorm_row<double>(xd, gd, bd, 1e-5, yd);
      double l = 0;
      for (std::size_t i = 0; i < n; ++i) l += dy[i] * yd[i];
      return l;
    };
    auto fd = [&](double& v) {
      const double keep = v;
      v = keep + h;
      const double lp = loss();
      v = keep - h;
      const double lm = loss();
      v = keep;
      return (lp - lm) / (2 * h);
    };
    for (std::size_t i = 0; i < n && done < points; ++i, ++done) {
      if (std::fabs(dx[i] - fd(xd[i])) > 1e-4) return "dx at point " + std::to_string(done);
      if (std::fabs(dg[i] - fd(gd[i])) > 1e-4) return "dgamma at point " + std::to_string(done);
      if (std::fabs(db[i] - fd(bd[i])) > 1e-4) return "dbeta at point " + std::to_string(done);
    }
  }
  return {};
}

std::string check_tiling() {
  const auto x = bench_operand(192, 96, 32, 901);
  const auto w = bench_operand(160, 96, 32, 902);
  const auto dy = bench_operand(192, 160, 32, 903);
  const int threads = num_threads();
  std::string failure;
  std::optional<std::array<BlockQuantTensor, 3>> ref;
  for (const TileConfig& t : {TileConfig{128, 32, 128, 32}, TileConfig{64, 32, 64, 32}, TileConfig{32, 32, 32, 32}}) {
    for (int th : {1, 4, 8}) {
      set_num_threads(th);
      std::array<BlockQuantTensor, 3> out = {block_mm_forward(x, w, t), block_mm_grad_input(dy, w, t),
                                             block_mm_grad_weight(dy, x, t)};
      if (!ref) ref = out;
      else if (!(out == *ref) && failure.empty())
        failure = "tile " + std::to_string(t.tile_n) + " threads " + std::to_string(th);
    }
  }
  set_num_threads(threads);
  return failure;
}

std::string check_counters() {
  const TileConfig tiles;
  for (auto [n, c, d] : {std::array<std::size_t, 3>{128, 96, 128}, {256, 64, 384}, {96, 32, 224},
                         {512, 128, 64}, {160, 160, 160}}) {
    const auto x = bench_operand(n, c, 32, n + c);
    const auto w = bench_operand(d, c, 32, c + d);
    for (ExecMode m : {ExecMode::Int8DataFlow, ExecMode::QcdEmulation}) {
      AccessCounters k;
      block_mm_forward(x, w, tiles, m, &k);
      if (!(k == expected_counters(n, c, d, tiles, m)))
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(d) + " " + to_string(m);
    }
  }
  return {};
}

std::string check_fixture(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "cannot open";
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::istringstream src(bytes);
  const BlockQuantTensor t = read_jqt(src);
  std::ostringstream back;
  write_jqt(back, t);
  if (back.str() != bytes) return "trailing or non-canonical bytes";
  return {};
}

}  // namespace

std::vector<CheckResult> run_selftest(const SelftestConfig& cfg) {
  std::vector<std::pair<std::string, Check>> checks = {
      {"micro_kernel_oracle", [&] { return check_micro_kernel(cfg.micro_cases); }},
      {"gemm_dense_oracle", [&] { return check_gemm_oracle(cfg.gemm_cases); }},
      {"roundtrip_bound", [&] { return check_roundtrip(cfg.roundtrip_tensors); }},
      {"gelu_gradient", [&] { return check_gelu_gradient(cfg.fd_points); }},
      {"layernorm_gradient", [&] { return check_layernorm_gradient(cfg.fd_points); }},
      {"tiling_transparency", [] { return check_tiling(); }},
      {"counter_formulas", [] { return check_counters(); }},
  };
  for (const auto& f : cfg.fixtures)
    checks.emplace_back("fixture:" + fs::path(f).filename().string(), [f] { return check_fixture(f); });

  std::vector<CheckResult> out;
  for (auto& [name, fn] : checks) {
    CheckResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.detail = fn();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

int cmd_selftest(const RunSpec& spec, std::ostream& log) {
  const json root = load_config(spec.config_path);
  const SelftestConfig cfg = selftest_config(root);
  ensure_dir(spec.out_dir);
  const auto results = run_selftest(cfg);
  bool ok = true;
  json report = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    log << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << std::fixed << std::setprecision(3)
        << r.seconds << " s)" << std::defaultfloat;
    if (!r.passed) log << ": " << r.detail;
    log << '\n';
    report.push_back({{"check", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}});
  }
  if (!spec.out_dir.empty()) open_out(spec.out_dir, "selftest.json") << report.dump(2) << '\n';
  log << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? kOk : kSelftestFailure;
}

int run(const RunSpec& spec, std::ostream& log, std::ostream& err) {
  try {
    if (spec.threads < 1) throw ConfigError("--threads must be at least 1");
    set_num_threads(spec.threads);
    if (spec.subcommand == "quant-error") return cmd_quant_error(spec, log);
    if (spec.subcommand == "bench") return cmd_bench(spec, log);
    if (spec.subcommand == "train") return cmd_train(spec, log);
    if (spec.subcommand == "selftest") return cmd_selftest(spec, log);
    throw ConfigError("unknown subcommand '" + spec.subcommand + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace jqt::cli
