#include <iostream>

#include <CLI11.hpp>

#include "jqt/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"INT8 block-quantized training reference: error analysis, benchmarks, training"};
  app.require_subcommand(1);

  jqt::cli::RunSpec spec;
  std::uint64_t seed = 0;
  std::string mode, scheme;
  std::size_t block = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", spec.config_path, "JSON config (schema_version 1)")->check(CLI::ExistingFile);
    sub->add_option("--out", spec.out_dir, "output directory");
    sub->add_option("--seed", seed, "overrides the config seed(s)");
    sub->add_option("--threads", spec.threads, "worker threads (speed only)")->check(CLI::PositiveNumber);
    sub->add_option("--mode", mode, "int8 | qcd")->check(CLI::IsMember({"int8", "qcd"}));
    sub->add_option("--scheme", scheme, "per-block | per-token | per-channel | per-tensor | fp32")
        ->check(CLI::IsMember({"per-block", "per-token", "per-channel", "per-tensor", "fp32"}));
    sub->add_option("--block-size", block, "quantization block size B")->check(CLI::PositiveNumber);
  };

  auto* qe = app.add_subcommand("quant-error", "quantization error sweep (CSV)");
  auto* bench = app.add_subcommand("bench", "GEMM and non-linear counters plus timings");
  auto* train = app.add_subcommand("train", "training sweep with records, comparison and manifest");
  auto* self = app.add_subcommand("selftest", "invariant suite at small sizes");
  for (auto* s : {qe, bench, train, self}) common(s);
  train->add_option("--resume", spec.resume_dir, "output directory of an earlier run to continue")
      ->check(CLI::ExistingDirectory);
  train->add_flag("--allow-divergence", spec.allow_divergence, "exit 0 even if a run diverges");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : jqt::cli::kConfigError;
  }

  spec.subcommand = app.get_subcommands().front()->get_name();
  const CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) spec.seed = seed;
  if (sub->count("--mode")) spec.mode = mode;
  if (sub->count("--scheme")) spec.scheme = scheme;
  if (sub->count("--block-size")) spec.block = block;
  return jqt::cli::run(spec, std::cout, std::cerr);
}
