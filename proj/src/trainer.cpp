#include "jqt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "jqt/error.hpp"

namespace jqt {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const std::vector<std::int32_t>& v) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::int32_t x : v) {
    for (int b = 0; b < 4; ++b) {
      h ^= static_cast<std::uint8_t>(static_cast<std::uint32_t>(x) >> (8 * b));
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

TaskData copy_data(const ToyTask& t, std::uint64_t seed) {
  TaskData d;
  d.vocab = t.vocab;
  d.seq_len = t.seq_len();
  std::mt19937_64 rng(mix(seed, 0xC0));
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(t.vocab) - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = t.length;
  while (d.train.size() < t.train_size || d.val.size() < t.val_size) {
    std::vector<std::int32_t> a(n);
    for (auto& x : a) x = tok(rng);
    // split by hash parity
    const bool to_val = fnv1a(a) & 1u;
    auto& pool = to_val ? d.val : d.train;
    const std::size_t cap = to_val ? t.val_size : t.train_size;
    Sequence s;
    s.tokens = a;
    s.tokens.insert(s.tokens.end(), a.begin(), a.end());
    s.targets.assign(2 * n, -1);
    for (std::size_t p = n - 1; p + 1 < 2 * n; ++p) {
      s.targets[p] = s.tokens[p + 1];
      if (t.label_noise > 0.0f && u(rng) < t.label_noise) s.targets[p] = tok(rng);
    }
    if (pool.size() < cap) pool.push_back(std::move(s));
  }
  return d;
}

TaskData charlm_data(const ToyTask& t) {
  std::ifstream in(t.corpus_path, std::ios::binary);
  if (!in) throw ConfigError("charlm: cannot read corpus " + t.corpus_path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t ctx = t.context;
  if (text.size() < 10 * (ctx + 1)) throw ConfigError("charlm: corpus too small for the context");
  std::set<unsigned char> chars(text.begin(), text.end());
  std::vector<std::int32_t> id(256, -1);
  std::int32_t next = 0;
  for (unsigned char c : chars) id[c] = next++;

  TaskData d;
  d.vocab = chars.size();
  d.seq_len = ctx;
  const std::size_t split = text.size() * 9 / 10;
  auto windows = [&](std::size_t begin, std::size_t end, std::size_t cap, std::vector<Sequence>& out) {
    for (std::size_t i = begin; i + ctx + 1 <= end && out.size() < cap; i += ctx) {
      Sequence s;
      for (std::size_t k = 0; k < ctx; ++k) {
        s.tokens.push_back(id[static_cast<unsigned char>(text[i + k])]);
        s.targets.push_back(id[static_cast<unsigned char>(text[i + k + 1])]);
      }
      out.push_back(std::move(s));
    }
  };
  windows(0, split, t.train_size, d.train);
  windows(split, text.size(), t.val_size, d.val);
  if (d.train.empty() || d.val.empty()) throw ConfigError("charlm: corpus too small");
  return d;
}

}  // namespace

// ---- tasks ---------------------------------------------------------------------

ToyTask ToyTask::copy(std::size_t vocab, std::size_t length, float label_noise) {
  ToyTask t;
  t.kind = Kind::CopySequence;
  t.vocab = vocab;
  t.length = length;
  t.label_noise = label_noise;
  return t;
}

ToyTask ToyTask::char_lm(std::string path, std::size_t context) {
  ToyTask t;
  t.kind = Kind::CharLM;
  t.corpus_path = std::move(path);
  t.context = context;
  return t;
}

void ToyTask::validate() const {
  if (kind == Kind::CopySequence) {
    if (vocab < 2 || length < 1) throw ConfigError("copy task: vocab >= 2 and length >= 1 required");
    if (!(label_noise >= 0.0f && label_noise <= 1.0f))
      throw ConfigError("copy task: label_noise must be in [0, 1]");
  } else if (context < 1) {
    throw ConfigError("charlm task: context must be positive");
  }
  if (train_size == 0 || val_size == 0) throw ConfigError("task: empty train or validation set");
}

TaskData generate_task_data(const ToyTask& task, std::uint64_t seed) {
  task.validate();
  return task.kind == ToyTask::Kind::CopySequence ? copy_data(task, seed) : charlm_data(task);
}

TokenBatch make_batch(const std::vector<Sequence>& pool, const std::vector<std::size_t>& indices,
                      std::size_t pad) {
  if (indices.empty()) throw DimensionError("make_batch: no sequences");
  const std::size_t L = pool.at(indices.front()).tokens.size();
  TokenBatch b;
  b.sequences = indices.size();
  const std::size_t real = b.sequences * L;
  pad = std::max<std::size_t>(pad, 1);
  b.rows = (real + pad - 1) / pad * pad;
  b.tokens.assign(b.rows, 0);
  b.targets.assign(b.rows, -1);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sequence& s = pool.at(indices[i]);
    if (s.tokens.size() != L) throw DimensionError("make_batch: ragged sequences");
    std::copy(s.tokens.begin(), s.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * L));
    std::copy(s.targets.begin(), s.targets.end(), b.targets.begin() + static_cast<std::ptrdiff_t>(i * L));
  }
  return b;
}

TokenBatch training_batch(const TaskData& data, std::size_t batch, std::size_t pad,
                          std::uint64_t seed, std::size_t step) {
  std::mt19937_64 rng(mix(seed, 0xBA7C0000ull + step));
  std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = pick(rng);
  return make_batch(data.train, idx, pad);
}

// ---- optimizer ------------------------------------------------------------------------

void AdamW::step(const std::vector<ParamRef>& params, float lr_scale) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  const float lr = cfg_.lr * lr_scale;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const ParamRef& p = params[k];
    if (m_[k].size() != p.value.size()) {
      m_[k].assign(p.value.size(), 0.0f);
      v_[k].assign(p.value.size(), 0.0f);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i];
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0f - cfg_.beta1) * g;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0f - cfg_.beta2) * g * g;
      const float mhat = static_cast<float>(m_[k][i] / bc1);
      const float vhat = static_cast<float>(v_[k][i] / bc2);
      if (p.decay) p.value[i] -= lr * cfg_.weight_decay * p.value[i];
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double clip_grad_norm(const std::vector<ParamRef>& params, double max_norm) {
  double sq = 0.0;
  for (const ParamRef& p : params)
    for (float g : p.grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const ParamRef& p : params)
      for (float& g : p.grad) g *= s;
  }
  return norm;
}

// ---- training --------------------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  if (steps == 0 || batch_size == 0 || eval_every == 0)
    throw ConfigError("train: steps, batch_size and eval_every must be positive");
  if (!(optim.lr > 0.0f) || !(optim.weight_decay >= 0.0f))
    throw ConfigError("train: lr must be positive and weight_decay non-negative");
  if (!(optim.beta1 >= 0.0f && optim.beta1 < 1.0f && optim.beta2 >= 0.0f && optim.beta2 < 1.0f))
    throw ConfigError("train: betas must be in [0, 1)");
  if (block == 0 || block % 16 != 0) throw ConfigError("train: block size must be a multiple of 16");
  if (scheme != "fp32") {
    QuantScheme::parse(scheme, block);
    if (model.hidden % block != 0)
      throw ConfigError("train: hidden size must be a multiple of the block size");
  }
}

template <class Ops>
double evaluate(TransformerModel<Ops>& model, const Ops& ops, const TaskData& data,
                std::size_t batch, std::size_t pad) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.val.size(); i += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(i + batch, data.val.size()); ++k) idx.push_back(k);
    const TokenBatch b = make_batch(data.val, idx, pad);
    const auto n = static_cast<std::size_t>(
        std::count_if(b.targets.begin(), b.targets.end(), [](std::int32_t t) { return t >= 0; }));
    total += model.forward(ops, b, 0, false) * static_cast<double>(n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

template double evaluate(TransformerModel<Int8Ops>&, const Int8Ops&, const TaskData&,
                         std::size_t, std::size_t);
template double evaluate(TransformerModel<FloatOps>&, const FloatOps&, const TaskData&,
                         std::size_t, std::size_t);

namespace {

void save_moments(const std::string& path, const std::vector<ParamRef>& params,
                  std::vector<std::vector<float>>& m, std::vector<std::vector<float>>& v) {
  std::vector<ParamRef> refs;
  for (std::size_t k = 0; k < params.size(); ++k) {
    m.resize(params.size());
    v.resize(params.size());
    m[k].resize(params[k].value.size(), 0.0f);
    v[k].resize(params[k].value.size(), 0.0f);
    refs.push_back({"m." + params[k].name, m[k], {}, false});
    refs.push_back({"v." + params[k].name, v[k], {}, false});
  }
  save_params(path, refs);
}

void load_moments(const std::string& path, const std::vector<ParamRef>& params,
                  std::vector<std::vector<float>>& m, std::vector<std::vector<float>>& v) {
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  std::vector<ParamRef> refs;
  for (std::size_t k = 0; k < params.size(); ++k) {
    m[k].assign(params[k].value.size(), 0.0f);
    v[k].assign(params[k].value.size(), 0.0f);
    refs.push_back({"m." + params[k].name, m[k], {}, false});
    refs.push_back({"v." + params[k].name, v[k], {}, false});
  }
  load_params(path, refs);
}

template <class Ops>
std::vector<TrainRecord> train_with(const Ops& ops, const TrainConfig& cfg, const TaskData& data,
                                    const ToyTask& task, const RunOptions& opts) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  ModelConfig mc = cfg.model;
  mc.vocab = data.vocab;
  mc.seq_len = data.seq_len;
  mc.init_seed = cfg.seed;
  TransformerModel<Ops> model(mc);
  AdamW adam(cfg.optim);
  std::size_t start = 0;

  if (!opts.resume_from.empty()) {
    const fs::path dir(opts.resume_from);
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw ConfigError("resume: no manifest in " + opts.resume_from);
    const json man = json::parse(mf, nullptr, false);
    if (man.is_discarded() || !man.contains("step")) throw ConfigError("resume: bad manifest");
    if (man.value("scheme", std::string()) != cfg.scheme || man.value("seed", std::uint64_t{0}) != cfg.seed)
      throw ConfigError("resume: checkpoint was written by a different scheme or seed");
    start = man["step"].get<std::size_t>();
    const auto params = model.params();
    load_params((dir / "params.bin").string(), params);
    load_moments((dir / "optimizer.bin").string(), params, adam.first_moments(),
                 adam.second_moments());
    adam.set_steps_taken(start);
  }

  std::vector<TrainRecord> records;
  auto emit = [&](TrainRecord r) {
    r.scheme = cfg.scheme;
    r.wallclock = elapsed();
    if (opts.on_record) opts.on_record(r);
    records.push_back(std::move(r));
  };

  std::size_t last = start;
  for (std::size_t step = start + 1; step <= cfg.steps; ++step) {
    const TokenBatch batch = training_batch(data, cfg.batch_size, cfg.block, cfg.seed, step);
    double loss = 0.0;
    try {
      loss = model.forward(ops, batch, mix(cfg.seed, step), true);
      if (std::isfinite(loss)) model.backward(ops);
    } catch (const DomainError&) {
      // the quantizers reject non-finite activations and gradients
      loss = std::nan("");
    }
    if (!std::isfinite(loss)) {
      TrainRecord r;
      r.step = step;
      r.train_loss = loss;
      r.val_loss = std::nan("");
      r.diverged = true;
      emit(r);
      return records;
    }
    const auto params = model.params();
    const double gn = clip_grad_norm(params, cfg.grad_clip);
    const float lr_scale =
        cfg.warmup_steps ? std::min(1.0f, static_cast<float>(step) / static_cast<float>(cfg.warmup_steps))
                         : 1.0f;
    adam.step(params, lr_scale);
    last = step;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      TrainRecord r;
      r.step = step;
      r.train_loss = loss;
      r.grad_norm = gn;
      try {
        r.val_loss = evaluate(model, ops, data, cfg.batch_size, cfg.block);
      } catch (const DomainError&) {
        r.val_loss = std::nan("");
      }
      r.diverged = !std::isfinite(r.val_loss);
      emit(r);
      if (r.diverged) return records;
    }
  }

  if (!opts.checkpoint_dir.empty()) {
    const fs::path dir(opts.checkpoint_dir);
    fs::create_directories(dir);
    const auto params = model.params();
    save_params((dir / "params.bin").string(), params);
    save_moments((dir / "optimizer.bin").string(), params, adam.first_moments(),
                 adam.second_moments());
    json man;
    man["schema_version"] = 1;
    man["step"] = last;
    man["scheme"] = cfg.scheme;
    man["seed"] = cfg.seed;
    man["config"] = to_json(cfg);
    man["task"] = to_json(task);
    json shapes = json::array();
    for (const ParamRef& p : params) shapes.push_back({{"name", p.name}, {"size", p.value.size()}});
    man["params"] = shapes;
    std::ofstream(dir / "manifest.json") << man.dump(2) << "\n";
  }
  return records;
}

}  // namespace

std::vector<TrainRecord> run_training(const TrainConfig& cfg, const ToyTask& task,
                                      const RunOptions& opts) {
  cfg.validate();
  const TaskData data = generate_task_data(task, cfg.seed);
  if (cfg.scheme == "fp32") return train_with(FloatOps{}, cfg, data, task, opts);
  return train_with(Int8Ops::with_scheme(QuantScheme::parse(cfg.scheme, cfg.block)), cfg, data,
                    task, opts);
}

// ---- records and comparison --------------------------------------------------------------

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

}  // namespace

void write_records_header(std::ostream& out) {
  out << "step,scheme,train_loss,val_loss,grad_norm,diverged\n";
}

void write_record_row(std::ostream& out, const TrainRecord& r) {
  out << r.step << ',' << r.scheme << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ','
      << fmt(r.grad_norm) << ',' << (r.diverged ? 1 : 0) << '\n';
}

double val_loss_at(const std::vector<TrainRecord>& records, double step) {
  if (records.empty()) throw StateError("val_loss_at: no records");
  if (step <= static_cast<double>(records.front().step)) return records.front().val_loss;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto s1 = static_cast<double>(records[i].step);
    if (step <= s1) {
      const auto s0 = static_cast<double>(records[i - 1].step);
      const double w = (step - s0) / (s1 - s0);
      return records[i - 1].val_loss + w * (records[i].val_loss - records[i - 1].val_loss);
    }
  }
  return records.back().val_loss;
}

std::vector<ComparisonRow> compare_runs(const std::vector<RunResult>& runs) {
  if (runs.empty()) return {};
  for (const RunResult& r : runs)
    if (r.records.empty()) throw StateError("compare_runs: run '" + r.label + "' has no records");
  const auto& ref = runs.front().records;
  auto summarize = [&](const RunResult& run) {
    ComparisonRow row;
    row.label = run.label;
    row.final_step = ref.back().step;
    row.final_val_loss = val_loss_at(run.records, static_cast<double>(row.final_step));
    row.best_val_loss = row.final_val_loss;
    for (const TrainRecord& r : ref)
      row.best_val_loss = std::min(row.best_val_loss, val_loss_at(run.records, static_cast<double>(r.step)));
    return row;
  };
  std::vector<ComparisonRow> rows;
  for (const RunResult& run : runs) rows.push_back(summarize(run));
  for (ComparisonRow& row : rows) {
    row.rel_gap_final = (row.final_val_loss - rows.front().final_val_loss) / rows.front().final_val_loss;
    row.rel_gap_best = (row.best_val_loss - rows.front().best_val_loss) / rows.front().best_val_loss;
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "label,final_step,final_val_loss,best_val_loss,rel_gap_final,rel_gap_best\n";
  for (const ComparisonRow& r : rows) {
    out << r.label << ',' << r.final_step << ',' << fmt(r.final_val_loss) << ','
        << fmt(r.best_val_loss) << ',' << fmt(r.rel_gap_final) << ',' << fmt(r.rel_gap_best)
        << '\n';
  }
}

// ---- JSON ---------------------------------------------------------------------------------

namespace {

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    const json& v = j.at(key);
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw ConfigError("");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(where + ": bad value for '" + key + "'");
  }
}

}  // namespace

ToyTask task_from_json(const json& j) {
  only_keys(j, {"kind", "vocab", "length", "label_noise", "train_size", "val_size", "corpus", "context"},
            "task");
  std::string kind = "copy";
  read(j, "kind", kind, "task");
  ToyTask t;
  if (kind == "copy") {
    t.kind = ToyTask::Kind::CopySequence;
  } else if (kind == "charlm") {
    t.kind = ToyTask::Kind::CharLM;
  } else {
    throw ConfigError("task: kind must be 'copy' or 'charlm'");
  }
  read(j, "vocab", t.vocab, "task");
  read(j, "length", t.length, "task");
  read(j, "label_noise", t.label_noise, "task");
  read(j, "train_size", t.train_size, "task");
  read(j, "val_size", t.val_size, "task");
  read(j, "corpus", t.corpus_path, "task");
  read(j, "context", t.context, "task");
  if (t.kind == ToyTask::Kind::CharLM && t.corpus_path.empty())
    throw ConfigError("task: charlm needs 'corpus'");
  t.validate();
  return t;
}

TrainConfig train_config_from_json(const json& model, const json& train) {
  TrainConfig c;
  if (!model.is_null()) {
    only_keys(model, {"layers", "hidden", "heads", "mlp_ratio", "dropout", "outlier_factor",
                      "outlier_fraction"},
              "model");
    read(model, "layers", c.model.layers, "model");
    read(model, "hidden", c.model.hidden, "model");
    read(model, "heads", c.model.heads, "model");
    read(model, "mlp_ratio", c.model.mlp_ratio, "model");
    read(model, "dropout", c.model.dropout, "model");
    read(model, "outlier_factor", c.model.outlier_factor, "model");
    read(model, "outlier_fraction", c.model.outlier_fraction, "model");
  }
  if (!train.is_null()) {
    only_keys(train, {"steps", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps",
                      "warmup_steps", "grad_clip", "block_size", "scheme", "seed", "eval_every"},
              "train");
    read(train, "steps", c.steps, "train");
    read(train, "batch_size", c.batch_size, "train");
    read(train, "lr", c.optim.lr, "train");
    read(train, "weight_decay", c.optim.weight_decay, "train");
    read(train, "beta1", c.optim.beta1, "train");
    read(train, "beta2", c.optim.beta2, "train");
    read(train, "eps", c.optim.eps, "train");
    read(train, "warmup_steps", c.warmup_steps, "train");
    read(train, "grad_clip", c.grad_clip, "train");
    read(train, "block_size", c.block, "train");
    read(train, "scheme", c.scheme, "train");
    read(train, "seed", c.seed, "train");
    read(train, "eval_every", c.eval_every, "train");
  }
  return c;
}

json to_json(const ToyTask& t) {
  json j;
  if (t.kind == ToyTask::Kind::CopySequence) {
    j = {{"kind", "copy"}, {"vocab", t.vocab}, {"length", t.length}, {"label_noise", t.label_noise}};
  } else {
    j = {{"kind", "charlm"}, {"corpus", t.corpus_path}, {"context", t.context}};
  }
  j["train_size"] = t.train_size;
  j["val_size"] = t.val_size;
  return j;
}

json to_json(const TrainConfig& c) {
  return {{"model",
           {{"layers", c.model.layers},
            {"hidden", c.model.hidden},
            {"heads", c.model.heads},
            {"mlp_ratio", c.model.mlp_ratio},
            {"dropout", c.model.dropout},
            {"outlier_factor", c.model.outlier_factor},
            {"outlier_fraction", c.model.outlier_fraction}}},
          {"train",
           {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"lr", c.optim.lr},
            {"weight_decay", c.optim.weight_decay},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2},
            {"eps", c.optim.eps},
            {"warmup_steps", c.warmup_steps},
            {"grad_clip", c.grad_clip},
            {"block_size", c.block},
            {"scheme", c.scheme},
            {"seed", c.seed},
            {"eval_every", c.eval_every}}}};
}

}  // namespace jqt
