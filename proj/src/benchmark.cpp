#include "flowsynth/benchmark.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <ostream>
#include <thread>

#include "flowsynth/error.hpp"
#include "flowsynth/rng.hpp"
#include "flowsynth/sampler.hpp"

namespace flowsynth {

namespace {

constexpr std::size_t kDims = 9;
constexpr std::size_t kComponents = 3;
constexpr std::uint64_t kStructureSeed = 0x5EEDF10Eull;

const std::array<const char*, kDims> kNumericNames = {
    "Duration", "Bytes", "Packets", "MeanPktLen", "FlowRate", "IATMean", "IATStd", "FwdBytes", "BwdBytes"};

struct Component {
  double weight;
  std::array<double, kDims> mean;
  std::array<std::array<double, kDims>, kDims> factor;  // lower triangular
  std::vector<std::pair<const char*, double>> protocols;
  std::vector<std::pair<const char*, double>> flags;
};

std::array<Component, kComponents> mixture() {
  Rng rng(kStructureSeed);
  std::array<Component, kComponents> comps;
  const std::array<double, kComponents> weights = {0.5, 0.3, 0.2};
  for (std::size_t c = 0; c < kComponents; ++c) {
    auto& comp = comps[c];
    comp.weight = weights[c];
    for (auto& m : comp.mean) m = rng.normal(0.0, 2.0);
    for (std::size_t i = 0; i < kDims; ++i)
      for (std::size_t j = 0; j < kDims; ++j) {
        if (j < i) {
          comp.factor[i][j] = rng.normal(0.0, 0.5);
        } else if (j == i) {
          comp.factor[i][j] = rng.uniform(0.5, 1.0);
        } else {
          comp.factor[i][j] = 0.0;
        }
      }
  }
  comps[0].protocols = {{"TCP", 0.85}, {"UDP", 0.15}};
  comps[1].protocols = {{"UDP", 0.7}, {"TCP", 0.2}, {"ICMP", 0.1}};
  comps[2].protocols = {{"TCP", 0.5}, {"ICMP", 0.5}};
  comps[0].flags = {{"PA", 0.6}, {"S", 0.2}, {"FA", 0.2}};
  comps[1].flags = {{"A", 0.5}, {"none", 0.5}};
  comps[2].flags = {{"R", 0.4}, {"S", 0.6}};
  return comps;
}

const char* pick(const std::vector<std::pair<const char*, double>>& choices, Rng& rng) {
  double u = rng.uniform();
  for (const auto& [name, p] : choices) {
    if (u < p) return name;
    u -= p;
  }
  return choices.back().first;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void logf(std::ostream* log, const char* fmt, double a = 0, double b = 0, double c = 0) {
  if (!log) return;
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, a, b, c);
  *log << buf << std::flush;
}

}  // namespace

std::vector<std::string> benchmark_features() {
  std::vector<std::string> out(kNumericNames.begin(), kNumericNames.end());
  out.emplace_back("Protocol");
  out.emplace_back("Flags");
  return out;
}

FlowTable make_benchmark_table(std::size_t rows, std::uint64_t seed) {
  const auto comps = mixture();
  Rng rng(derive_seed(seed, "benchmark"));
  std::vector<std::vector<double>> numeric(kDims, std::vector<double>(rows));
  std::vector<std::string> protocol(rows), flags(rows);
  std::array<double, kDims> g{};
  for (std::size_t r = 0; r < rows; ++r) {
    double u = rng.uniform();
    std::size_t c = 0;
    while (c + 1 < kComponents && u >= comps[c].weight) {
      u -= comps[c].weight;
      ++c;
    }
    const auto& comp = comps[c];
    for (auto& v : g) v = rng.normal();
    for (std::size_t i = 0; i < kDims; ++i) {
      double v = comp.mean[i];
      for (std::size_t j = 0; j <= i; ++j) v += comp.factor[i][j] * g[j];
      numeric[i][r] = v;
    }
    protocol[r] = pick(comp.protocols, rng);
    flags[r] = pick(comp.flags, rng);
  }
  std::vector<FlowTable::Column> cols;
  for (std::size_t i = 0; i < kDims; ++i) cols.push_back({kNumericNames[i], ColumnKind::kNumeric, std::move(numeric[i])});
  cols.push_back({"Protocol", ColumnKind::kCategorical, std::move(protocol)});
  cols.push_back({"Flags", ColumnKind::kCategorical, std::move(flags)});
  return FlowTable::from_columns(std::move(cols));
}

BenchResult run_benchmark(const BenchOptions& options, std::ostream* log) {
  const auto t_start = std::chrono::steady_clock::now();
  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);
  auto path = [&](const std::string& name) { return options.out_dir / name; };

  const FlowTable real = make_benchmark_table(options.rows, options.seed);
  const Codebook codebook = fit_codebook(real, benchmark_features(), options.alphabet_size, options.mode);
  const SymbolDataset data = encode(real, codebook);
  logf(log, "benchmark: %.0f rows, %.0f features, K=%.0f\n", static_cast<double>(real.rows()),
       static_cast<double>(codebook.features().size()), options.alphabet_size);
  if (write) {
    write_csv(real, path("real.csv"));
    save_codebook(codebook, path("codebook.txt"));
    save_symbols(data, codebook.alphabet_size(), path("train.symdata"));
  }

  BenchResult result;
  const std::array<Arch, 3> archs = {Arch::kWaveNet, Arch::kRnn, Arch::kTransformer};
  result.models.resize(archs.size());
  std::vector<Model> models;
  for (std::size_t i = 0; i < archs.size(); ++i) {
    const auto config = ModelConfig::defaults(archs[i], static_cast<std::size_t>(codebook.vocab_size()), data.length - 1);
    models.push_back(Model::create(config, derive_seed(options.seed, std::string(to_string(archs[i])))));
    result.models[i].arch = archs[i];
    result.models[i].params = count_params(config);
  }

  TrainConfig tc;
  tc.batch_size = options.batch_size;
  tc.max_steps = options.steps;
  tc.learning_rate = options.learning_rate;
  tc.seed = derive_seed(options.seed, "train");
  tc.eval_every = std::max<std::size_t>(1, options.steps / 5);

  auto train_one = [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    result.models[i].training = train(models[i], data, tc);
    result.models[i].train_seconds = seconds_since(t0);
  };
  if (options.threads > 1) {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(archs.size());
    for (std::size_t i = 0; i < archs.size(); ++i) {
      pool.emplace_back([&, i] {
        try {
          train_one(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < archs.size(); ++i) train_one(i);
  }

  for (std::size_t i = 0; i < archs.size(); ++i) {
    auto& m = result.models[i];
    const std::string name(to_string(m.arch));
    const auto& tr = m.training;
    logf(log, ("train " + name + ": step-0 loss %.4f, final loss %.4f, %.1f s\n").c_str(), tr.initial_loss,
         tr.train_loss.back(), m.train_seconds);
    if (write) {
      save_checkpoint(models[i], path(name + ".ckpt"));
      write_loss_csv(tr, path(name + "_loss.csv"));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const SymbolDataset seqs = sample_sequences(models[i], codebook, options.synth_rows, 1.0,
                                                derive_seed(options.seed, "sample-" + name), options.threads);
    m.sample_seconds = seconds_since(t0);
    const FlowTable synth = decode(seqs, codebook).table;
    if (write) write_csv(synth, path(name + "_synth.csv"));
    m.eval = evaluate(real, synth, codebook, options.nu, derive_seed(options.seed, "eval"));
    logf(log, ("eval " + name + ": inlier %.2f%%, holdout %.2f%%, discriminative %.3f\n").c_str(), m.eval.inlier_pct,
         m.eval.real_holdout_inlier_pct, m.eval.discriminative_accuracy);
  }

  {
    auto config = ModelConfig::defaults(Arch::kRnn, static_cast<std::size_t>(codebook.vocab_size()), data.length - 1);
    config.eps_init = 0.0;
    Model untrained = Model::create(config, derive_seed(options.seed, "control"));
    const SymbolDataset seqs = sample_sequences(untrained, codebook, options.synth_rows, 1.0,
                                                derive_seed(options.seed, "sample-control"), options.threads);
    const FlowTable synth = decode(seqs, codebook).table;
    if (write) write_csv(synth, path("control_synth.csv"));
    result.control = evaluate(real, synth, codebook, options.nu, derive_seed(options.seed, "eval"));
    logf(log, "eval control: inlier %.2f%%, discriminative %.3f\n", result.control.inlier_pct,
         result.control.discriminative_accuracy);
  }
  {
    const FlowTable fresh = make_benchmark_table(options.synth_rows, derive_seed(options.seed, "fresh-draw"));
    result.truth = evaluate(real, fresh, codebook, options.nu, derive_seed(options.seed, "eval"));
    logf(log, "eval true distribution: inlier %.2f%%\n", result.truth.inlier_pct);
  }

  result.total_seconds = seconds_since(t_start);
  if (write) {
    std::ofstream table(path("table.csv"));
    write_bench_table(result, table);
    std::ofstream summary(path("summary.txt"));
    write_bench_summary(result, summary);
    if (!table || !summary) throw DataError("cannot write benchmark results to " + options.out_dir.string());
  }
  return result;
}

void write_bench_table(const BenchResult& result, std::ostream& out) {
  std::vector<std::pair<std::string, EvalReport>> rows;
  for (const auto& m : result.models) rows.emplace_back(std::string(to_string(m.arch)), m.eval);
  write_report_csv(rows, out);
}

void write_bench_summary(const BenchResult& result, std::ostream& out, bool timings) {
  char buf[256];
  out << "model        params  step0_loss  final_loss  inlier_pct  holdout_pct  discriminative";
  out << (timings ? "  train_s  sample_s\n" : "\n");
  for (const auto& m : result.models) {
    std::snprintf(buf, sizeof buf, "%-11s %7zu  %10.4f  %10.4f  %10.2f  %11.2f  %14.3f",
                  std::string(to_string(m.arch)).c_str(), m.params, m.training.initial_loss, m.training.train_loss.back(),
                  m.eval.inlier_pct, m.eval.real_holdout_inlier_pct, m.eval.discriminative_accuracy);
    out << buf;
    if (timings) {
      std::snprintf(buf, sizeof buf, "  %7.1f  %8.1f", m.train_seconds, m.sample_seconds);
      out << buf;
    }
    out << "\n";
  }
  std::snprintf(buf, sizeof buf, "%-11s %7s  %10s  %10s  %10.2f  %11.2f  %14.3f\n", "control", "-", "-", "-",
                result.control.inlier_pct, result.control.real_holdout_inlier_pct,
                result.control.discriminative_accuracy);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-11s %7s  %10s  %10s  %10.2f  %11.2f  %14.3f\n", "truth", "-", "-", "-",
                result.truth.inlier_pct, result.truth.real_holdout_inlier_pct, result.truth.discriminative_accuracy);
  out << buf;
  if (timings) {
    std::snprintf(buf, sizeof buf, "total_seconds: %.1f\n", result.total_seconds);
    out << buf;
  }
}

}  // namespace flowsynth
