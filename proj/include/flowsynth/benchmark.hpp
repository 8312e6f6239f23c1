#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flowsynth/codec.hpp"
#include "flowsynth/evaluator.hpp"
#include "flowsynth/flow_table.hpp"
#include "flowsynth/models.hpp"
#include "flowsynth/trainer.hpp"

namespace flowsynth {

// Synthetic flow table: nine correlated numeric features drawn from a fixed
// three-component Gaussian mixture plus protocol and flag columns whose
// distribution depends on the component. The mixture itself never changes;
// `seed` only selects the draw.
FlowTable make_benchmark_table(std::size_t rows, std::uint64_t seed);

std::vector<std::string> benchmark_features();

struct BenchOptions {
  std::size_t rows = 30000;
  std::size_t synth_rows = 30000;
  int alphabet_size = kDefaultAlphabetSize;
  BinningMode mode = BinningMode::kEqualFrequency;
  std::size_t steps = 1500;
  std::size_t batch_size = 64;
  std::optional<double> learning_rate = 1e-3;
  double nu = 0.1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // When set, every intermediate artifact and the comparison table are written here.
  std::filesystem::path out_dir;
};

struct BenchModelResult {
  Arch arch = Arch::kWaveNet;
  std::size_t params = 0;
  TrainReport training;
  EvalReport eval;
  double train_seconds = 0.0;
  double sample_seconds = 0.0;
};

struct BenchResult {
  std::vector<BenchModelResult> models;  // wavenet, rnn, transformer
  EvalReport control;                    // untrained model, uniform symbols
  EvalReport truth;                      // fresh draw from the generating mixture
  double total_seconds = 0.0;
};

BenchResult run_benchmark(const BenchOptions& options, std::ostream* log = nullptr);

void write_bench_table(const BenchResult& result, std::ostream& out);
// Timings are left out by default so the file is reproducible.
void write_bench_summary(const BenchResult& result, std::ostream& out, bool timings = false);

}  // namespace flowsynth
