#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowsynth/codec.hpp"
#include "flowsynth/models.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth {

enum class Optimizer { kSgd, kAdam };

std::string_view to_string(Optimizer opt) noexcept;
Optimizer parse_optimizer(std::string_view text);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t max_steps = 1000;
  // Unset means 0.1 for SGD and 3e-4 for Adam.
  std::optional<double> learning_rate;
  // Multiply the rate by 0.1 once 2/3 of max_steps have run.
  bool decay = true;
  Optimizer optimizer = Optimizer::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  double holdout_fraction = 0.1;

  double base_learning_rate() const;
  double learning_rate_at(std::size_t step) const;
  void validate() const;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> holdout;
};

// Membership depends only on (seed, sequence index), never on row order.
DatasetSplit split_dataset(std::size_t n_sequences, double holdout_fraction, std::uint64_t seed);

// Teacher-forced pair: inputs are positions 0..L-2, targets positions 1..L-1.
struct Batch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
};

Batch make_batch(const SymbolDataset& data, std::span<const std::size_t> sequences);

// Endless stream of batches drawn uniformly with replacement from `pool`.
class BatchSampler {
 public:
  BatchSampler(const SymbolDataset& data, std::vector<std::size_t> pool, std::size_t batch_size, std::uint64_t seed);
  Batch next();
  // Sequence indices of the next batch without building it.
  std::vector<std::size_t> next_indices();

 private:
  const SymbolDataset* data_;
  std::vector<std::size_t> pool_;
  std::size_t batch_size_;
  Rng rng_;
};

// Returns the global gradient norm before clipping.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

void sgd_step(std::span<Tensor> params, double lr);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

void adam_step(std::span<Tensor> params, AdamState& state, double lr);

struct TrainReport {
  std::vector<double> train_loss;                           // per position, one per step
  std::vector<std::pair<std::size_t, double>> holdout_loss; // (step, per-position loss)
  double initial_loss = 0.0;
  double wall_seconds = 0.0;
  std::size_t steps = 0;
};

// Mean per-position cross-entropy over the given sequences, without gradients.
double evaluate_loss(Model& model, const SymbolDataset& data, std::span<const std::size_t> sequences,
                     std::size_t batch_size = 256);

class Trainer {
 public:
  Trainer(Model& model, const SymbolDataset& data, TrainConfig config);

  // One update; returns the per-position loss of the batch before the update.
  // Throws DivergenceError when the loss or gradient stops being finite or
  // the loss exceeds twice the initial loss after 10% of the steps.
  double step();
  bool done() const noexcept { return step_ >= config_.max_steps; }
  std::size_t steps_done() const noexcept { return step_; }
  double holdout_loss();
  const DatasetSplit& split() const noexcept { return split_; }
  const TrainReport& report() const noexcept { return report_; }
  TrainReport finish();

 private:
  Model* model_;
  const SymbolDataset* data_;
  TrainConfig config_;
  DatasetSplit split_;
  BatchSampler sampler_;
  AdamState adam_;
  TrainReport report_;
  std::size_t step_ = 0;
  double elapsed_ = 0.0;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

TrainReport train(Model& model, const SymbolDataset& data, const TrainConfig& config, const ProgressFn& progress = {});

void write_loss_csv(const TrainReport& report, const std::filesystem::path& path);

// Binary little-endian checkpoint: 16-byte header (magic, version, arch,
// tensor count, metadata length), metadata text, tensor records, CRC-32.
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra = {});
Model load_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string>* extra = nullptr);

}  // namespace flowsynth
