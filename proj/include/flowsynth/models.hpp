#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowsynth/ops.hpp"
#include "flowsynth/rng.hpp"
#include "flowsynth/tensor.hpp"

namespace flowsynth {

enum class Arch : std::uint16_t { kWaveNet = 1, kRnn = 2, kTransformer = 3 };

std::string_view to_string(Arch arch) noexcept;
// Accepts "wavenet", "rnn", "transformer"; throws UsageError otherwise.
Arch parse_arch(std::string_view text);

struct ModelConfig {
  Arch arch = Arch::kWaveNet;
  std::size_t vocab_size = 50;
  std::size_t context_length = 9;
  std::size_t embed_dim = 64;
  // WaveNet channel width, RNN state size, Transformer feed-forward inner size.
  std::size_t hidden_dim = 64;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t conv_kernel = 2;
  // Empty means 1, 2, 4, ... until the receptive field covers the context.
  std::vector<std::size_t> dilations;
  double eps_init = 1e-3;

  // Architecture defaults: WaveNet width 64, RNN state 128, Transformer
  // 4 blocks x 4 heads with a 4d feed-forward layer.
  static ModelConfig defaults(Arch arch, std::size_t vocab_size, std::size_t context_length);

  // Throws UsageError on inconsistent settings.
  void validate() const;
  std::vector<std::size_t> dilation_schedule() const;
  std::size_t receptive_field() const;

  bool operator==(const ModelConfig&) const = default;
};

// Named trainable tensors in a fixed order plus batch-norm running statistics.
struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::vector<RunningStats> running;

  void add(std::string name, Tensor tensor);
  const Tensor& get(std::string_view name) const;
  std::size_t size() const noexcept { return tensors.size(); }
  std::size_t numel() const noexcept;
  // Deep copy; the result shares no buffers with this object.
  ModelParams clone() const;
};

// Symbol ids laid out [batch, steps] row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::int32_t> ids;

  std::span<const std::int32_t> row(std::size_t b) const { return {ids.data() + b * steps, steps}; }
};

enum class InitKind { kTanh, kRelu, kLinear };

// Normal(0, gain^2 / fan_in): gain 5/3 for tanh, sqrt(2) for relu, 1 otherwise.
Tensor init_weight(Shape shape, std::size_t fan_in, InitKind kind, Rng& rng);

ModelParams init_params(const ModelConfig& config, Rng& rng);
std::size_t count_params(const ModelConfig& config);

// Each returns logits [B, T, V]. `mode` only affects WaveNet batch norm;
// Train mode updates the running statistics stored in `params`.
Tensor forward_wavenet(const ModelConfig& config, ModelParams& params, const TokenBatch& ids, NormMode mode);
Tensor forward_rnn(const ModelConfig& config, const ModelParams& params, const TokenBatch& ids);
Tensor forward_transformer(const ModelConfig& config, const ModelParams& params, const TokenBatch& ids);

struct Model {
  ModelConfig config;
  ModelParams params;

  static Model create(const ModelConfig& config, std::uint64_t seed);
  Tensor forward(const TokenBatch& ids, NormMode mode);
};

}  // namespace flowsynth
