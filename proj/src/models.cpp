#include "flowsynth/models.hpp"

#include <cmath>
#include <stdexcept>

#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

constexpr double kTanhGain = 5.0 / 3.0;

Tensor zeros(Shape shape) { return Tensor(std::move(shape), true); }

Tensor ones(std::size_t n) { return Tensor({n}, std::vector<float>(n, 1.0f), true); }

Tensor normal_table(Shape shape, double stddev, Rng& rng) {
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor uniform_table(Shape shape, double eps, Rng& rng) {
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<float>(rng.uniform(-eps, eps));
  return Tensor(std::move(shape), std::move(values), true);
}

std::string layer_name(std::string_view prefix, std::size_t i, std::string_view field) {
  return std::string(prefix) + std::to_string(i) + "." + std::string(field);
}

Tensor embed(const Tensor& table, const TokenBatch& ids) {
  const std::size_t d = table.dim(1);
  return reshape(embedding_lookup(table, ids.ids), {ids.batch, ids.steps, d});
}

void check_batch(const ModelConfig& config, const TokenBatch& ids, bool bounded) {
  if (ids.batch == 0 || ids.steps == 0 || ids.ids.size() != ids.batch * ids.steps) {
    throw std::invalid_argument("token batch shape [" + std::to_string(ids.batch) + "," + std::to_string(ids.steps) +
                                "] does not match " + std::to_string(ids.ids.size()) + " ids");
  }
  if (bounded && ids.steps > config.context_length) {
    throw std::invalid_argument("sequence length " + std::to_string(ids.steps) + " exceeds context length " +
                                std::to_string(config.context_length));
  }
}

}  // namespace

std::string_view to_string(Arch arch) noexcept {
  switch (arch) {
    case Arch::kWaveNet: return "wavenet";
    case Arch::kRnn: return "rnn";
    case Arch::kTransformer: return "transformer";
  }
  return "unknown";
}

Arch parse_arch(std::string_view text) {
  if (text == "wavenet") return Arch::kWaveNet;
  if (text == "rnn") return Arch::kRnn;
  if (text == "transformer") return Arch::kTransformer;
  throw UsageError("unknown architecture '" + std::string(text) + "' (expected wavenet, rnn or transformer)");
}

ModelConfig ModelConfig::defaults(Arch arch, std::size_t vocab_size, std::size_t context_length) {
  ModelConfig c;
  c.arch = arch;
  c.vocab_size = vocab_size;
  c.context_length = context_length;
  switch (arch) {
    case Arch::kWaveNet: c.hidden_dim = 64; break;
    case Arch::kRnn: c.hidden_dim = 128; break;
    case Arch::kTransformer: c.hidden_dim = 4 * c.embed_dim; break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("invalid model config: " + m); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (context_length < 1) fail("context_length must be at least 1");
  if (embed_dim < 1 || hidden_dim < 1) fail("dimensions must be positive");
  if (!(eps_init >= 0.0) || !std::isfinite(eps_init)) fail("eps_init must be finite and non-negative");
  if (arch == Arch::kTransformer) {
    if (n_blocks < 1) fail("n_blocks must be at least 1");
    if (n_heads < 1 || embed_dim % n_heads != 0) {
      fail("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
  if (arch == Arch::kWaveNet) {
    if (conv_kernel < 1) fail("conv_kernel must be at least 1");
    for (auto r : dilations)
      if (r < 1) fail("dilations must be positive");
    if (receptive_field() < context_length) {
      fail("receptive field " + std::to_string(receptive_field()) + " does not cover context length " +
           std::to_string(context_length));
    }
  }
}

std::vector<std::size_t> ModelConfig::dilation_schedule() const {
  if (!dilations.empty()) return dilations;
  std::vector<std::size_t> out;
  if (conv_kernel < 2) return {1};
  std::size_t field = 1;
  std::size_t r = 1;
  while (field < context_length || out.empty()) {
    out.push_back(r);
    field += (conv_kernel - 1) * r;
    r *= 2;
  }
  return out;
}

std::size_t ModelConfig::receptive_field() const {
  std::size_t field = 1;
  for (auto r : dilation_schedule()) field += (conv_kernel - 1) * r;
  return field;
}

void ModelParams::add(std::string name, Tensor tensor) {
  for (const auto& n : names)
    if (n == name) throw std::logic_error("duplicate parameter name " + name);
  names.push_back(std::move(name));
  tensors.push_back(std::move(tensor));
}

const Tensor& ModelParams::get(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return tensors[i];
  throw std::out_of_range("no parameter named " + std::string(name));
}

std::size_t ModelParams::numel() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.names = names;
  for (const auto& t : tensors) {
    Tensor copy = t.detach();
    copy.set_requires_grad(t.requires_grad());
    out.tensors.push_back(std::move(copy));
  }
  out.running = running;
  return out;
}

Tensor init_weight(Shape shape, std::size_t fan_in, InitKind kind, Rng& rng) {
  double gain = 1.0;
  if (kind == InitKind::kTanh) gain = kTanhGain;
  if (kind == InitKind::kRelu) gain = std::sqrt(2.0);
  return normal_table(std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)), rng);
}

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.embed_dim, h = config.hidden_dim;
  ModelParams p;
  p.add("embed", normal_table({v, d}, 1.0, rng));
  std::size_t out_width = d;
  switch (config.arch) {
    case Arch::kWaveNet: {
      const auto schedule = config.dilation_schedule();
      std::size_t cin = d;
      for (std::size_t l = 0; l < schedule.size(); ++l) {
        p.add(layer_name("conv", l, "weight"),
              init_weight({config.conv_kernel, cin, h}, config.conv_kernel * cin, InitKind::kTanh, rng));
        p.add(layer_name("conv", l, "bias"), zeros({h}));
        p.add(layer_name("bn", l, "gamma"), ones(h));
        p.add(layer_name("bn", l, "beta"), zeros({h}));
        p.running.emplace_back(h);
        cin = h;
      }
      out_width = h;
      break;
    }
    case Arch::kRnn:
      p.add("rnn.wx", init_weight({d, h}, d + h, InitKind::kTanh, rng));
      p.add("rnn.wh", init_weight({h, h}, d + h, InitKind::kTanh, rng));
      p.add("rnn.b", zeros({h}));
      out_width = h;
      break;
    case Arch::kTransformer:
      p.add("pos", normal_table({config.context_length, d}, 1.0, rng));
      for (std::size_t l = 0; l < config.n_blocks; ++l) {
        for (const char* proj : {"wq", "wk", "wv", "wo"}) {
          p.add(layer_name("block", l, std::string("attn.") + proj), init_weight({d, d}, d, InitKind::kLinear, rng));
          p.add(layer_name("block", l, std::string("attn.b") + (proj + 1)), zeros({d}));
        }
        p.add(layer_name("block", l, "ln1.gamma"), ones(d));
        p.add(layer_name("block", l, "ln1.beta"), zeros({d}));
        p.add(layer_name("block", l, "ffn.w1"), init_weight({d, h}, d, InitKind::kRelu, rng));
        p.add(layer_name("block", l, "ffn.b1"), zeros({h}));
        p.add(layer_name("block", l, "ffn.w2"), init_weight({h, d}, h, InitKind::kLinear, rng));
        p.add(layer_name("block", l, "ffn.b2"), zeros({d}));
        p.add(layer_name("block", l, "ln2.gamma"), ones(d));
        p.add(layer_name("block", l, "ln2.beta"), zeros({d}));
      }
      break;
  }
  p.add("out.weight", uniform_table({out_width, v}, config.eps_init, rng));
  p.add("out.bias", uniform_table({v}, config.eps_init, rng));
  return p;
}

std::size_t count_params(const ModelConfig& config) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.embed_dim, h = config.hidden_dim;
  std::size_t n = v * d;
  std::size_t out_width = d;
  switch (config.arch) {
    case Arch::kWaveNet: {
      std::size_t cin = d;
      for (std::size_t l = 0; l < config.dilation_schedule().size(); ++l) {
        n += config.conv_kernel * cin * h + 3 * h;
        cin = h;
      }
      out_width = h;
      break;
    }
    case Arch::kRnn:
      n += d * h + h * h + h;
      out_width = h;
      break;
    case Arch::kTransformer:
      n += config.context_length * d;
      n += config.n_blocks * (4 * (d * d + d) + 2 * d * h + h + d + 4 * d);
      break;
  }
  return n + out_width * v + v;
}

Tensor forward_wavenet(const ModelConfig& config, ModelParams& params, const TokenBatch& ids, NormMode mode) {
  check_batch(config, ids, true);
  const auto schedule = config.dilation_schedule();
  if (params.running.size() != schedule.size()) throw std::invalid_argument("wavenet running statistics missing");
  Tensor x = embed(params.get("embed"), ids);
  for (std::size_t l = 0; l < schedule.size(); ++l) {
    x = causal_conv1d(x, params.get(layer_name("conv", l, "weight")), schedule[l],
                      params.get(layer_name("conv", l, "bias")));
    x = tanh_act(x);
    x = batch_norm(x, params.get(layer_name("bn", l, "gamma")), params.get(layer_name("bn", l, "beta")), mode,
                   params.running[l]);
  }
  return linear(x, params.get("out.weight"), params.get("out.bias"));
}

Tensor forward_rnn(const ModelConfig& config, const ModelParams& params, const TokenBatch& ids) {
  check_batch(config, ids, false);
  Tensor x = embed(params.get("embed"), ids);
  Tensor h = rnn_tanh(x, params.get("rnn.wx"), params.get("rnn.wh"), params.get("rnn.b"));
  return linear(h, params.get("out.weight"), params.get("out.bias"));
}

Tensor forward_transformer(const ModelConfig& config, const ModelParams& params, const TokenBatch& ids) {
  check_batch(config, ids, true);
  const std::size_t d = config.embed_dim;
  std::vector<std::int32_t> positions(ids.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % ids.steps);
  Tensor x = add(embed(params.get("embed"), ids),
                 reshape(embedding_lookup(params.get("pos"), positions), {ids.batch, ids.steps, d}));
  for (std::size_t l = 0; l < config.n_blocks; ++l) {
    auto w = [&](std::string_view field) -> const Tensor& { return params.get(layer_name("block", l, field)); };
    Tensor q = linear(x, w("attn.wq"), w("attn.bq"));
    Tensor k = linear(x, w("attn.wk"), w("attn.bk"));
    Tensor v = linear(x, w("attn.wv"), w("attn.bv"));
    Tensor a = linear(causal_self_attention(q, k, v, config.n_heads), w("attn.wo"), w("attn.bo"));
    x = layer_norm(add(x, a), w("ln1.gamma"), w("ln1.beta"));
    Tensor f = linear(relu_act(linear(x, w("ffn.w1"), w("ffn.b1"))), w("ffn.w2"), w("ffn.b2"));
    x = layer_norm(add(x, f), w("ln2.gamma"), w("ln2.beta"));
  }
  return linear(x, params.get("out.weight"), params.get("out.bias"));
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init"));
  return Model{config, init_params(config, rng)};
}

Tensor Model::forward(const TokenBatch& ids, NormMode mode) {
  switch (config.arch) {
    case Arch::kWaveNet: return forward_wavenet(config, params, ids, mode);
    case Arch::kRnn: return forward_rnn(config, params, ids);
    case Arch::kTransformer: return forward_transformer(config, params, ids);
  }
  throw std::logic_error("unknown architecture");
}

}  // namespace flowsynth
