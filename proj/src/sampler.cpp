#include "flowsynth/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <stdexcept>
#include <thread>

#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

std::int32_t draw(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cumulative += probs[i];
    if (u < cumulative) return static_cast<std::int32_t>(i);
  }
  // Rounding left u above the final partial sum; take the last non-zero entry.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<std::int32_t>(i);
  return 0;
}

void sample_chunk(Model& model, const Codebook& codebook, double temperature, const Rng& master, std::size_t first,
                  std::size_t count, std::int32_t* out) {
  const std::size_t length = codebook.sequence_length();
  const std::size_t alphabet = static_cast<std::size_t>(codebook.alphabet_size());
  const std::size_t vocab = model.config.vocab_size;
  std::vector<Rng> rngs;
  rngs.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    out[b * length] = codebook.start_symbol();
    rngs.push_back(master.split(first + b));
  }
  NoGradGuard guard;
  TokenBatch prefix;
  prefix.batch = count;
  for (std::size_t t = 1; t < length; ++t) {
    prefix.steps = t;
    prefix.ids.resize(count * t);
    for (std::size_t b = 0; b < count; ++b) std::copy_n(out + b * length, t, prefix.ids.begin() + b * t);
    const Tensor logits = model.forward(prefix, NormMode::kEval);
    const auto values = logits.data();
    for (std::size_t b = 0; b < count; ++b) {
      const auto row = values.subspan((b * t + t - 1) * vocab, vocab);
      const auto probs = next_symbol_distribution(row, alphabet, temperature);
      std::int32_t id;
      if (temperature < kGreedyTemperature) {
        id = static_cast<std::int32_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      } else {
        id = draw(probs, rngs[b]);
      }
      out[b * length + t] = id;
    }
  }
}

}  // namespace

std::vector<double> next_symbol_distribution(std::span<const float> logits, std::size_t alphabet_size,
                                             double temperature) {
  if (alphabet_size == 0 || alphabet_size > logits.size()) throw std::invalid_argument("bad alphabet size for logits");
  std::vector<double> probs(alphabet_size, 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < alphabet_size; ++i) {
    if (std::isnan(logits[i])) throw std::invalid_argument("NaN logit while sampling");
    mx = std::max(mx, static_cast<double>(logits[i]));
  }
  if (temperature < kGreedyTemperature) {
    for (std::size_t i = 0; i < alphabet_size; ++i) {
      if (logits[i] == mx) {
        probs[i] = 1.0;
        break;
      }
    }
    return probs;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < alphabet_size; ++i) {
    probs[i] = std::exp((logits[i] - mx) / temperature);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

SymbolDataset sample_sequences(Model& model, const Codebook& codebook, std::size_t n, double temperature,
                               std::uint64_t seed, std::size_t threads) {
  if (model.config.vocab_size != static_cast<std::size_t>(codebook.vocab_size())) {
    throw UsageError("model vocabulary " + std::to_string(model.config.vocab_size) + " does not match codebook (" +
                     std::to_string(codebook.vocab_size()) + ")");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw UsageError("temperature must be positive");
  const std::size_t length = codebook.sequence_length();
  if (model.config.arch != Arch::kRnn && model.config.context_length < length - 1) {
    throw UsageError("model context length " + std::to_string(model.config.context_length) +
                     " is shorter than the codebook's sequences need (" + std::to_string(length - 1) + ")");
  }
  SymbolDataset out;
  out.vocab_size = codebook.vocab_size();
  out.length = length;
  out.ids.assign(n * length, 0);
  const std::size_t chunks = (n + kSampleChunk - 1) / kSampleChunk;
  const Rng master(derive_seed(seed, "sample"));
  auto run = [&](std::size_t c) {
    const std::size_t begin = c * kSampleChunk;
    const std::size_t count = std::min(kSampleChunk, n - begin);
    sample_chunk(model, codebook, temperature, master, begin, count, out.ids.data() + begin * length);
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += threads) run(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

FlowTable generate_flows(Model& model, const Codebook& codebook, std::size_t n, double temperature,
                         std::uint64_t seed, const std::filesystem::path& out_path, std::size_t threads) {
  const SymbolDataset seqs = sample_sequences(model, codebook, n, temperature, seed, threads);
  DecodedFlows decoded = decode(seqs, codebook);
  if (decoded.skipped != 0) {
    throw std::logic_error("sampler produced a malformed sequence: " + decoded.problems.front());
  }
  write_csv(decoded.table, out_path);
  return std::move(decoded.table);
}

}  // namespace flowsynth
