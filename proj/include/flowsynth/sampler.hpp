#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flowsynth/codec.hpp"
#include "flowsynth/models.hpp"

namespace flowsynth {

// Temperatures below this select the most likely symbol.
inline constexpr double kGreedyTemperature = 1e-6;

// Sequences are generated in fixed-size chunks spread over the threads. Each
// sequence draws from its own stream keyed by its index, so output depends
// on neither thread count nor chunking.
inline constexpr std::size_t kSampleChunk = 256;

// softmax(logits / temperature) over the first `alphabet_size` entries; the
// start symbol and anything past it get probability zero.
std::vector<double> next_symbol_distribution(std::span<const float> logits, std::size_t alphabet_size,
                                             double temperature);

SymbolDataset sample_sequences(Model& model, const Codebook& codebook, std::size_t n, double temperature,
                               std::uint64_t seed, std::size_t threads = 1);

// Samples, decodes and writes a CSV with the codebook's feature columns.
FlowTable generate_flows(Model& model, const Codebook& codebook, std::size_t n, double temperature,
                         std::uint64_t seed, const std::filesystem::path& out_path, std::size_t threads = 1);

}  // namespace flowsynth
