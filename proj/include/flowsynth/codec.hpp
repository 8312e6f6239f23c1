#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "flowsynth/flow_table.hpp"

namespace flowsynth {

using SymbolId = std::int32_t;

enum class BinningMode { kEqualWidth, kEqualFrequency };

std::string_view to_string(BinningMode mode) noexcept;
// Accepts "equalwidth" / "equalfreq".
BinningMode parse_binning_mode(std::string_view word);

inline constexpr int kDefaultAlphabetSize = 49;
inline constexpr std::string_view kOverflowCategory = "OTHER";

// Ascending bin edges; after collapsing duplicate quantiles a feature may use
// fewer than K bins.
struct NumericBins {
  std::vector<double> edges;

  std::size_t bins() const noexcept { return edges.size() - 1; }
  bool operator==(const NumericBins&) const = default;
};

// categories[i] owns symbol i. Everything else shares the overflow symbol K-1.
struct CategoryMap {
  std::vector<std::string> categories;
  bool operator==(const CategoryMap&) const = default;
};

struct FeatureCodec {
  std::string name;
  std::variant<NumericBins, CategoryMap> spec;

  bool is_numeric() const noexcept { return std::holds_alternative<NumericBins>(spec); }
  bool operator==(const FeatureCodec&) const = default;
};

// Maps each selected feature onto a shared alphabet of K value symbols plus
// a start symbol with id K. Position in the sequence identifies the feature.
class Codebook {
 public:
  Codebook() = default;
  Codebook(int alphabet_size, BinningMode mode, std::vector<FeatureCodec> features);

  int alphabet_size() const noexcept { return k_; }
  SymbolId start_symbol() const noexcept { return k_; }
  int vocab_size() const noexcept { return k_ + 1; }
  SymbolId overflow_symbol() const noexcept { return k_ - 1; }
  BinningMode mode() const noexcept { return mode_; }
  const std::vector<FeatureCodec>& features() const noexcept { return features_; }
  std::size_t sequence_length() const noexcept { return features_.size() + 1; }

  std::size_t feature_index(std::string_view name) const;

  // Total: values outside the fitted range clamp to the edge bins and
  // unseen categories map to the overflow symbol.
  SymbolId encode_value(std::size_t feature, double value) const;
  SymbolId encode_category(std::size_t feature, std::string_view category) const;

  // Numeric symbols decode to bin midpoints; symbols past a collapsed
  // feature's last bin decode to that last bin.
  double decode_value(std::size_t feature, SymbolId symbol) const;
  const std::string& decode_category(std::size_t feature, SymbolId symbol) const;

  bool operator==(const Codebook&) const = default;

 private:
  int k_ = kDefaultAlphabetSize;
  BinningMode mode_ = BinningMode::kEqualFrequency;
  std::vector<FeatureCodec> features_;
  std::string overflow_ = std::string(kOverflowCategory);
};

// Encoded corpus: n sequences of equal length stored row-major.
struct SymbolDataset {
  int vocab_size = 0;
  std::size_t length = 0;
  std::vector<SymbolId> ids;

  std::size_t size() const noexcept { return length ? ids.size() / length : 0; }
  std::span<const SymbolId> sequence(std::size_t i) const { return {ids.data() + i * length, length}; }
  bool operator==(const SymbolDataset&) const = default;
};

Codebook fit_codebook(const FlowTable& table, const std::vector<std::string>& features,
                      int alphabet_size = kDefaultAlphabetSize,
                      BinningMode mode = BinningMode::kEqualFrequency);

SymbolDataset encode(const FlowTable& table, const Codebook& codebook);

struct DecodedFlows {
  FlowTable table;
  std::size_t skipped = 0;
  std::vector<std::string> problems;  // one message per skipped sequence
};

DecodedFlows decode(const SymbolDataset& dataset, const Codebook& codebook);

// Empty string when the sequence is well-formed, otherwise the reason.
std::string validate_sequence(std::span<const SymbolId> sequence, const Codebook& codebook);

void save_codebook(const Codebook& codebook, std::ostream& out);
void save_codebook(const Codebook& codebook, const std::filesystem::path& path);
Codebook load_codebook(std::istream& in);
Codebook load_codebook(const std::filesystem::path& path);

void save_symbols(const SymbolDataset& data, int alphabet_size, std::ostream& out);
void save_symbols(const SymbolDataset& data, int alphabet_size, const std::filesystem::path& path);
SymbolDataset load_symbols(std::istream& in);
SymbolDataset load_symbols(const std::filesystem::path& path);

}  // namespace flowsynth
