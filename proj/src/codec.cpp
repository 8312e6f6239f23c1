#include "flowsynth/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

constexpr std::string_view kCodebookMagic = "codebook";
constexpr std::string_view kCodebookVersion = "v1";
constexpr std::string_view kSymbolsMagic = "symdata";

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) throw DataError("malformed number '" + s + "'");
  return v;
}

// Parses `key=value` into value when the token starts with key=.
bool take_field(std::string_view token, std::string_view key, std::string& value) {
  if (token.size() <= key.size() || token.substr(0, key.size()) != key || token[key.size()] != '=') return false;
  value = std::string(token.substr(key.size() + 1));
  return true;
}

long long parse_int(const std::string& s, std::string_view what) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') throw DataError("malformed " + std::string(what) + " '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

bool next_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

std::vector<double> equal_width_edges(double lo, double hi, int k) {
  std::vector<double> edges(static_cast<std::size_t>(k) + 1);
  for (int i = 0; i <= k; ++i) edges[i] = lo + i * (hi - lo) / k;
  edges.back() = hi;
  return edges;
}

std::vector<double> equal_frequency_edges(std::vector<double> values, int k) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  std::vector<double> edges;
  edges.reserve(static_cast<std::size_t>(k) + 1);
  edges.push_back(values.front());
  for (int i = 1; i < k; ++i) edges.push_back(values[static_cast<std::size_t>(i) * n / static_cast<std::size_t>(k)]);
  edges.push_back(values.back());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

}  // namespace

std::string_view to_string(BinningMode mode) noexcept {
  return mode == BinningMode::kEqualWidth ? "equalwidth" : "equalfreq";
}

BinningMode parse_binning_mode(std::string_view word) {
  if (word == "equalwidth") return BinningMode::kEqualWidth;
  if (word == "equalfreq") return BinningMode::kEqualFrequency;
  throw UsageError("unknown binning mode '" + std::string(word) + "' (expected equalwidth|equalfreq)");
}

Codebook::Codebook(int alphabet_size, BinningMode mode, std::vector<FeatureCodec> features)
    : k_(alphabet_size), mode_(mode), features_(std::move(features)) {
  if (k_ < 2) throw UsageError("alphabet size K must be at least 2, got " + std::to_string(k_));
  for (const auto& f : features_) {
    if (const auto* bins = std::get_if<NumericBins>(&f.spec)) {
      if (bins->edges.size() < 2 || bins->bins() > static_cast<std::size_t>(k_)) {
        throw DataError("feature '" + f.name + "': invalid edge count " + std::to_string(bins->edges.size()));
      }
      for (std::size_t i = 1; i < bins->edges.size(); ++i) {
        if (!(bins->edges[i] > bins->edges[i - 1])) {
          throw DataError("feature '" + f.name + "': edges not strictly ascending");
        }
      }
    } else {
      const auto& cats = std::get<CategoryMap>(f.spec).categories;
      if (cats.size() > static_cast<std::size_t>(k_ - 1)) {
        throw DataError("feature '" + f.name + "': too many dedicated categories");
      }
    }
  }
}

std::size_t Codebook::feature_index(std::string_view name) const {
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].name == name) return i;
  }
  throw DataError("feature '" + std::string(name) + "' not in codebook");
}

SymbolId Codebook::encode_value(std::size_t feature, double value) const {
  const auto& edges = std::get<NumericBins>(features_.at(feature).spec).edges;
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  const auto bin = static_cast<std::ptrdiff_t>(it - edges.begin()) - 1;
  const auto last = static_cast<std::ptrdiff_t>(edges.size()) - 2;
  return static_cast<SymbolId>(std::clamp<std::ptrdiff_t>(bin, 0, last));
}

SymbolId Codebook::encode_category(std::size_t feature, std::string_view category) const {
  const auto& cats = std::get<CategoryMap>(features_.at(feature).spec).categories;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    if (cats[i] == category) return static_cast<SymbolId>(i);
  }
  return overflow_symbol();
}

double Codebook::decode_value(std::size_t feature, SymbolId symbol) const {
  const auto& bins = std::get<NumericBins>(features_.at(feature).spec);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(symbol), bins.bins() - 1);
  return 0.5 * (bins.edges[i] + bins.edges[i + 1]);
}

const std::string& Codebook::decode_category(std::size_t feature, SymbolId symbol) const {
  const auto& cats = std::get<CategoryMap>(features_.at(feature).spec).categories;
  if (symbol >= 0 && static_cast<std::size_t>(symbol) < cats.size()) return cats[static_cast<std::size_t>(symbol)];
  return overflow_;
}

Codebook fit_codebook(const FlowTable& table, const std::vector<std::string>& features, int alphabet_size,
                      BinningMode mode) {
  if (alphabet_size < 2) throw UsageError("alphabet size K must be at least 2, got " + std::to_string(alphabet_size));
  if (features.empty()) throw UsageError("no features selected");
  if (table.rows() == 0) throw DataError("cannot fit a codebook on an empty table");
  std::vector<FeatureCodec> codecs;
  for (const auto& name : features) {
    const auto& spec = table.column(name);
    if (spec.is_numeric()) {
      auto values = table.numeric_column(name);
      const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
      if (spec.constant || !(*hi > *lo)) {
        throw DataError("feature '" + name + "' is constant; exclude it before encoding");
      }
      NumericBins bins;
      bins.edges = mode == BinningMode::kEqualWidth ? equal_width_edges(*lo, *hi, alphabet_size)
                                                    : equal_frequency_edges(std::move(values), alphabet_size);
      codecs.push_back({name, std::move(bins)});
    } else {
      std::map<std::string, std::size_t, std::less<>> counts;
      for (const auto& cell : table.categorical(spec.slot)) ++counts[cell];
      std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
      // Most frequent first; the map order already breaks ties lexicographically.
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const auto& a, const auto& b) { return a.second > b.second; });
      CategoryMap map;
      const std::size_t keep = std::min(ranked.size(), static_cast<std::size_t>(alphabet_size - 1));
      for (std::size_t i = 0; i < keep; ++i) map.categories.push_back(ranked[i].first);
      codecs.push_back({name, std::move(map)});
    }
  }
  return Codebook(alphabet_size, mode, std::move(codecs));
}

SymbolDataset encode(const FlowTable& table, const Codebook& codebook) {
  const auto& feats = codebook.features();
  std::vector<const ColumnSpec*> columns;
  for (const auto& f : feats) {
    const auto& spec = table.column(f.name);
    if (spec.is_numeric() != f.is_numeric()) {
      throw DataError("column '" + f.name + "' kind does not match the codebook");
    }
    columns.push_back(&spec);
  }
  SymbolDataset out;
  out.vocab_size = codebook.vocab_size();
  out.length = codebook.sequence_length();
  out.ids.resize(table.rows() * out.length);
  for (std::size_t r = 0; r < table.rows(); ++r) {
    SymbolId* seq = out.ids.data() + r * out.length;
    seq[0] = codebook.start_symbol();
    for (std::size_t f = 0; f < feats.size(); ++f) {
      const auto& spec = *columns[f];
      seq[f + 1] = spec.is_numeric() ? codebook.encode_value(f, table.numeric(r, spec.slot))
                                     : codebook.encode_category(f, table.categorical(spec.slot)[r]);
    }
  }
  return out;
}

std::string validate_sequence(std::span<const SymbolId> sequence, const Codebook& codebook) {
  if (sequence.size() != codebook.sequence_length()) {
    return "length " + std::to_string(sequence.size()) + ", expected " + std::to_string(codebook.sequence_length());
  }
  if (sequence[0] != codebook.start_symbol()) return "position 0 is not the start symbol";
  for (std::size_t i = 1; i < sequence.size(); ++i) {
    if (sequence[i] == codebook.start_symbol()) return "start symbol at position " + std::to_string(i);
    if (sequence[i] < 0 || sequence[i] >= codebook.alphabet_size()) {
      return "symbol " + std::to_string(sequence[i]) + " out of range at position " + std::to_string(i);
    }
  }
  return {};
}

DecodedFlows decode(const SymbolDataset& dataset, const Codebook& codebook) {
  const auto& feats = codebook.features();
  DecodedFlows result;
  std::vector<std::vector<double>> numeric(feats.size());
  std::vector<std::vector<std::string>> categorical(feats.size());
  const std::size_t n = dataset.length ? dataset.ids.size() / dataset.length : 0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto seq = dataset.sequence(s);
    if (auto problem = validate_sequence(seq, codebook); !problem.empty()) {
      ++result.skipped;
      result.problems.push_back("sequence " + std::to_string(s) + ": " + problem);
      continue;
    }
    for (std::size_t f = 0; f < feats.size(); ++f) {
      if (feats[f].is_numeric()) {
        numeric[f].push_back(codebook.decode_value(f, seq[f + 1]));
      } else {
        categorical[f].push_back(codebook.decode_category(f, seq[f + 1]));
      }
    }
  }
  std::vector<FlowTable::Column> columns;
  for (std::size_t f = 0; f < feats.size(); ++f) {
    if (feats[f].is_numeric()) {
      columns.push_back({feats[f].name, ColumnKind::kNumeric, std::move(numeric[f])});
    } else {
      columns.push_back({feats[f].name, ColumnKind::kCategorical, std::move(categorical[f])});
    }
  }
  result.table = FlowTable::from_columns(std::move(columns));
  return result;
}

void save_codebook(const Codebook& codebook, std::ostream& out) {
  out << kCodebookMagic << ' ' << kCodebookVersion << " K=" << codebook.alphabet_size()
      << " mode=" << to_string(codebook.mode()) << '\n';
  out << "features=" << codebook.features().size() << '\n';
  for (const auto& f : codebook.features()) {
    if (f.name.find_first_of("\t\n\r") != std::string::npos) {
      throw DataError("feature name contains a tab or newline: '" + f.name + "'");
    }
    if (const auto* bins = std::get_if<NumericBins>(&f.spec)) {
      out << "numeric\t" << f.name << '\t' << bins->edges.size() << '\n';
      for (double e : bins->edges) out << hex_double(e) << '\n';
    } else {
      const auto& cats = std::get<CategoryMap>(f.spec).categories;
      out << "categorical\t" << f.name << '\t' << cats.size() << '\n';
      for (std::size_t i = 0; i < cats.size(); ++i) {
        if (cats[i].find_first_of("\t\n\r") != std::string::npos) {
          throw DataError("category contains a tab or newline in feature '" + f.name + "'");
        }
        out << cats[i] << '\t' << i << '\n';
      }
    }
  }
  out << "end\n";
}

void save_codebook(const Codebook& codebook, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  save_codebook(codebook, out);
  if (!out) throw DataError("write failed: " + path.string());
}

Codebook load_codebook(std::istream& in) {
  std::string line;
  if (!next_line(in, line)) throw DataError("malformed codebook: empty file");
  const auto head = split(line, ' ');
  if (head.size() != 4 || head[0] != kCodebookMagic) throw DataError("malformed codebook header: '" + line + "'");
  if (head[1] != kCodebookVersion) {
    throw DataError("codebook version mismatch: found " + head[1] + ", expected " + std::string(kCodebookVersion));
  }
  std::string k_text, mode_text;
  if (!take_field(head[2], "K", k_text) || !take_field(head[3], "mode", mode_text)) {
    throw DataError("malformed codebook header: '" + line + "'");
  }
  const int k = static_cast<int>(parse_int(k_text, "K"));
  BinningMode mode;
  try {
    mode = parse_binning_mode(mode_text);
  } catch (const UsageError&) {
    throw DataError("malformed codebook mode '" + mode_text + "'");
  }
  std::string count_text;
  if (!next_line(in, line) || !take_field(line, "features", count_text)) {
    throw DataError("malformed codebook: missing features= line");
  }
  const auto n_features = parse_int(count_text, "feature count");
  std::vector<FeatureCodec> features;
  for (long long f = 0; f < n_features; ++f) {
    if (!next_line(in, line)) throw DataError("malformed codebook: truncated");
    const auto parts = split(line, '\t');
    if (parts.size() != 3) throw DataError("malformed codebook feature line: '" + line + "'");
    const auto count = parse_int(parts[2], "count");
    if (count < 0) throw DataError("malformed codebook: negative count");
    if (parts[0] == "numeric") {
      NumericBins bins;
      for (long long i = 0; i < count; ++i) {
        if (!next_line(in, line)) throw DataError("malformed codebook: truncated edges");
        bins.edges.push_back(parse_hex_double(line));
      }
      features.push_back({parts[1], std::move(bins)});
    } else if (parts[0] == "categorical") {
      CategoryMap map;
      for (long long i = 0; i < count; ++i) {
        if (!next_line(in, line)) throw DataError("malformed codebook: truncated categories");
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos || parse_int(line.substr(tab + 1), "symbol id") != i) {
          throw DataError("malformed codebook category line: '" + line + "'");
        }
        map.categories.push_back(line.substr(0, tab));
      }
      features.push_back({parts[1], std::move(map)});
    } else {
      throw DataError("malformed codebook: unknown feature kind '" + parts[0] + "'");
    }
  }
  if (!next_line(in, line) || line != "end") throw DataError("malformed codebook: missing end marker");
  return Codebook(k, mode, std::move(features));
}

Codebook load_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open codebook " + path.string());
  return load_codebook(in);
}

void save_symbols(const SymbolDataset& data, int alphabet_size, std::ostream& out) {
  out << kSymbolsMagic << " v1 n=" << data.size() << " len=" << data.length << " K=" << alphabet_size << '\n';
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto seq = data.sequence(s);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
}

void save_symbols(const SymbolDataset& data, int alphabet_size, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  save_symbols(data, alphabet_size, out);
  if (!out) throw DataError("write failed: " + path.string());
}

SymbolDataset load_symbols(std::istream& in) {
  std::string line;
  if (!next_line(in, line)) throw DataError("malformed symbol file: empty");
  const auto head = split(line, ' ');
  std::string n_text, len_text, k_text;
  if (head.size() != 5 || head[0] != kSymbolsMagic || !take_field(head[2], "n", n_text) ||
      !take_field(head[3], "len", len_text) || !take_field(head[4], "K", k_text)) {
    throw DataError("malformed symbol file header: '" + line + "'");
  }
  if (head[1] != "v1") throw DataError("symbol file version mismatch: found " + head[1] + ", expected v1");
  const auto n = parse_int(n_text, "n");
  const auto len = parse_int(len_text, "len");
  const auto k = parse_int(k_text, "K");
  if (n < 0 || len < 1 || k < 2) throw DataError("malformed symbol file header: '" + line + "'");
  SymbolDataset data;
  data.vocab_size = static_cast<int>(k + 1);
  data.length = static_cast<std::size_t>(len);
  data.ids.reserve(static_cast<std::size_t>(n * len));
  for (long long s = 0; s < n; ++s) {
    if (!next_line(in, line)) throw DataError("symbol file truncated at sequence " + std::to_string(s));
    std::istringstream row(line);
    long long id;
    long long count = 0;
    while (row >> id) {
      if (id < 0 || id > k) throw DataError("symbol id " + std::to_string(id) + " out of range");
      data.ids.push_back(static_cast<SymbolId>(id));
      ++count;
    }
    if (count != len) throw DataError("sequence " + std::to_string(s) + " has " + std::to_string(count) + " ids");
  }
  return data;
}

SymbolDataset load_symbols(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open symbol file " + path.string());
  return load_symbols(in);
}

}  // namespace flowsynth
