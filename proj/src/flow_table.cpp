#include "flowsynth/flow_table.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

constexpr double kNumericShare = 0.99;

constexpr std::array<std::string_view, 6> kFlagNames = {"URG", "ACK", "PSH", "RST", "SYN", "FIN"};
constexpr std::array<char, 6> kFlagLetters = {'U', 'A', 'P', 'R', 'S', 'F'};

std::string_view trim(std::string_view s) noexcept {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

bool parse_finite(std::string_view text, double& value) noexcept {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  if (text.empty()) return false;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  return ec == std::errc() && ptr == text.data() + text.size() && std::isfinite(value);
}

struct CsvField {
  std::string text;
  bool quoted = false;
};

// Reads one RFC 4180 record. Returns false at end of input.
bool read_record(std::istream& in, std::vector<CsvField>& fields, std::size_t& line) {
  fields.clear();
  int c = in.get();
  if (c == EOF) return false;
  ++line;
  CsvField field;
  bool in_quotes = false;
  bool after_quote = false;
  while (true) {
    if (c == EOF) {
      if (in_quotes) throw DataError("line " + std::to_string(line) + ": unterminated quoted field");
      break;
    }
    const char ch = static_cast<char>(c);
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get();
          field.text.push_back('"');
        } else {
          in_quotes = false;
          after_quote = true;
        }
      } else {
        if (ch == '\n') ++line;
        field.text.push_back(ch);
      }
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field = CsvField{};
      after_quote = false;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && in.peek() == '\n') in.get();
      break;
    } else if (ch == '"' && !after_quote && trim(field.text).empty()) {
      field.text.clear();
      field.quoted = true;
      in_quotes = true;
    } else if (!after_quote || (ch != ' ' && ch != '\t')) {
      field.text.push_back(ch);
    }
    c = in.get();
  }
  fields.push_back(std::move(field));
  for (auto& f : fields) {
    if (!f.quoted) f.text = std::string(trim(f.text));
  }
  return true;
}

bool is_blank_record(const std::vector<CsvField>& fields) {
  return fields.size() == 1 && !fields[0].quoted && fields[0].text.empty();
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

bool needs_quotes(std::string_view s) {
  if (s.empty()) return false;
  if (s.front() == ' ' || s.back() == ' ' || s.front() == '\t' || s.back() == '\t') return true;
  return s.find_first_of(",\"\r\n") != std::string_view::npos;
}

void write_field(std::ostream& out, std::string_view s) {
  if (!needs_quotes(s)) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

double flag_bit(std::string_view cell, std::size_t bit) {
  cell = trim(cell);
  if (cell.size() == kFlagLetters.size()) {
    return (cell[bit] != '.' && cell[bit] != '0') ? 1.0 : 0.0;
  }
  return cell.find(kFlagLetters[bit]) != std::string_view::npos ? 1.0 : 0.0;
}

}  // namespace

std::string_view to_string(ColumnKind kind) noexcept {
  switch (kind) {
    case ColumnKind::kNumeric:
      return "Numeric";
    case ColumnKind::kCategorical:
      return "Categorical";
    case ColumnKind::kTimestamp:
      return "Timestamp";
  }
  return "?";
}

bool parse_timestamp(std::string_view text, double& seconds) noexcept {
  text = trim(text);
  // YYYY-MM-DD HH:MM:SS[.fff]
  if (text.size() < 19) return false;
  auto digits = [&](std::size_t pos, std::size_t n, int& out) {
    out = 0;
    for (std::size_t i = pos; i < pos + n; ++i) {
      if (text[i] < '0' || text[i] > '9') return false;
      out = out * 10 + (text[i] - '0');
    }
    return true;
  };
  int year, month, day, hour, minute, second;
  if (!digits(0, 4, year) || text[4] != '-' || !digits(5, 2, month) || text[7] != '-' ||
      !digits(8, 2, day) || text[10] != ' ' || !digits(11, 2, hour) || text[13] != ':' ||
      !digits(14, 2, minute) || text[16] != ':' || !digits(17, 2, second)) {
    return false;
  }
  if (month < 1 || month > 12 || day < 1 || day > 31 || hour > 23 || minute > 59 || second > 60) {
    return false;
  }
  double fraction = 0.0;
  if (text.size() > 19) {
    if (text[19] != '.' || text.size() == 20) return false;
    double scale = 0.1;
    for (std::size_t i = 20; i < text.size(); ++i) {
      if (text[i] < '0' || text[i] > '9') return false;
      fraction += (text[i] - '0') * scale;
      scale *= 0.1;
    }
  }
  seconds = hour * 3600.0 + minute * 60.0 + second + fraction;
  return true;
}

std::string format_timestamp(double seconds) {
  const auto micros = static_cast<long long>(std::llround(seconds * 1e6));
  const long long whole = micros / 1000000;
  const long long frac = micros % 1000000;
  char buf[64];
  std::snprintf(buf, sizeof buf, "1970-01-01 %02lld:%02lld:%02lld.%06lld", whole / 3600,
                (whole / 60) % 60, whole % 60, frac);
  return buf;
}

FlowTable FlowTable::from_columns(std::vector<Column> columns) {
  FlowTable t;
  if (columns.empty()) return t;
  std::set<std::string, std::less<>> names;
  std::size_t rows = std::visit([](const auto& v) { return v.size(); }, columns.front().values);
  std::vector<const std::vector<double>*> numeric_cols;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    auto& col = columns[i];
    if (!names.insert(col.name).second) throw DataError("duplicate column name '" + col.name + "'");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, col.values);
    if (n != rows) throw DataError("column '" + col.name + "' has " + std::to_string(n) + " rows, expected " + std::to_string(rows));
    ColumnSpec spec{col.name, col.kind, i, 0, false};
    if (col.kind == ColumnKind::kCategorical) {
      auto* cats = std::get_if<std::vector<std::string>>(&col.values);
      if (cats == nullptr) throw DataError("categorical column '" + col.name + "' holds numbers");
      spec.slot = t.categorical_.size();
      t.categorical_.push_back(std::move(*cats));
    } else {
      auto* nums = std::get_if<std::vector<double>>(&col.values);
      if (nums == nullptr) throw DataError("numeric column '" + col.name + "' holds strings");
      for (double v : *nums) {
        if (!std::isfinite(v)) throw DataError("non-finite value in column '" + col.name + "'");
      }
      spec.slot = numeric_cols.size();
      numeric_cols.push_back(nums);
    }
    t.schema_.push_back(std::move(spec));
  }
  t.rows_ = rows;
  t.numeric_width_ = numeric_cols.size();
  t.numeric_.resize(rows * t.numeric_width_);
  for (std::size_t c = 0; c < numeric_cols.size(); ++c) {
    for (std::size_t r = 0; r < rows; ++r) t.numeric_[r * t.numeric_width_ + c] = (*numeric_cols[c])[r];
  }
  return t;
}

const ColumnSpec* FlowTable::find(std::string_view name) const noexcept {
  for (const auto& c : schema_) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

const ColumnSpec& FlowTable::column(std::string_view name) const {
  const auto* c = find(name);
  if (c == nullptr) throw DataError("unknown column '" + std::string(name) + "'");
  return *c;
}

std::vector<double> FlowTable::numeric_column(std::string_view name) const {
  const auto& c = column(name);
  if (!c.is_numeric()) throw DataError("column '" + c.name + "' is not numeric");
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = numeric(r, c.slot);
  return out;
}

const std::vector<std::string>& FlowTable::categorical_column(std::string_view name) const {
  const auto& c = column(name);
  if (c.is_numeric()) throw DataError("column '" + c.name + "' is not categorical");
  return categorical_[c.slot];
}

FlowTable FlowTable::select_rows(const std::vector<std::size_t>& rows) const {
  FlowTable t;
  t.schema_ = schema_;
  t.numeric_width_ = numeric_width_;
  t.rows_ = rows.size();
  t.numeric_.reserve(rows.size() * numeric_width_);
  for (auto r : rows) {
    if (r >= rows_) throw DataError("row index out of range");
    t.numeric_.insert(t.numeric_.end(), numeric_.begin() + r * numeric_width_,
                      numeric_.begin() + (r + 1) * numeric_width_);
  }
  t.categorical_.resize(categorical_.size());
  for (std::size_t c = 0; c < categorical_.size(); ++c) {
    t.categorical_[c].reserve(rows.size());
    for (auto r : rows) t.categorical_[c].push_back(categorical_[c][r]);
  }
  return t;
}

SchemaHints parse_schema_hints(std::istream& in) {
  SchemaHints hints;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.rfind('=');
    if (eq == std::string_view::npos) {
      throw DataError("schema hint line " + std::to_string(line_no) + ": expected name=Kind");
    }
    const std::string name(trim(body.substr(0, eq)));
    const auto kind = trim(body.substr(eq + 1));
    ColumnHint hint;
    if (kind == "Numeric") {
      hint = ColumnHint::kNumeric;
    } else if (kind == "Categorical") {
      hint = ColumnHint::kCategorical;
    } else if (kind == "Timestamp") {
      hint = ColumnHint::kTimestamp;
    } else if (kind == "ExplodeFlags") {
      hint = ColumnHint::kExplodeFlags;
    } else {
      throw DataError("schema hint line " + std::to_string(line_no) + ": unknown kind '" + std::string(kind) + "'");
    }
    hints[name] = hint;
  }
  return hints;
}

SchemaHints load_schema_hints(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema hint file " + path.string());
  return parse_schema_hints(in);
}

const SchemaHints& default_schema_hints() {
  static const SchemaHints hints = {
      {"Source Port", ColumnHint::kCategorical},
      {"Destination Port", ColumnHint::kCategorical},
      {"Src Port", ColumnHint::kCategorical},
      {"Dst Port", ColumnHint::kCategorical},
      {"src_port", ColumnHint::kCategorical},
      {"dst_port", ColumnHint::kCategorical},
      {"Transport Protocol", ColumnHint::kCategorical},
      {"Protocol", ColumnHint::kCategorical},
  };
  return hints;
}

LoadedTable load_csv(const std::filesystem::path& path, const SchemaHints& hints) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string() + ": no such file");
  return parse_csv(in, hints);
}

LoadedTable parse_csv(std::istream& in, const SchemaHints& hints) {
  std::vector<CsvField> fields;
  std::size_t line = 0;
  if (!read_record(in, fields, line)) throw DataError("empty file: no header row");
  std::vector<std::string> header;
  for (auto& f : fields) header.push_back(std::move(f.text));
  if (!header.empty() && header[0].starts_with("\xEF\xBB\xBF")) header[0].erase(0, 3);

  std::vector<std::vector<std::string>> cells;
  while (read_record(in, fields, line)) {
    if (is_blank_record(fields)) continue;
    if (fields.size() != header.size()) {
      throw DataError("line " + std::to_string(line) + ": " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(header.size()));
    }
    std::vector<std::string> row;
    row.reserve(fields.size());
    for (auto& f : fields) row.push_back(std::move(f.text));
    cells.push_back(std::move(row));
  }

  SchemaHints merged = default_schema_hints();
  for (const auto& [k, v] : hints) merged[k] = v;

  const std::size_t n_cols = header.size();
  const std::size_t n_rows = cells.size();
  std::vector<ColumnHint> kinds(n_cols);
  for (std::size_t c = 0; c < n_cols; ++c) {
    if (auto it = merged.find(header[c]); it != merged.end()) {
      kinds[c] = it->second;
      continue;
    }
    std::size_t non_empty = 0, numeric = 0, stamps = 0;
    for (const auto& row : cells) {
      const auto& cell = row[c];
      if (cell.empty()) continue;
      ++non_empty;
      double v;
      if (parse_finite(cell, v)) {
        ++numeric;
      } else if (parse_timestamp(cell, v)) {
        ++stamps;
      }
    }
    const double need = kNumericShare * static_cast<double>(non_empty);
    if (non_empty > 0 && static_cast<double>(numeric) >= need) {
      kinds[c] = ColumnHint::kNumeric;
    } else if (non_empty > 0 && static_cast<double>(stamps) >= need) {
      kinds[c] = ColumnHint::kTimestamp;
    } else {
      kinds[c] = ColumnHint::kCategorical;
    }
  }

  // Convert, dropping rows whose required numeric cells do not parse.
  std::vector<FlowTable::Column> columns;
  std::vector<std::size_t> source_index;
  for (std::size_t c = 0; c < n_cols; ++c) {
    switch (kinds[c]) {
      case ColumnHint::kNumeric:
        columns.push_back({header[c], ColumnKind::kNumeric, std::vector<double>{}});
        source_index.push_back(c);
        break;
      case ColumnHint::kTimestamp:
        columns.push_back({header[c], ColumnKind::kTimestamp, std::vector<double>{}});
        source_index.push_back(c);
        break;
      case ColumnHint::kCategorical:
        columns.push_back({header[c], ColumnKind::kCategorical, std::vector<std::string>{}});
        source_index.push_back(c);
        break;
      case ColumnHint::kExplodeFlags:
        for (auto flag : kFlagNames) {
          columns.push_back({header[c] + "." + std::string(flag), ColumnKind::kNumeric, std::vector<double>{}});
          source_index.push_back(c);
        }
        break;
    }
  }

  LoadStats stats;
  stats.rows_read = n_rows;
  std::vector<double> parsed(n_cols);
  for (const auto& row : cells) {
    bool ok = true;
    for (std::size_t c = 0; c < n_cols && ok; ++c) {
      if (kinds[c] == ColumnHint::kNumeric) {
        ok = parse_finite(row[c], parsed[c]);
      } else if (kinds[c] == ColumnHint::kTimestamp) {
        ok = parse_timestamp(row[c], parsed[c]);
      }
    }
    if (!ok) {
      ++stats.rows_dropped;
      continue;
    }
    std::size_t flag_bit_index = 0;
    for (std::size_t k = 0; k < columns.size(); ++k) {
      const std::size_t c = source_index[k];
      switch (kinds[c]) {
        case ColumnHint::kNumeric:
        case ColumnHint::kTimestamp:
          std::get<std::vector<double>>(columns[k].values).push_back(parsed[c]);
          break;
        case ColumnHint::kCategorical:
          std::get<std::vector<std::string>>(columns[k].values).push_back(row[c]);
          break;
        case ColumnHint::kExplodeFlags:
          std::get<std::vector<double>>(columns[k].values).push_back(flag_bit(row[c], flag_bit_index));
          flag_bit_index = (flag_bit_index + 1) % kFlagNames.size();
          break;
      }
    }
  }
  if (stats.rows_read == stats.rows_dropped) {
    throw DataError("all rows dropped (" + std::to_string(stats.rows_read) + " read)");
  }
  FlowTable table = FlowTable::from_columns(std::move(columns));
  return {std::move(table), stats};
}

void write_csv(const FlowTable& table, std::ostream& out) {
  const auto& schema = table.schema();
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (c) out << ',';
    write_field(out, schema[c].name);
  }
  out << '\n';
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < schema.size(); ++c) {
      if (c) out << ',';
      const auto& spec = schema[c];
      switch (spec.kind) {
        case ColumnKind::kNumeric:
          out << format_number(table.numeric(r, spec.slot));
          break;
        case ColumnKind::kTimestamp:
          out << format_timestamp(table.numeric(r, spec.slot));
          break;
        case ColumnKind::kCategorical:
          write_field(out, table.categorical(spec.slot)[r]);
          break;
      }
    }
    out << '\n';
  }
}

void write_csv(const FlowTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(table, out);
  if (!out) throw DataError("write failed: " + path.string());
}

CleanedTable clean(const FlowTable& table) {
  CleanedTable result{table, {}};
  FlowTable& t = result.table;
  for (auto& spec : t.schema_) {
    CleanStats::Entry entry{spec.name};
    if (spec.is_numeric()) {
      bool constant = true;
      const double first = t.rows_ ? t.numeric(0, spec.slot) : 0.0;
      for (std::size_t r = 1; r < t.rows_ && constant; ++r) constant = t.numeric(r, spec.slot) == first;
      spec.constant = constant;
      entry.flagged_constant = constant;
    } else {
      for (auto& cell : t.categorical_[spec.slot]) {
        if (cell.empty()) {
          cell = kEmptyCategory;
          ++entry.filled_empty;
        }
      }
    }
    if (entry.flagged_constant || entry.filled_empty > 0) result.stats.entries.push_back(std::move(entry));
  }
  return result;
}

std::string format_clean_report(const CleanStats& stats) {
  std::ostringstream out;
  out << "clean: rows_dropped=" << stats.rows_dropped << " flagged_columns=" << stats.entries.size() << '\n';
  for (const auto& e : stats.entries) {
    out << "  column '" << e.column << "'";
    if (e.flagged_constant) out << " constant (excluded from modeling)";
    if (e.filled_empty > 0) out << " empty_cells_filled=" << e.filled_empty;
    out << '\n';
  }
  return out.str();
}

}  // namespace flowsynth
