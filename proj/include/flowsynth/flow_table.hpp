#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace flowsynth {

enum class ColumnKind { kNumeric, kCategorical, kTimestamp };

std::string_view to_string(ColumnKind kind) noexcept;

struct CleanedTable;

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  // Ordinal position of the originating column in the source CSV.
  std::size_t index = 0;
  // Position inside the numeric matrix (Numeric/Timestamp) or the categorical store.
  std::size_t slot = 0;
  // Set by clean(): zero-variance numeric column, kept in the schema but not modeled.
  bool constant = false;

  bool is_numeric() const noexcept { return kind != ColumnKind::kCategorical; }
  bool operator==(const ColumnSpec&) const = default;
};

// Sentinel category for empty cells.
inline constexpr std::string_view kEmptyCategory = "\xE2\x88\x85";  // U+2205

// A parsed flow table. Numeric and timestamp columns live in one row-major
// matrix (timestamps as seconds since midnight); categorical columns are
// stored column-wise as strings.
class FlowTable {
 public:
  using ColumnData = std::variant<std::vector<double>, std::vector<std::string>>;

  struct Column {
    std::string name;
    ColumnKind kind;
    ColumnData values;
  };

  FlowTable() = default;

  // Builds a table from whole columns. All columns must have equal length,
  // names must be unique and values finite.
  static FlowTable from_columns(std::vector<Column> columns);

  const std::vector<ColumnSpec>& schema() const noexcept { return schema_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t numeric_width() const noexcept { return numeric_width_; }
  const std::vector<double>& numeric_data() const noexcept { return numeric_; }

  double numeric(std::size_t row, std::size_t slot) const { return numeric_[row * numeric_width_ + slot]; }
  const std::vector<std::string>& categorical(std::size_t slot) const { return categorical_.at(slot); }

  const ColumnSpec* find(std::string_view name) const noexcept;
  // Throws DataError for unknown names.
  const ColumnSpec& column(std::string_view name) const;

  std::vector<double> numeric_column(std::string_view name) const;
  const std::vector<std::string>& categorical_column(std::string_view name) const;

  // Returns a table holding only the listed rows, in the given order.
  FlowTable select_rows(const std::vector<std::size_t>& rows) const;

  bool operator==(const FlowTable&) const = default;

 private:
  friend CleanedTable clean(const FlowTable& table);

  std::vector<ColumnSpec> schema_;
  std::vector<double> numeric_;
  std::size_t numeric_width_ = 0;
  std::vector<std::vector<std::string>> categorical_;
  std::size_t rows_ = 0;
};

enum class ColumnHint { kNumeric, kCategorical, kTimestamp, kExplodeFlags };

// column name -> forced kind. Parsed from `name=Kind` lines.
using SchemaHints = std::map<std::string, ColumnHint, std::less<>>;

SchemaHints parse_schema_hints(std::istream& in);
SchemaHints load_schema_hints(const std::filesystem::path& path);
// Ports and the transport protocol are categorical regardless of their digits.
const SchemaHints& default_schema_hints();

struct LoadStats {
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
};

struct LoadedTable {
  FlowTable table;
  LoadStats stats;
};

// Reads an RFC 4180 CSV with a header row. Default hints are applied first and
// `hints` overrides them.
LoadedTable load_csv(const std::filesystem::path& path, const SchemaHints& hints = {});
LoadedTable parse_csv(std::istream& in, const SchemaHints& hints = {});

// Numbers are written with 9 significant digits, timestamps as
// `1970-01-01 HH:MM:SS.ffffff`.
void write_csv(const FlowTable& table, std::ostream& out);
void write_csv(const FlowTable& table, const std::filesystem::path& path);

struct CleanStats {
  struct Entry {
    std::string column;
    bool flagged_constant = false;
    std::size_t filled_empty = 0;
  };
  std::vector<Entry> entries;
  std::size_t rows_dropped = 0;

  bool empty() const noexcept { return entries.empty(); }
};

struct CleanedTable {
  FlowTable table;
  CleanStats stats;
};

CleanedTable clean(const FlowTable& table);
std::string format_clean_report(const CleanStats& stats);

// Seconds since midnight for `YYYY-MM-DD HH:MM:SS[.fff]`; false if the text
// does not match.
bool parse_timestamp(std::string_view text, double& seconds) noexcept;
std::string format_timestamp(double seconds);

}  // namespace flowsynth
