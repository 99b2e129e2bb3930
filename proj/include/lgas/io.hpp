#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace lgas {

// Shortest-round-trip decimal formatting; locale-independent.
std::string format_double(double v);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> columns);
  void add_row(std::span<const std::string> cells);
  std::string str() const { return body_; }
  size_t rows() const { return rows_; }

 private:
  size_t n_cols_;
  size_t rows_ = 0;
  std::string body_;
};

// write-temp-then-rename; partial outputs never appear under final names.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

uint64_t fnv1a64(std::span<const char> bytes);
uint64_t file_hash(const std::filesystem::path& path);

// Flat key = value config text; '#' starts a comment. Unknown keys are the
// caller's problem.
std::map<std::string, std::string> parse_flat_config(const std::string& text);

// (xi, deflection) empirical-table round trip.
void write_table_csv(const std::filesystem::path& path, std::span<const double> xi,
                     std::span<const double> deflection);
std::pair<std::vector<double>, std::vector<double>> read_table_csv(
    const std::filesystem::path& path);

}  // namespace lgas
