#include "lgas/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lgas/errors.hpp"

namespace lgas {

std::string format_double(double v) {
  char buf[40];
  // %.17g round-trips every double; trim to the shortest representation
  // that still round-trips for stable, readable files.
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) return buf;
  }
  return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> columns) : n_cols_(columns.size()) {
  for (size_t i = 0; i < columns.size(); ++i) {
    if (i) body_ += ',';
    body_ += columns[i];
  }
  body_ += '\n';
}

void CsvWriter::add_row(std::span<const std::string> cells) {
  if (cells.size() != n_cols_) throw std::invalid_argument("csv: column count mismatch");
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) body_ += ',';
    body_ += cells[i];
  }
  body_ += '\n';
  ++rows_;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

uint64_t fnv1a64(std::span<const char> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t file_hash(const std::filesystem::path& path) {
  std::string content = read_file(path);
  return fnv1a64(std::span<const char>(content.data(), content.size()));
}

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
}  // namespace

std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = val;
  }
  return out;
}

void write_table_csv(const std::filesystem::path& path, std::span<const double> xi,
                     std::span<const double> deflection) {
  if (xi.size() != deflection.size()) throw std::invalid_argument("table: column size mismatch");
  CsvWriter csv({"xi", "deflection"});
  for (size_t i = 0; i < xi.size(); ++i) {
    std::vector<std::string> row{format_double(xi[i]), format_double(deflection[i])};
    csv.add_row(row);
  }
  write_file_atomic(path, csv.str());
}

std::pair<std::vector<double>, std::vector<double>> read_table_csv(
    const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("table: empty file " + path.string());
  std::vector<double> xi, defl;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    double a = 0.0, b = 0.0;
    if (std::sscanf(line.c_str(), "%lf,%lf", &a, &b) != 2)
      throw std::runtime_error("table: bad row in " + path.string() + ": " + line);
    xi.push_back(a);
    defl.push_back(b);
  }
  return {std::move(xi), std::move(defl)};
}

}  // namespace lgas
