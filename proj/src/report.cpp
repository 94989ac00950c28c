#include "medtrace/report.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "medtrace/error.hpp"

#ifndef MEDTRACE_VERSION
#define MEDTRACE_VERSION "0.0.0"
#endif

namespace medtrace {

std::string code_version() { return MEDTRACE_VERSION; }

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

std::vector<std::string> Manifest::lines() const {
  std::vector<std::string> out = {"spec_hash: " + spec_hash, "seed: " + std::to_string(seed),
                                  "code_version: " + code_version()};
  out.insert(out.end(), notes.begin(), notes.end());
  return out;
}

void write_report(const std::filesystem::path& path, const Manifest& manifest,
                  const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& line : manifest.lines()) out << "# " << line << '\n';
  out << body;
  if (!out) throw FormatError("failed writing " + path.string());
}

std::string heatmap_csv(const EffectGrid& grid, ComponentKind kind) {
  std::ostringstream out;
  out << "layer,position,kind,mean_ie,std_ie,n\n";
  for (std::size_t l = 0; l < grid.n_layers(); ++l) {
    for (std::size_t t = 0; t < grid.seq_len(); ++t) {
      const ComponentId id{kind, static_cast<int>(l), static_cast<int>(t), -1};
      if (!grid.contains(id)) {
        throw ContractViolation("heatmap has a gap at " + id.to_string());
      }
      const CellStats& c = grid.cell(id);
      out << l << ',' << t << ',' << to_string(kind) << ',' << format_double(c.mean) << ','
          << format_double(c.std) << ',' << c.n << '\n';
    }
  }
  return out.str();
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace medtrace
