#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "medtrace/metrics.hpp"

namespace medtrace {

std::string code_version();

// %.17g, the round-trip representation used in every output file.
std::string format_double(double v);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);
// FNV-1a of a file's bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);

// Comment block at the top of every output file.
struct Manifest {
  std::string spec_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  std::vector<std::string> lines() const;  // without the leading "# "
};

// Writes "# " + manifest lines, then body verbatim.
void write_report(const std::filesystem::path& path, const Manifest& manifest,
                  const std::string& body);

// layer,position,kind,mean_ie,std_ie,n: one row per (layer, position) of `kind`.
std::string heatmap_csv(const EffectGrid& grid, ComponentKind kind);

// Splits on `sep`, trimming ASCII whitespace around every field.
std::vector<std::string> split_list(const std::string& s, char sep = ',');
std::string trim(std::string_view s);

}  // namespace medtrace
