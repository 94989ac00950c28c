#include "medtrace/weights_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "medtrace/error.hpp"

namespace medtrace {

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; add byte swapping for this platform");

namespace {

constexpr std::array<char, 4> kMagic = {'C', 'T', 'W', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError("truncated weight file header");
  return v;
}

std::uint8_t get_u8(std::istream& in) {
  char c = 0;
  in.get(c);
  if (!in) throw FormatError("truncated weight file header");
  return static_cast<std::uint8_t>(c);
}

constexpr std::size_t kHeaderBytes = 4 + 8 * 8 + 2;

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& weights_path) {
  return std::filesystem::path(weights_path.string() + ".manifest");
}

void save_weights(const std::filesystem::path& path, const ModelConfig& config,
                  const Weights& weights, const std::string& tag) {
  weights.check_shapes(config);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write weight file " + path.string());
  out.write(kMagic.data(), kMagic.size());
  for (std::size_t v : {config.n_layers, config.d_model, config.n_heads, config.d_head,
                        config.d_mlp, config.vocab_size, config.max_seq_len, config.rotary_dim}) {
    put_u64(out, v);
  }
  put_u8(out, static_cast<std::uint8_t>(config.mlp_activation));
  put_u8(out, config.use_layernorm ? 1 : 0);

  std::ofstream manifest(manifest_path(path), std::ios::binary);
  if (!manifest) throw FormatError("cannot write manifest for " + path.string());
  manifest << "# CTW1 " << path.filename().string();
  if (!tag.empty()) manifest << " " << tag;
  manifest << "\n";
  std::size_t offset = kHeaderBytes;
  weights.visit([&](const std::string& name, const Matrix& m) {
    manifest << name << '\t' << m.rows() << '\t' << m.cols() << '\t' << offset << '\n';
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
    offset += m.size() * sizeof(double);
  });
  if (!out) throw FormatError("write failed for " + path.string());
}

Checkpoint load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read weight file " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError(path.string() + " is not a CTW1 weight file");
  Checkpoint ck;
  ModelConfig& c = ck.config;
  c.n_layers = get_u64(in);
  c.d_model = get_u64(in);
  c.n_heads = get_u64(in);
  c.d_head = get_u64(in);
  c.d_mlp = get_u64(in);
  c.vocab_size = get_u64(in);
  c.max_seq_len = get_u64(in);
  c.rotary_dim = get_u64(in);
  const std::uint8_t act = get_u8(in);
  if (act > 1) throw FormatError("unknown activation code " + std::to_string(act));
  c.mlp_activation = static_cast<MlpActivation>(act);
  c.use_layernorm = get_u8(in) != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weight file config invalid: ") + e.what());
  }
  ck.weights = Weights::zeros(c);
  ck.weights.visit([&](const std::string& name, Matrix& m) {
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw FormatError("truncated tensor " + name + " in " + path.string());
  });
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after last tensor in " + path.string());
  }
  return ck;
}

}  // namespace medtrace
