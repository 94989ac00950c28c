#pragma once

#include <filesystem>
#include <string>

#include "medtrace/model.hpp"

namespace medtrace {

// Binary checkpoint layout (all little-endian):
//
//   "CTW1"
//   n_layers, d_model, n_heads, d_head, d_mlp, vocab_size, max_seq_len,
//   rotary_dim                                   8-byte unsigned each
//   mlp_activation (0 sigmoid, 1 gelu), use_layernorm (0/1)   1 byte each
//   tensors as IEEE-754 doubles, row-major, in Weights::visit order:
//     token_embedding, per layer [ln_gain, ln_bias,] w_q, w_k, w_v, w_o,
//     w_fc, w_proj, [lnf_gain, lnf_bias,] unembedding
//
// The companion "<file>.manifest" text file lists one tensor per line as
// "name<TAB>rows<TAB>cols<TAB>byte_offset"; `tag` (e.g. a training step) is
// written on its header line.
struct Checkpoint {
  ModelConfig config;
  Weights weights;
};

void save_weights(const std::filesystem::path& path, const ModelConfig& config,
                  const Weights& weights, const std::string& tag = "");
Checkpoint load_weights(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& weights_path);

}  // namespace medtrace
