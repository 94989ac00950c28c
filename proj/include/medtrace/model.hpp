#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "medtrace/numerics.hpp"
#include "medtrace/random.hpp"
#include "medtrace/vocabulary.hpp"

namespace medtrace {

enum class MlpActivation : std::uint8_t { kSigmoid = 0, kGelu = 1 };

std::string to_string(MlpActivation a);
MlpActivation parse_activation(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_head = 32;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  std::size_t rotary_dim = 16;
  MlpActivation mlp_activation = MlpActivation::kSigmoid;
  bool use_layernorm = true;

  // Throws ConfigError naming the first broken invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Parameters use the row-vector convention: a projection maps x (1 x in) to
// x * W (1 x out), so W_fc is d_model x d_mlp and W_proj is d_mlp x d_model.
struct LayerWeights {
  Matrix ln_gain;  // 1 x d_model, empty without layernorm
  Matrix ln_bias;
  Matrix w_q;  // d_model x d_model
  Matrix w_k;
  Matrix w_v;
  Matrix w_o;
  Matrix w_fc;    // d_model x d_mlp
  Matrix w_proj;  // d_mlp x d_model

  bool operator==(const LayerWeights&) const = default;
};

struct Weights {
  Matrix token_embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Matrix lnf_gain;  // 1 x d_model, empty without layernorm
  Matrix lnf_bias;
  Matrix unembedding;  // d_model x vocab

  // Zero tensors with the shapes implied by cfg.
  static Weights zeros(const ModelConfig& cfg);
  // Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2L)),
  // unit layernorm gains.
  static Weights random(const ModelConfig& cfg, std::uint64_t seed);

  // Visits (name, tensor) in the fixed serialisation order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;
  void check_shapes(const ModelConfig& cfg) const;
  bool operator==(const Weights&) const = default;

 private:
  template <class W, class F>
  static void visit_impl(W& w, F& f) {
    f(std::string("token_embedding"), w.token_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      auto& lw = w.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      if (!lw.ln_gain.empty()) {
        f(p + "ln_gain", lw.ln_gain);
        f(p + "ln_bias", lw.ln_bias);
      }
      f(p + "w_q", lw.w_q);
      f(p + "w_k", lw.w_k);
      f(p + "w_v", lw.w_v);
      f(p + "w_o", lw.w_o);
      f(p + "w_fc", lw.w_fc);
      f(p + "w_proj", lw.w_proj);
    }
    if (!w.lnf_gain.empty()) {
      f(std::string("lnf_gain"), w.lnf_gain);
      f(std::string("lnf_bias"), w.lnf_bias);
    }
    f(std::string("unembedding"), w.unembedding);
  }
};

// ---------------------------------------------------------------------------
// Mediators and interventions

enum class ComponentKind : std::uint8_t { kMlp = 0, kAttn = 1, kNeuron = 2 };

std::string to_string(ComponentKind k);
ComponentKind parse_component_kind(const std::string& s);

// One mediator: an MLP or attention output vector, or one coordinate of an
// MLP output, at (layer, position). position -1 addresses the last token.
struct ComponentId {
  ComponentKind kind = ComponentKind::kMlp;
  int layer = 0;
  int position = -1;
  int dim = -1;  // NEURON only

  static ComponentId mlp(int layer, int position) { return {ComponentKind::kMlp, layer, position, -1}; }
  static ComponentId attn(int layer, int position) { return {ComponentKind::kAttn, layer, position, -1}; }
  static ComponentId neuron(int layer, int position, int dim) {
    return {ComponentKind::kNeuron, layer, position, dim};
  }

  // Same component with a non-negative position for a sequence of length T.
  ComponentId resolved(std::size_t seq_len) const;
  std::string to_string() const;

  auto operator<=>(const ComponentId&) const = default;
};

using Replacement = std::variant<Vector, double>;

struct InterventionSet {
  std::map<ComponentId, Replacement> entries;
  // Overrides of the residual stream after a layer: key (layer, position)
  // replaces h^(layer+1) at that position (0-based layer of the block).
  std::map<std::pair<int, int>, Vector> residual;

  // Throws InterventionError if the component is already present.
  void add(const ComponentId& id, Replacement value);
  void add_residual(int layer, int position, Vector value);
  bool empty() const { return entries.empty() && residual.empty(); }
};

// Recorded a_t^(l) and m_t^(l) for every layer and position of a run.
class ActivationTrace {
 public:
  ActivationTrace() = default;
  ActivationTrace(std::vector<Matrix> attn, std::vector<Matrix> mlp)
      : attn_(std::move(attn)), mlp_(std::move(mlp)) {}

  std::size_t n_layers() const { return attn_.size(); }
  std::size_t seq_len() const { return attn_.empty() ? 0 : attn_.front().rows(); }
  Vector attn(std::size_t layer, std::size_t position) const;
  Vector mlp(std::size_t layer, std::size_t position) const;
  const Matrix& attn_layer(std::size_t layer) const { return attn_.at(layer); }
  const Matrix& mlp_layer(std::size_t layer) const { return mlp_.at(layer); }
  // Value a component takes in this trace (Vector for MLP/ATTN, scalar for NEURON).
  Replacement value_of(const ComponentId& id) const;

 private:
  std::vector<Matrix> attn_;
  std::vector<Matrix> mlp_;
};

// Every intermediate of one forward pass. Kept so that a patched run can
// restart from the first affected (layer, position) and so that the trainer
// can backpropagate.
struct LayerState {
  Matrix input;  // h^(l-1), T x d
  Matrix x;      // block input after optional layernorm
  Vector ln_mean, ln_rstd;
  Matrix q, k, v;                // rotary already applied to q and k
  std::vector<Matrix> probs;     // per head, T x T (lower triangle used)
  Matrix z;                      // concatenated head outputs
  Matrix attn;                   // a^(l), after interventions
  Matrix pre;                    // x * W_fc
  Matrix act;                    // activation(pre)
  Matrix mlp;                    // m^(l), after interventions
};

struct RunCache {
  TokenSequence tokens;
  std::vector<LayerState> layers;
  Matrix final_h;  // h^(L), after residual interventions
  Matrix xf;       // final layernorm output (or copy of final_h)
  Vector lnf_mean, lnf_rstd;
  bool clean = true;  // no interventions applied
};

enum class LogitsMode { kAll, kLastOnly };

struct ForwardOptions {
  bool record = false;
  LogitsMode logits = LogitsMode::kAll;
  bool keep_cache = false;
};

struct ForwardResult {
  // T x |V| for LogitsMode::kAll, 1 x |V| (last position) otherwise.
  Matrix logits;
  Vector distribution;  // softmax of the last-position logits
  std::optional<ActivationTrace> trace;
  std::shared_ptr<const RunCache> cache;

  std::span<const double> last_logits() const { return logits.row(logits.rows() - 1); }
};

class Model {
 public:
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& mutable_weights() { return weights_; }

  ForwardResult forward(const TokenSequence& seq, const ForwardOptions& opts = {},
                        const InterventionSet* interventions = nullptr) const;

  // Same result as forward(clean.tokens, opts, &interventions) bit for bit,
  // but recomputes only layers and positions the interventions can reach.
  ForwardResult patched_forward(const RunCache& clean, const InterventionSet& interventions,
                                const ForwardOptions& opts = {}) const;

  // Building blocks, exposed for tests. h_prefix rows are h^(l-1)_1..h^(l-1)_t
  // (already layernormed when the model uses layernorm).
  Vector attention_block(std::size_t layer, const Matrix& h_prefix) const;
  Vector mlp_block(std::size_t layer, std::span<const double> h) const;
  Vector rotary_encode(std::span<const double> q_or_k, std::size_t position) const;

  // Throws InterventionError listing the offending component.
  void validate_interventions(const InterventionSet& set, std::size_t seq_len) const;
  void validate_sequence(const TokenSequence& seq) const;

  // In-place rotation of one head's coordinates; sign = -1 applies the inverse.
  void rotate_head(std::span<double> head, std::size_t position, double sign) const;

 private:
  void run(RunCache& cache, const InterventionSet* interventions, std::size_t start_layer,
           std::size_t start_pos) const;
  ForwardResult finish(std::shared_ptr<RunCache> cache, const ForwardOptions& opts) const;

  ModelConfig config_;
  Weights weights_;
  Matrix rope_cos_;  // max_seq_len x rotary_dim/2
  Matrix rope_sin_;
};

// Full softmax over the vocabulary, or renormalised over `restrict` with zeros
// elsewhere. Throws ContractViolation for an empty restriction.
Vector predict_distribution(const ForwardResult& result,
                            const std::vector<TokenId>* restrict = nullptr);
Vector restricted_softmax(std::span<const double> logits, const std::vector<TokenId>* restrict);

// Rotary encoding with an explicit rotary width; free function for tests.
Vector rotary_encode(std::span<const double> v, std::size_t position, std::size_t rotary_dim,
                     double base = 10000.0);

// Variance epsilon of every layernorm.
constexpr double kLayerNormEps = 1e-5;

}  // namespace medtrace
