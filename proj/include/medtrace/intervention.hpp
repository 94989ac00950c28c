#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "medtrace/metrics.hpp"
#include "medtrace/model.hpp"

namespace medtrace {

// Identity position map for two aligned prompts; PairingError otherwise.
std::vector<std::size_t> align_positions(const TokenSequence& p1, const TokenSequence& p2,
                                         const std::string& p1_text = "",
                                         const std::string& p2_text = "");

// Tokenised pair ready for patching.
struct TokenPair {
  TokenSequence p1, p2;
  TokenId r = 0, r_prime = 0;
  std::string label;  // provenance for error messages and audit rows
};

struct PairOutcome {
  ComponentId component;
  Vector p_clean;    // p2 without intervention
  Vector p_patched;  // p2 with the component set to its value under p1
  TokenId r = 0, r_prime = 0;
  const std::vector<TokenId>* restrict = nullptr;

  EffectProbs probs() const;
};

// Clean runs of one pair, computed once and reused for every component.
class PairRunner {
 public:
  // restrict == nullptr means the full vocabulary.
  PairRunner(const Model& model, TokenPair pair, const std::vector<TokenId>* restrict);

  const TokenPair& pair() const { return pair_; }
  std::size_t seq_len() const { return pair_.p2.size(); }
  const Vector& clean_distribution() const { return p_clean_; }
  const ActivationTrace& p1_trace() const { return *p1_.trace; }

  PairOutcome run(const ComponentId& target) const;
  // Patched p2 distribution for an arbitrary intervention set.
  Vector patched(const InterventionSet& set) const;

 private:
  const Model& model_;
  TokenPair pair_;
  const std::vector<TokenId>* restrict_;
  ForwardResult p1_;
  ForwardResult p2_;
  Vector p_clean_;
};

PairOutcome run_pair(const Model& model, const TokenPair& pair, const ComponentId& target,
                     const std::vector<TokenId>* restrict = nullptr);

double effect_of(const PairOutcome& o, MetricKind metric, double eps = kDefaultProbEpsilon);

// MLP and ATTN at every (layer, position), layer-major.
std::vector<ComponentId> full_grid(std::size_t n_layers, std::size_t seq_len);
// NEURON components for every coordinate of m at (layer, position).
std::vector<ComponentId> neuron_grid(int layer, int position, std::size_t d_model);

struct AuditRow {
  std::size_t pair = 0;
  std::string label;
  ComponentId component;
  EffectProbs probs;
  double effect = 0;
};

struct SweepOptions {
  MetricKind metric = MetricKind::kRelative;
  const std::vector<TokenId>* restrict = nullptr;
  std::size_t threads = 1;
  double eps = kDefaultProbEpsilon;
  std::vector<AuditRow>* audit = nullptr;
  // Drop a whole pair when any of its probabilities falls below eps instead
  // of aborting; dropped pair indices are appended to `skipped`.
  bool skip_degenerate = false;
  std::vector<std::size_t>* skipped = nullptr;
};

// Every pair must have the same token length. Values enter the grid in pair
// order regardless of the thread count.
EffectGrid sweep(const Model& model, const std::vector<TokenPair>& pairs,
                 const std::vector<ComponentId>& grid, const SweepOptions& options = {});

void write_audit(const std::filesystem::path& path, const std::vector<AuditRow>& rows,
                 const std::vector<std::string>& header_lines);

}  // namespace medtrace
