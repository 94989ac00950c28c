#pragma once

#include <map>
#include <string>
#include <vector>

#include "medtrace/model.hpp"

namespace medtrace {

constexpr double kDefaultProbEpsilon = 1e-12;

// Probabilities entering one effect computation. `clean` is the distribution
// of the run being intervened on (p2), `patched` the same run with the
// mediator set to its value under p1; r is p1's answer, r_prime p2's answer.
struct EffectProbs {
  double clean_r = 0;
  double patched_r = 0;
  double clean_r_prime = 0;
  double patched_r_prime = 0;
};

enum class MetricKind { kRelative, kLogProb };

std::string to_string(MetricKind m);  // "ie" / "ie-log"
MetricKind parse_metric(const std::string& s);

// Averaged relative probability shift towards r and away from r'.
double indirect_effect(const EffectProbs& p, double eps = kDefaultProbEpsilon);

// Log-probability variant: (log P*(r) - log P(r)) + (log P(r') - log P*(r'))
// when r != r', otherwise |log P(r') - log P*(r')|.
double indirect_effect_logprob(const EffectProbs& p, bool same_result,
                               double eps = kDefaultProbEpsilon);

struct CellStats {
  double mean = 0;
  double std = 0;  // population standard deviation over pairs
  std::size_t n = 0;
};

// Aggregated effect per component over a batch of prompt pairs.
class EffectGrid {
 public:
  EffectGrid() = default;
  EffectGrid(std::size_t n_layers, std::size_t seq_len, MetricKind metric)
      : n_layers_(n_layers), seq_len_(seq_len), metric_(metric) {}

  std::size_t n_layers() const { return n_layers_; }
  std::size_t seq_len() const { return seq_len_; }
  MetricKind metric() const { return metric_; }

  // Appends one pair's value for a component (positions resolved against seq_len).
  void add(const ComponentId& id, double value);
  // Recomputes mean/std from the retained per-pair values, in insertion order.
  void finalize();

  bool contains(const ComponentId& id) const;
  const CellStats& cell(const ComponentId& id) const;
  const std::vector<double>& per_pair(const ComponentId& id) const;
  std::vector<ComponentId> components() const;
  std::vector<ComponentId> components(ComponentKind kind) const;
  std::size_t size() const { return cells_.size(); }

 private:
  ComponentId key(const ComponentId& id) const;

  std::size_t n_layers_ = 0;
  std::size_t seq_len_ = 0;
  MetricKind metric_ = MetricKind::kRelative;
  std::map<ComponentId, std::vector<double>> values_;
  std::map<ComponentId, CellStats> cells_;
};

enum class RiAggregation {
  kMeanThenLog,  // log(mean IE + 1) per component
  kLogThenMean,  // mean over pairs of log(IE + 1)
};

struct RIReport {
  std::vector<ComponentId> subset;
  double ri = 0;
  // log(max(IE, 0) + 1) for every MLP component of the grid.
  std::map<ComponentId, double> contributions;
  bool clamped = false;  // some IE was negative and clamped to zero
  std::size_t clamped_count = 0;
};

RIReport relative_importance(const EffectGrid& grid, const std::vector<ComponentId>& subset,
                             RiAggregation aggregation = RiAggregation::kMeanThenLog);

// Last-token MLPs from layer floor(L/2) to L (1-based), as 0-based ids with
// position -1.
std::vector<ComponentId> late_mlp_subset(std::size_t n_layers);

enum class PredictionChange { kNone, kDesired, kUndesired, kOther };

std::string to_string(PredictionChange c);

// Classifies the effect of an intervention on the argmax over `allowed`.
PredictionChange prediction_change(const Vector& clean, const Vector& patched, TokenId r,
                                   const std::vector<TokenId>& allowed);
// Argmax over `allowed` (lowest id wins ties).
TokenId restricted_argmax(std::span<const double> scores, const std::vector<TokenId>& allowed);

// |top_k(a) & top_k(b)| / k for two rankings of the same index set.
double top_k_overlap(const std::vector<std::size_t>& ranking_a,
                     const std::vector<std::size_t>& ranking_b, std::size_t k);

// Indices sorted by decreasing score (stable: ties keep index order).
std::vector<std::size_t> rank_descending(const std::vector<double>& scores);

}  // namespace medtrace
