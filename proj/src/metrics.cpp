#include "medtrace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "medtrace/error.hpp"

namespace medtrace {

std::string to_string(MetricKind m) { return m == MetricKind::kRelative ? "ie" : "ie-log"; }

MetricKind parse_metric(const std::string& s) {
  if (s == "ie") return MetricKind::kRelative;
  if (s == "ie-log") return MetricKind::kLogProb;
  throw SpecError("unknown metric '" + s + "' (expected ie or ie-log)");
}

namespace {

std::string describe(const EffectProbs& p) {
  std::ostringstream s;
  s.precision(17);
  s << "P(r)=" << p.clean_r << " P*(r)=" << p.patched_r << " P(r')=" << p.clean_r_prime
    << " P*(r')=" << p.patched_r_prime;
  return s.str();
}

void require_at_least(double value, double eps, const char* what, const EffectProbs& p) {
  if (!(value >= eps)) {
    throw DegenerateProbabilityError(std::string(what) + " below epsilon: " + describe(p));
  }
}

}  // namespace

double indirect_effect(const EffectProbs& p, double eps) {
  require_at_least(p.clean_r, eps, "P(r)", p);
  require_at_least(p.patched_r_prime, eps, "P*(r')", p);
  const double towards_r = (p.patched_r - p.clean_r) / p.clean_r;
  const double away_from_r_prime = (p.clean_r_prime - p.patched_r_prime) / p.patched_r_prime;
  return 0.5 * (towards_r + away_from_r_prime);
}

double indirect_effect_logprob(const EffectProbs& p, bool same_result, double eps) {
  require_at_least(p.clean_r_prime, eps, "P(r')", p);
  require_at_least(p.patched_r_prime, eps, "P*(r')", p);
  const double delta = std::log(p.clean_r_prime) - std::log(p.patched_r_prime);
  if (same_result) return std::abs(delta);
  require_at_least(p.clean_r, eps, "P(r)", p);
  require_at_least(p.patched_r, eps, "P*(r)", p);
  const double delta_prime = std::log(p.patched_r) - std::log(p.clean_r);
  return delta_prime + delta;
}

// ---------------------------------------------------------------------------

ComponentId EffectGrid::key(const ComponentId& id) const { return id.resolved(seq_len_); }

void EffectGrid::add(const ComponentId& id, double value) {
  values_[key(id)].push_back(value);
}

void EffectGrid::finalize() {
  cells_.clear();
  for (const auto& [id, vals] : values_) {
    CellStats c;
    c.n = vals.size();
    double total = 0.0;
    for (double v : vals) total += v;
    c.mean = total / static_cast<double>(c.n);
    double sq = 0.0;
    for (double v : vals) sq += (v - c.mean) * (v - c.mean);
    c.std = std::sqrt(sq / static_cast<double>(c.n));
    cells_.emplace(id, c);
  }
}

bool EffectGrid::contains(const ComponentId& id) const { return cells_.contains(key(id)); }

const CellStats& EffectGrid::cell(const ComponentId& id) const {
  auto it = cells_.find(key(id));
  if (it == cells_.end()) throw ContractViolation("effect grid has no cell " + id.to_string());
  return it->second;
}

const std::vector<double>& EffectGrid::per_pair(const ComponentId& id) const {
  auto it = values_.find(key(id));
  if (it == values_.end()) throw ContractViolation("effect grid has no cell " + id.to_string());
  return it->second;
}

std::vector<ComponentId> EffectGrid::components() const {
  std::vector<ComponentId> out;
  for (const auto& [id, c] : cells_) out.push_back(id);
  return out;
}

std::vector<ComponentId> EffectGrid::components(ComponentKind kind) const {
  std::vector<ComponentId> out;
  for (const auto& [id, c] : cells_)
    if (id.kind == kind) out.push_back(id);
  return out;
}

// ---------------------------------------------------------------------------

RIReport relative_importance(const EffectGrid& grid, const std::vector<ComponentId>& subset,
                             RiAggregation aggregation) {
  const auto all = grid.components(ComponentKind::kMlp);
  if (all.empty()) throw DegenerateGridError("effect grid holds no MLP components");
  RIReport report;
  for (const auto& id : all) {
    double contribution = 0.0;
    if (aggregation == RiAggregation::kMeanThenLog) {
      const double ie = grid.cell(id).mean;
      if (ie < 0) ++report.clamped_count;
      contribution = std::log1p(std::max(ie, 0.0));
    } else {
      const auto& vals = grid.per_pair(id);
      double total = 0.0;
      for (double ie : vals) {
        if (ie < 0) ++report.clamped_count;
        total += std::log1p(std::max(ie, 0.0));
      }
      contribution = total / static_cast<double>(vals.size());
    }
    report.contributions.emplace(id, contribution);
  }
  report.clamped = report.clamped_count > 0;

  std::set<ComponentId> chosen;
  for (const auto& raw : subset) {
    const ComponentId id = raw.resolved(grid.seq_len());
    if (id.kind != ComponentKind::kMlp) {
      throw ContractViolation("relative importance subset must hold MLP components, got " +
                              raw.to_string());
    }
    if (!report.contributions.contains(id)) {
      throw ContractViolation("relative importance subset component " + raw.to_string() +
                              " is not in the grid");
    }
    chosen.insert(id);
  }
  report.subset.assign(chosen.begin(), chosen.end());

  double numerator = 0.0, denominator = 0.0;
  for (const auto& [id, c] : report.contributions) {
    denominator += c;
    if (chosen.contains(id)) numerator += c;
  }
  if (denominator == 0.0) {
    throw DegenerateGridError("relative importance undefined: every clamped IE is zero");
  }
  report.ri = numerator / denominator;
  return report;
}

std::vector<ComponentId> late_mlp_subset(std::size_t n_layers) {
  if (n_layers < 2) throw ContractViolation("late MLP subset needs at least 2 layers");
  std::vector<ComponentId> out;
  // 1-based layers floor(L/2)..L map to 0-based floor(L/2)-1..L-1.
  for (std::size_t layer = n_layers / 2; layer <= n_layers; ++layer) {
    out.push_back(ComponentId::mlp(static_cast<int>(layer) - 1, -1));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(PredictionChange c) {
  switch (c) {
    case PredictionChange::kNone:
      return "none";
    case PredictionChange::kDesired:
      return "desired";
    case PredictionChange::kUndesired:
      return "undesired";
    case PredictionChange::kOther:
      return "other";
  }
  return "?";
}

TokenId restricted_argmax(std::span<const double> scores, const std::vector<TokenId>& allowed) {
  if (allowed.empty()) throw ContractViolation("argmax over an empty token set");
  TokenId best = allowed.front();
  for (TokenId id : allowed) {
    if (id >= scores.size()) throw VocabularyError("token id outside distribution");
    if (scores[id] > scores[best] || (scores[id] == scores[best] && id < best)) best = id;
  }
  return best;
}

PredictionChange prediction_change(const Vector& clean, const Vector& patched, TokenId r,
                                   const std::vector<TokenId>& allowed) {
  const TokenId before = restricted_argmax(clean, allowed);
  const TokenId after = restricted_argmax(patched, allowed);
  if (before == after) return PredictionChange::kNone;
  if (after == r) return PredictionChange::kDesired;
  if (before == r) return PredictionChange::kUndesired;
  return PredictionChange::kOther;
}

double top_k_overlap(const std::vector<std::size_t>& ranking_a,
                     const std::vector<std::size_t>& ranking_b, std::size_t k) {
  if (k == 0) throw ContractViolation("top-k overlap needs k >= 1");
  if (ranking_a.size() != ranking_b.size()) {
    throw ContractViolation("rankings have different lengths");
  }
  if (k > ranking_a.size()) throw ContractViolation("k exceeds the number of ranked dimensions");
  std::vector<std::size_t> sa = ranking_a, sb = ranking_b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  if (sa != sb || std::adjacent_find(sa.begin(), sa.end()) != sa.end()) {
    throw ContractViolation("rankings are not permutations of the same index set");
  }
  std::vector<std::size_t> ta(ranking_a.begin(), ranking_a.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<std::size_t> tb(ranking_b.begin(), ranking_b.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  std::vector<std::size_t> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

std::vector<std::size_t> rank_descending(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace medtrace
