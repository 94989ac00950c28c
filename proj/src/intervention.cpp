#include "medtrace/intervention.hpp"

#include <cstdio>
#include <fstream>
#include <thread>

#include "medtrace/error.hpp"

namespace medtrace {

std::vector<std::size_t> align_positions(const TokenSequence& p1, const TokenSequence& p2,
                                         const std::string& p1_text, const std::string& p2_text) {
  if (p1.size() != p2.size()) {
    std::string msg = "prompts have different token lengths (" + std::to_string(p1.size()) +
                      " vs " + std::to_string(p2.size()) + ")";
    if (!p1_text.empty() || !p2_text.empty()) msg += ": '" + p1_text + "' / '" + p2_text + "'";
    throw PairingError(msg);
  }
  std::vector<std::size_t> map(p1.size());
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = i;
  return map;
}

EffectProbs PairOutcome::probs() const {
  return {p_clean.at(r), p_patched.at(r), p_clean.at(r_prime), p_patched.at(r_prime)};
}

PairRunner::PairRunner(const Model& model, TokenPair pair, const std::vector<TokenId>* restrict)
    : model_(model), pair_(std::move(pair)), restrict_(restrict) {
  align_positions(pair_.p1, pair_.p2, pair_.label);
  ForwardOptions rec;
  rec.record = true;
  rec.logits = LogitsMode::kLastOnly;
  p1_ = model_.forward(pair_.p1, rec);
  ForwardOptions keep;
  keep.keep_cache = true;
  keep.logits = LogitsMode::kLastOnly;
  p2_ = model_.forward(pair_.p2, keep);
  p_clean_ = predict_distribution(p2_, restrict_);
}

Vector PairRunner::patched(const InterventionSet& set) const {
  ForwardOptions opts;
  opts.logits = LogitsMode::kLastOnly;
  return predict_distribution(model_.patched_forward(*p2_.cache, set, opts), restrict_);
}

PairOutcome PairRunner::run(const ComponentId& target) const {
  const ComponentId c = target.resolved(seq_len());
  if (c.position < 0 || static_cast<std::size_t>(c.position) >= seq_len()) {
    throw InterventionError("component " + target.to_string() + " lies outside a prompt of " +
                            std::to_string(seq_len()) + " tokens");
  }
  if (c.layer < 0 || static_cast<std::size_t>(c.layer) >= model_.config().n_layers) {
    throw InterventionError("component " + target.to_string() + " names a missing layer");
  }
  InterventionSet set;
  set.add(c, p1_trace().value_of(c));
  PairOutcome o;
  o.component = c;
  o.p_clean = p_clean_;
  o.p_patched = patched(set);
  o.r = pair_.r;
  o.r_prime = pair_.r_prime;
  o.restrict = restrict_;
  return o;
}

PairOutcome run_pair(const Model& model, const TokenPair& pair, const ComponentId& target,
                     const std::vector<TokenId>* restrict) {
  return PairRunner(model, pair, restrict).run(target);
}

double effect_of(const PairOutcome& o, MetricKind metric, double eps) {
  const EffectProbs p = o.probs();
  if (metric == MetricKind::kRelative) return indirect_effect(p, eps);
  return indirect_effect_logprob(p, o.r == o.r_prime, eps);
}

std::vector<ComponentId> full_grid(std::size_t n_layers, std::size_t seq_len) {
  std::vector<ComponentId> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      out.push_back(ComponentId::mlp(static_cast<int>(l), static_cast<int>(t)));
      out.push_back(ComponentId::attn(static_cast<int>(l), static_cast<int>(t)));
    }
  }
  return out;
}

std::vector<ComponentId> neuron_grid(int layer, int position, std::size_t d_model) {
  std::vector<ComponentId> out;
  for (std::size_t d = 0; d < d_model; ++d)
    out.push_back(ComponentId::neuron(layer, position, static_cast<int>(d)));
  return out;
}

namespace {

struct PairResult {
  std::vector<AuditRow> rows;
  std::string error;
  bool degenerate = false;
};

PairResult sweep_one(const Model& model, const TokenPair& pair, std::size_t index,
                     const std::vector<ComponentId>& grid, const SweepOptions& o) {
  PairResult out;
  try {
    PairRunner runner(model, pair, o.restrict);
    for (const auto& id : grid) {
      const PairOutcome outcome = runner.run(id);
      out.rows.push_back({index, pair.label, outcome.component, outcome.probs(),
                          effect_of(outcome, o.metric, o.eps)});
    }
  } catch (const DegenerateProbabilityError& e) {
    out.error = e.what();
    out.degenerate = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace

EffectGrid sweep(const Model& model, const std::vector<TokenPair>& pairs,
                 const std::vector<ComponentId>& grid, const SweepOptions& options) {
  if (pairs.empty()) throw ContractViolation("sweep needs at least one prompt pair");
  if (grid.empty()) throw ContractViolation("sweep needs at least one component");
  const std::size_t T = pairs.front().p2.size();
  for (const auto& p : pairs) {
    if (p.p1.size() != T || p.p2.size() != T) {
      throw PairingError("sweep pairs must share one token length; pair " + p.label + " has " +
                         std::to_string(p.p2.size()) + " tokens, expected " + std::to_string(T));
    }
  }

  std::vector<PairResult> results(pairs.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, pairs.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      results[i] = sweep_one(model, pairs[i], i, grid, options);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t i = w; i < pairs.size(); i += threads)
          results[i] = sweep_one(model, pairs[i], i, grid, options);
      });
    }
  }

  EffectGrid out(model.config().n_layers, T, options.metric);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].degenerate && options.skip_degenerate) {
      if (options.skipped) options.skipped->push_back(i);
      continue;
    }
    if (!results[i].error.empty()) {
      throw Error("pair " + std::to_string(i) + " (" + pairs[i].label + "): " + results[i].error);
    }
    for (const auto& row : results[i].rows) {
      out.add(row.component, row.effect);
      if (options.audit) options.audit->push_back(row);
    }
    ++kept;
  }
  if (kept == 0) throw DegenerateGridError("every pair of the sweep had a degenerate probability");
  out.finalize();
  return out;
}

void write_audit(const std::filesystem::path& path, const std::vector<AuditRow>& rows,
                 const std::vector<std::string>& header_lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write audit log " + path.string());
  for (const auto& h : header_lines) out << "# " << h << '\n';
  out << "pair\tlabel\tcomponent\tp_r\tp_star_r\tp_r_prime\tp_star_r_prime\tie\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out << r.pair << '\t' << r.label << '\t' << r.component.to_string() << '\t'
        << num(r.probs.clean_r) << '\t' << num(r.probs.patched_r) << '\t'
        << num(r.probs.clean_r_prime) << '\t' << num(r.probs.patched_r_prime) << '\t'
        << num(r.effect) << '\n';
  }
  if (!out) throw FormatError("failed writing audit log " + path.string());
}

}  // namespace medtrace
