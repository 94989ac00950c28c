#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "medtrace/intervention.hpp"
#include "medtrace/metrics.hpp"
#include "medtrace/model.hpp"
#include "medtrace/tasks.hpp"
#include "medtrace/trainer.hpp"

namespace medtrace {

enum class RestrictPolicy { kAnswerSet, kVocabulary };

std::string to_string(RestrictPolicy p);  // "s" / "vocab"
RestrictPolicy parse_restrict(const std::string& s);

struct ExperimentSpec {
  TaskFamily family = TaskFamily::kTwoOp;
  PairingMode mode = PairingMode::kOperandChange;
  bool mode_explicit = false;  // family no longer resets mode once set
  std::vector<ComponentKind> kinds = {ComponentKind::kMlp, ComponentKind::kAttn};
  MetricKind metric = MetricKind::kRelative;
  std::size_t pairs_per_template = 25;
  OperandSet operands{300, 9, false};
  std::size_t few_shot = 0;
  RestrictPolicy restrict = RestrictPolicy::kAnswerSet;
  std::uint64_t seed = 1;
  std::uint64_t kb_seed = 7;
  std::vector<std::string> templates;  // empty: every template of the family
  std::size_t threads = 1;
  RiAggregation ri_aggregation = RiAggregation::kMeanThenLog;
  bool skip_degenerate = true;

  ModelConfig model;
  std::uint64_t init_seed = 3;
  TrainConfig train;
  TrainConfig finetune;
  std::vector<TaskFamily> train_families;  // empty: {family}
  double held_out = 0.2;
  std::size_t retrieval_examples = 3000;
  long retrieval_operand_max = 20;
  long words_operand_max = 20;

  int neuron_layer = -1;  // -1: floor(L/2)
  int neuron_position = -1;
  std::size_t top_k = 0;  // 0: round(d_model / 10)
  std::vector<std::string> neuron_settings = {"ar", "words", "retrieval", "factual"};

  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = "out";

  ExperimentSpec();

  // Applies one "key = value" setting; SpecError for unknown keys or values.
  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  void validate() const;

  // Every output-relevant setting in a fixed order, one "key = value" per line.
  std::string canonical() const;
  std::string hash() const;
};

struct RiSummary {
  std::string label;
  double ri = 0;
  double numerator = 0;
  double denominator = 0;
  std::size_t clamped = 0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;
};

struct ReportBundle {
  std::filesystem::path dir;
  std::vector<std::filesystem::path> files;
  RiSummary ri;  // pooled over token-length groups
  std::vector<RiSummary> groups;
};

// Tasks, vocabulary and answer sets as configured by a spec.
struct Workspace {
  ExperimentSpec spec;
  TaskCatalog catalog;

  explicit Workspace(ExperimentSpec s);
  OperandSet operands_for(TaskFamily f) const;
  std::vector<TokenId> answer_set(TaskFamily f) const;
  // Training and held-out examples for one family.
  std::pair<std::vector<TaskExample>, std::vector<TaskExample>> examples(TaskFamily f) const;
  ModelConfig model_config() const;
  Model load_model(const std::filesystem::path& path) const;
  // Tokenised pairs of a family/mode, with the spec's seed and counts.
  std::vector<PromptPair> pairs(TaskFamily f, PairingMode m,
                                const std::unordered_set<std::string>* exclude) const;
  std::vector<TokenPair> tokenize(const std::vector<PromptPair>& pairs) const;
};

struct TrainOutcome {
  std::filesystem::path checkpoint;
  double accuracy = 0;  // held-out accuracy on the spec family
};

TrainOutcome cmd_train(const ExperimentSpec& spec, std::ostream& log);
TrainOutcome cmd_finetune(const ExperimentSpec& spec, std::ostream& log);
ReportBundle cmd_trace(const ExperimentSpec& spec, std::ostream& log);
std::filesystem::path cmd_neuron_trace(const ExperimentSpec& spec, std::ostream& log);
std::filesystem::path cmd_prediction_change(const ExperimentSpec& spec, std::ostream& log);
double cmd_eval(const ExperimentSpec& spec, std::ostream& log);
std::vector<ReportBundle> cmd_reproduce(const std::string& profile, const ExperimentSpec& spec,
                                        std::ostream& log);

// Per-layer outcome counts of patching last-token MLPs.
struct PredictionChangeCounts {
  std::size_t none = 0, desired = 0, undesired = 0, other = 0;
  std::size_t total() const { return none + desired + undesired + other; }
};
std::vector<PredictionChangeCounts> prediction_change_counts(
    const Model& model, const std::vector<TokenPair>& pairs, const std::vector<TokenId>* restrict);

// Neuron ranking of one setting: dims sorted by decreasing mean IE.
struct NeuronRanking {
  std::string setting;
  std::vector<double> mean_ie;
  std::vector<std::size_t> order;
};

// Expected top-k overlap of independent uniformly random rankings (k/d).
double random_overlap_baseline(std::size_t k, std::size_t d);
// Monte Carlo estimate of the same quantity.
double simulate_random_overlap(std::size_t k, std::size_t d, std::size_t trials, std::uint64_t seed);

}  // namespace medtrace
