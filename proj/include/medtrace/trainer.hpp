#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "medtrace/model.hpp"
#include "medtrace/tasks.hpp"

namespace medtrace {

enum class LrSchedule { kConstant, kLinearDecay };
enum class LossMask { kAnswerOnly, kFullSequence };

std::string to_string(LrSchedule s);
std::string to_string(LossMask m);
LrSchedule parse_schedule(const std::string& s);
LossMask parse_loss_mask(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::kLinearDecay;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: epochs decide
  std::size_t warmup_steps = 0;
  double clip_norm = 1.0;     // global gradient norm; 0 disables
  double weight_decay = 0.0;  // decoupled, matrices only (not layernorm)
  std::uint64_t seed = 0;
  LossMask mask = LossMask::kAnswerOnly;
  std::size_t eval_every = 0;  // steps; 0 evaluates only at the end

  void validate() const;
};

// Parameter-shaped tensors.
using Gradients = Weights;

struct LossAndGradients {
  double loss = 0;           // mean cross-entropy over masked targets
  std::size_t targets = 0;   // number of masked targets
  Gradients gradients;
};

// mask[t] selects the prediction of seq[t + 1] from position t; its length is
// seq.size() - 1.
std::vector<std::uint8_t> make_mask(std::size_t seq_len, LossMask policy);

LossAndGradients loss_and_gradients(const Model& model, const std::vector<TokenSequence>& batch,
                                    const std::vector<std::vector<std::uint8_t>>& masks);

// Prompt tokens plus the single answer token.
struct LabeledSequence {
  TokenSequence prompt;
  TokenId answer = 0;
  std::string text;  // untokenised prompt, for disjointness checks
};

std::vector<LabeledSequence> tokenize_examples(const Vocabulary& vocab,
                                               const std::vector<TaskExample>& examples);

// Fraction of records whose restricted argmax equals the answer.
double evaluate(const Model& model, const std::vector<LabeledSequence>& eval_set,
                const std::vector<TokenId>& restrict);

struct EvalHook {
  const std::vector<LabeledSequence>* set = nullptr;
  const std::vector<TokenId>* restrict = nullptr;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double eval_accuracy = -1;  // negative when not evaluated at this step
};

struct TrainReport {
  std::size_t steps = 0;
  std::vector<StepLog> log;
  double final_accuracy = -1;
};

// Adam with the configured schedule; mutates the model's weights in place.
TrainReport train(Model& model, const std::vector<LabeledSequence>& corpus,
                  const TrainConfig& config, const EvalHook& eval = {});

// Refuses to run when any fine-tuning prompt also appears among the tracing
// prompts; otherwise trains like train().
TrainReport fine_tune(Model& model, const std::vector<LabeledSequence>& corpus,
                      const TrainConfig& config, const std::unordered_set<std::string>& trace_prompts,
                      const EvalHook& eval = {});

// Tab-separated step, lr, loss, eval_accuracy with '#' header lines.
void write_metrics_log(const std::filesystem::path& path, const TrainReport& report,
                       const TrainConfig& config, const std::vector<std::string>& extra_header);

}  // namespace medtrace
