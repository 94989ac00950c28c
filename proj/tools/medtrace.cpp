#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medtrace/error.hpp"
#include "medtrace/experiment.hpp"

using namespace medtrace;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string metric;
  std::string restrict;
  std::optional<std::size_t> pairs;
  std::string checkpoint;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key = value settings file");
  cmd->add_option("--seed", o.seed, "pair sampling seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--metric", o.metric, "ie or ie-log");
  cmd->add_option("--restrict", o.restrict, "s or vocab");
  cmd->add_option("--pairs", o.pairs, "pairs per template");
  cmd->add_option("--checkpoint", o.checkpoint, "model weights");
  cmd->add_option("--threads", o.threads, "worker threads for sweeps");
  cmd->add_option("--set", o.sets, "extra key=value setting (repeatable)");
}

ExperimentSpec build_spec(const Overrides& o) {
  ExperimentSpec s;
  if (!o.config.empty()) s.load_file(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw SpecError("--set expects key=value, got '" + kv + "'");
    s.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) s.seed = *o.seed;
  if (!o.out.empty()) s.out_dir = o.out;
  if (!o.metric.empty()) s.metric = parse_metric(o.metric);
  if (!o.restrict.empty()) s.restrict = parse_restrict(o.restrict);
  if (o.pairs) s.pairs_per_template = *o.pairs;
  if (!o.checkpoint.empty()) s.checkpoint = o.checkpoint;
  if (o.threads) s.threads = *o.threads;
  s.validate();
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal mediation traces for toy transformers"};
  app.require_subcommand(1);
  Overrides o;
  std::string profile;

  auto* train = app.add_subcommand("train", "train a model on the configured families");
  auto* finetune = app.add_subcommand("finetune", "fine-tune a checkpoint on three-operand queries");
  auto* trace = app.add_subcommand("trace", "MLP/ATTN effect grids and relative importance");
  auto* neuron = app.add_subcommand("neuron-trace", "per-neuron effects and top-k overlap");
  auto* change = app.add_subcommand("prediction-change", "argmax changes under last-token MLP patches");
  auto* eval = app.add_subcommand("eval", "held-out accuracy of a checkpoint");
  auto* reproduce = app.add_subcommand("reproduce", "train and trace one named profile");
  reproduce->add_option("profile", profile,
                        "two_op, two_op_words, three_op_before_after, retrieval or factual")
      ->required();
  for (auto* cmd : {train, finetune, trace, neuron, change, eval, reproduce}) add_common(cmd, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const ExperimentSpec spec = build_spec(o);
    if (train->parsed()) {
      cmd_train(spec, std::cout);
    } else if (finetune->parsed()) {
      cmd_finetune(spec, std::cout);
    } else if (trace->parsed()) {
      cmd_trace(spec, std::cout);
    } else if (neuron->parsed()) {
      cmd_neuron_trace(spec, std::cout);
    } else if (change->parsed()) {
      cmd_prediction_change(spec, std::cout);
    } else if (eval->parsed()) {
      cmd_eval(spec, std::cout);
    } else if (reproduce->parsed()) {
      cmd_reproduce(profile, spec, std::cout);
    }
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
