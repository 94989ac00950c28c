#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "medtrace/error.hpp"
#include "medtrace/experiment.hpp"
#include "medtrace/weights_io.hpp"

using namespace medtrace;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t data_rows(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line[0] != '#') ++n;
  return n;
}

ExperimentSpec small_spec(const fs::path& out) {
  ExperimentSpec s;
  for (auto [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"n_layers", "2"}, {"d_model", "16"}, {"n_heads", "2"}, {"d_head", "8"},
           {"d_mlp", "32"}, {"rotary_dim", "4"}, {"max_steps", "20"}, {"warmup_steps", "2"},
           {"pairs", "2"}, {"templates", "two_op.add.1, two_op.mul.6"}, {"ft_max_steps", "5"}})
    s.set(k, v);
  s.out_dir = out;
  return s;
}

}  // namespace

TEST_CASE("spec settings") {
  ExperimentSpec s;
  s.set("family", "retrieval");
  CHECK(s.mode == PairingMode::kEntityChange);
  s.set("mode", "entity_change");
  s.set("family", "two_op");
  CHECK(s.mode == PairingMode::kEntityChange);
  CHECK_THROWS_AS(s.validate(), SpecError);
  s.set("mode", "result_preserving");
  CHECK_NOTHROW(s.validate());
  CHECK_THROWS_AS(s.set("colour", "red"), SpecError);
  CHECK_THROWS_AS(s.set("pairs", "-3"), SpecError);
  CHECK_THROWS_AS(s.set("lr", "fast"), SpecError);
  CHECK_THROWS_AS(s.set("activation", "relu"), SpecError);
  s.set("ft_lr", "0.5");
  CHECK(s.finetune.learning_rate == 0.5);
  CHECK(s.train.learning_rate != 0.5);
  s.set("kinds", "MLP");
  CHECK(s.kinds == std::vector<ComponentKind>{ComponentKind::kMlp});
}

TEST_CASE("spec files and hashes") {
  const auto path = fs::temp_directory_path() / "medtrace_spec.cfg";
  {
    std::ofstream out(path);
    out << "# comment\nfamily = two_op_words\n\nseed = 9   # trailing\nout = somewhere\n";
  }
  ExperimentSpec a;
  a.load_file(path);
  CHECK(a.family == TaskFamily::kTwoOpWords);
  CHECK(a.seed == 9);
  ExperimentSpec b = a;
  b.out_dir = "elsewhere";
  b.threads = 4;
  CHECK(a.hash() == b.hash());
  b.seed = 10;
  CHECK(a.hash() != b.hash());
  CHECK(a.canonical().find("seed = 9\n") != std::string::npos);
  {
    std::ofstream out(path);
    out << "family two_op\n";
  }
  CHECK_THROWS_AS(a.load_file(path), SpecError);
  fs::remove(path);
}

TEST_CASE("random overlap baseline") {
  CHECK(random_overlap_baseline(400, 4096) == doctest::Approx(400.0 / 4096));
  CHECK(simulate_random_overlap(13, 128, 400, 1) == doctest::Approx(13.0 / 128).epsilon(0.1));
  CHECK_THROWS_AS(random_overlap_baseline(5, 4), ContractViolation);
}

TEST_CASE("train, trace and follow-up commands on a small model") {
  const fs::path out = fs::temp_directory_path() / "medtrace_experiment_test";
  fs::remove_all(out);
  std::ostringstream log;
  ExperimentSpec spec = small_spec(out);
  const TrainOutcome t = cmd_train(spec, log);
  CHECK(fs::exists(t.checkpoint));
  CHECK(fs::exists(out / "metrics.tsv"));
  CHECK(t.accuracy >= 0.0);

  spec.checkpoint = t.checkpoint;
  spec.out_dir = out / "trace";
  const ReportBundle b = cmd_trace(spec, log);
  CHECK(b.ri.pairs + b.ri.skipped == 4);
  CHECK(b.ri.ri >= 0.0);
  CHECK(b.ri.ri <= 1.0);
  bool saw_heatmap = false;
  for (const auto& f : b.files) {
    CHECK(fs::exists(f));
    if (f.filename().string().starts_with("heatmap_mlp_T")) {
      saw_heatmap = true;
      const std::string text = slurp(f);
      CHECK(text.find("# spec_hash: ") == 0);
      CHECK(text.find("layer,position,kind,mean_ie,std_ie,n") != std::string::npos);
    }
  }
  CHECK(saw_heatmap);
  CHECK(data_rows(out / "trace" / "audit.tsv") > 1);
  CHECK(data_rows(out / "trace" / "corpus.tsv") == 4);

  ExperimentSpec again = spec;
  again.out_dir = out / "trace2";
  cmd_trace(again, log);
  CHECK(slurp(out / "trace" / "ri.csv") == slurp(out / "trace2" / "ri.csv"));
  CHECK(slurp(out / "trace" / "audit.tsv") == slurp(out / "trace2" / "audit.tsv"));

  ExperimentSpec full = spec;
  full.restrict = RestrictPolicy::kVocabulary;
  full.kinds = {ComponentKind::kMlp};
  full.out_dir = out / "trace_vocab";
  const ReportBundle fb = cmd_trace(full, log);
  CHECK(fb.ri.pairs + fb.ri.skipped == 4);
  CHECK_FALSE(fs::exists(out / "trace_vocab" / "heatmap_attn_T8.csv"));

  ExperimentSpec pc = spec;
  CHECK_THROWS_AS(cmd_prediction_change(pc, log), SpecError);
  pc.mode = PairingMode::kResultPreserving;
  pc.out_dir = out / "pc";
  const auto pc_file = cmd_prediction_change(pc, log);
  CHECK(data_rows(pc_file) == 3);

  ExperimentSpec nt = spec;
  nt.templates.clear();
  nt.pairs_per_template = 1;
  nt.neuron_settings = {"ar", "words"};
  nt.out_dir = out / "neurons";
  const auto overlap = cmd_neuron_trace(nt, log);
  CHECK(data_rows(overlap) == 1 + 4 + 1);
  CHECK(data_rows(out / "neurons" / "neuron_rankings.csv") == 1 + 2 * 16);
  nt.neuron_settings = {"ar"};
  CHECK_THROWS_AS(cmd_neuron_trace(nt, log), SpecError);

  ExperimentSpec ft = spec;
  ft.family = TaskFamily::kThreeOp;
  ft.templates.clear();
  ft.pairs_per_template = 1;
  ft.out_dir = out / "ft";
  const TrainOutcome tuned = cmd_finetune(ft, log);
  CHECK(fs::exists(tuned.checkpoint));
  CHECK(fs::exists(t.checkpoint));

  Checkpoint flat = load_weights(t.checkpoint);
  flat.weights.unembedding.fill(0.0);
  save_weights(out / "flat.ctw", flat.config, flat.weights);
  ExperimentSpec zero = spec;
  zero.checkpoint = out / "flat.ctw";
  zero.out_dir = out / "trace_flat";
  const ReportBundle zb = cmd_trace(zero, log);
  CHECK(zb.ri.pairs == 4);
  CHECK(std::isnan(zb.ri.ri));
  CHECK(slurp(out / "trace_flat" / "ri.csv").find(",nan,") != std::string::npos);

  ExperimentSpec missing = spec;
  missing.checkpoint = out / "absent.ctw";
  CHECK_THROWS_AS(cmd_trace(missing, log), SpecError);
  CHECK_THROWS_AS(cmd_reproduce("nonsense", spec, log), SpecError);
  fs::remove_all(out);
}
