#include "medtrace/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "medtrace/error.hpp"
#include "medtrace/report.hpp"
#include "medtrace/weights_io.hpp"

namespace medtrace {

namespace fs = std::filesystem;

std::string to_string(RestrictPolicy p) { return p == RestrictPolicy::kAnswerSet ? "s" : "vocab"; }

RestrictPolicy parse_restrict(const std::string& s) {
  if (s == "s") return RestrictPolicy::kAnswerSet;
  if (s == "vocab") return RestrictPolicy::kVocabulary;
  throw SpecError("unknown restriction '" + s + "' (expected s or vocab)");
}

namespace {

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw SpecError("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

long parse_long(const std::string& key, const std::string& v) {
  long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw SpecError("setting '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw SpecError("setting '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw SpecError("setting '" + key + "' expects true or false, got '" + v + "'");
}

std::string ri_aggregation_name(RiAggregation a) {
  return a == RiAggregation::kMeanThenLog ? "mean_then_log" : "log_then_mean";
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Configuration errors inside a spec surface as spec errors.
template <class F>
auto as_spec_error(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw SpecError(e.what());
  }
}

}  // namespace

ExperimentSpec::ExperimentSpec() {
  train.learning_rate = 1e-3;
  train.batch_size = 16;
  train.epochs = 1000;
  train.max_steps = 3000;
  train.warmup_steps = 100;
  train.weight_decay = 0.3;
  train.seed = 11;
  finetune = train;
  finetune.max_steps = 1500;
  finetune.seed = 13;
}

void ExperimentSpec::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string v = trim(raw_value);
  auto u64 = [&] { return parse_unsigned<std::uint64_t>(key, v); };
  auto sz = [&] { return parse_unsigned<std::size_t>(key, v); };
  if (key == "family") {
    family = parse_family(v);
    if (!mode_explicit) mode = default_mode(family);
  } else if (key == "mode") {
    mode = parse_mode(v);
    mode_explicit = true;
  } else if (key == "kinds") {
    kinds.clear();
    for (const auto& k : split_list(v)) kinds.push_back(as_spec_error([&] { return parse_component_kind(k); }));
  } else if (key == "metric") {
    metric = parse_metric(v);
  } else if (key == "pairs") {
    pairs_per_template = sz();
  } else if (key == "max_value") {
    operands.max_value = parse_long(key, v);
  } else if (key == "operand_max") {
    operands.operand_max = parse_long(key, v);
  } else if (key == "few_shot") {
    few_shot = sz();
  } else if (key == "restrict") {
    restrict = parse_restrict(v);
  } else if (key == "seed") {
    seed = u64();
  } else if (key == "kb_seed") {
    kb_seed = u64();
  } else if (key == "templates") {
    templates = split_list(v);
  } else if (key == "threads") {
    threads = sz();
  } else if (key == "ri_aggregation") {
    if (v == "mean_then_log") ri_aggregation = RiAggregation::kMeanThenLog;
    else if (v == "log_then_mean") ri_aggregation = RiAggregation::kLogThenMean;
    else throw SpecError("unknown ri_aggregation '" + v + "'");
  } else if (key == "skip_degenerate") {
    skip_degenerate = parse_bool(key, v);
  } else if (key == "n_layers") {
    model.n_layers = sz();
  } else if (key == "d_model") {
    model.d_model = sz();
  } else if (key == "n_heads") {
    model.n_heads = sz();
  } else if (key == "d_head") {
    model.d_head = sz();
  } else if (key == "d_mlp") {
    model.d_mlp = sz();
  } else if (key == "max_seq_len") {
    model.max_seq_len = sz();
  } else if (key == "rotary_dim") {
    model.rotary_dim = sz();
  } else if (key == "activation") {
    model.mlp_activation = as_spec_error([&] { return parse_activation(v); });
  } else if (key == "layernorm") {
    model.use_layernorm = parse_bool(key, v);
  } else if (key == "init_seed") {
    init_seed = u64();
  } else if (key.starts_with("ft_") || key == "lr" || key == "schedule" || key == "batch_size" ||
             key == "epochs" || key == "max_steps" || key == "warmup_steps" ||
             key == "clip_norm" || key == "weight_decay" || key == "loss_mask" || key == "eval_every" ||
             key == "train_seed") {
    const bool ft = key.starts_with("ft_");
    TrainConfig& c = ft ? finetune : train;
    const std::string k = ft ? key.substr(3) : key;
    if (k == "lr") c.learning_rate = parse_double(key, v);
    else if (k == "schedule") c.schedule = as_spec_error([&] { return parse_schedule(v); });
    else if (k == "batch_size") c.batch_size = sz();
    else if (k == "epochs") c.epochs = sz();
    else if (k == "max_steps") c.max_steps = sz();
    else if (k == "warmup_steps") c.warmup_steps = sz();
    else if (k == "clip_norm") c.clip_norm = parse_double(key, v);
    else if (k == "weight_decay") c.weight_decay = parse_double(key, v);
    else if (k == "loss_mask") c.mask = as_spec_error([&] { return parse_loss_mask(v); });
    else if (k == "eval_every") c.eval_every = sz();
    else if (k == "train_seed" || k == "seed") c.seed = u64();
    else throw SpecError("unknown setting '" + key + "'");
  } else if (key == "train_families") {
    train_families.clear();
    for (const auto& f : split_list(v)) train_families.push_back(parse_family(f));
  } else if (key == "held_out") {
    held_out = parse_double(key, v);
  } else if (key == "retrieval_examples") {
    retrieval_examples = sz();
  } else if (key == "retrieval_operand_max") {
    retrieval_operand_max = parse_long(key, v);
  } else if (key == "words_operand_max") {
    words_operand_max = parse_long(key, v);
  } else if (key == "neuron_layer") {
    neuron_layer = static_cast<int>(parse_long(key, v));
  } else if (key == "neuron_position") {
    neuron_position = static_cast<int>(parse_long(key, v));
  } else if (key == "top_k") {
    top_k = sz();
  } else if (key == "neuron_settings") {
    neuron_settings = split_list(v);
  } else if (key == "checkpoint") {
    checkpoint = v;
  } else if (key == "out") {
    out_dir = v;
  } else {
    throw SpecError("unknown setting '" + key + "'");
  }
}

void ExperimentSpec::load_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot read config file " + path.string());
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash_at = line.find('#');
    if (hash_at != std::string::npos) line.resize(hash_at);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw SpecError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const SpecError& e) {
      throw SpecError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void ExperimentSpec::validate() const {
  check_mode(family, mode);
  if (pairs_per_template == 0) throw SpecError("pairs must be at least 1");
  if (kinds.empty()) throw SpecError("kinds must name at least one component kind");
  if (held_out < 0 || held_out >= 1) throw SpecError("held_out must lie in [0, 1)");
  as_spec_error([&] {
    operands.validate();
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = 1;  // filled in from the task vocabulary
    m.validate();
    train.validate();
    finetune.validate();
    return 0;
  });
}

std::string ExperimentSpec::canonical() const {
  std::ostringstream o;
  auto kv = [&](const std::string& k, const std::string& v) { o << k << " = " << v << '\n'; };
  auto families = [](const std::vector<TaskFamily>& fs) {
    std::string s;
    for (auto f : fs) s += (s.empty() ? "" : ",") + to_string(f);
    return s;
  };
  std::string kind_list;
  for (auto k : kinds) kind_list += (kind_list.empty() ? "" : ",") + to_string(k);
  std::string template_list, setting_list;
  for (const auto& t : templates) template_list += (template_list.empty() ? "" : ",") + t;
  for (const auto& s : neuron_settings) setting_list += (setting_list.empty() ? "" : ",") + s;
  kv("family", to_string(family));
  kv("mode", to_string(mode));
  kv("kinds", kind_list);
  kv("metric", to_string(metric));
  kv("pairs", std::to_string(pairs_per_template));
  kv("max_value", std::to_string(operands.max_value));
  kv("operand_max", std::to_string(operands.operand_max));
  kv("few_shot", std::to_string(few_shot));
  kv("restrict", to_string(restrict));
  kv("seed", std::to_string(seed));
  kv("kb_seed", std::to_string(kb_seed));
  kv("templates", template_list);
  kv("ri_aggregation", ri_aggregation_name(ri_aggregation));
  kv("skip_degenerate", skip_degenerate ? "true" : "false");
  kv("n_layers", std::to_string(model.n_layers));
  kv("d_model", std::to_string(model.d_model));
  kv("n_heads", std::to_string(model.n_heads));
  kv("d_head", std::to_string(model.d_head));
  kv("d_mlp", std::to_string(model.d_mlp));
  kv("max_seq_len", std::to_string(model.max_seq_len));
  kv("rotary_dim", std::to_string(model.rotary_dim));
  kv("activation", to_string(model.mlp_activation));
  kv("layernorm", model.use_layernorm ? "true" : "false");
  kv("init_seed", std::to_string(init_seed));
  for (const auto* c : {&train, &finetune}) {
    const std::string p = c == &train ? "" : "ft_";
    kv(p + "lr", format_double(c->learning_rate));
    kv(p + "schedule", to_string(c->schedule));
    kv(p + "batch_size", std::to_string(c->batch_size));
    kv(p + "epochs", std::to_string(c->epochs));
    kv(p + "max_steps", std::to_string(c->max_steps));
    kv(p + "warmup_steps", std::to_string(c->warmup_steps));
    kv(p + "clip_norm", format_double(c->clip_norm));
    kv(p + "weight_decay", format_double(c->weight_decay));
    kv(p + "loss_mask", to_string(c->mask));
    kv(p + "eval_every", std::to_string(c->eval_every));
    kv(p + "train_seed", std::to_string(c->seed));
  }
  kv("train_families", families(train_families));
  kv("held_out", format_double(held_out));
  kv("retrieval_examples", std::to_string(retrieval_examples));
  kv("retrieval_operand_max", std::to_string(retrieval_operand_max));
  kv("words_operand_max", std::to_string(words_operand_max));
  kv("neuron_layer", std::to_string(neuron_layer));
  kv("neuron_position", std::to_string(neuron_position));
  kv("top_k", std::to_string(top_k));
  kv("neuron_settings", setting_list);
  return o.str();
}

std::string ExperimentSpec::hash() const { return hex64(fnv1a64(canonical())); }

// ---------------------------------------------------------------------------

Workspace::Workspace(ExperimentSpec s) : spec(std::move(s)), catalog(spec.kb_seed) {
  spec.model.vocab_size = catalog.vocabulary().size();
  spec.validate();
}

OperandSet Workspace::operands_for(TaskFamily f) const {
  switch (f) {
    case TaskFamily::kTwoOpWords:
      return {20, spec.words_operand_max, true};
    case TaskFamily::kRetrieval:
      return {spec.retrieval_operand_max, spec.retrieval_operand_max, false};
    default:
      return spec.operands;
  }
}

std::vector<TokenId> Workspace::answer_set(TaskFamily f) const {
  return catalog.answer_set(f, operands_for(f));
}

std::pair<std::vector<TaskExample>, std::vector<TaskExample>> Workspace::examples(
    TaskFamily f) const {
  const std::uint64_t split_seed = mix_seed(spec.train.seed, static_cast<std::uint64_t>(f));
  switch (f) {
    case TaskFamily::kFactual: {
      auto all = enumerate_factual(catalog);
      return {all, all};
    }
    case TaskFamily::kRetrieval:
      return split_examples(sample_retrieval(catalog, operands_for(f), spec.retrieval_examples,
                                             split_seed),
                            spec.held_out, split_seed);
    default:
      return split_examples(enumerate_arithmetic(catalog, f, operands_for(f)), spec.held_out,
                            split_seed);
  }
}

ModelConfig Workspace::model_config() const { return spec.model; }

Model Workspace::load_model(const fs::path& path) const {
  if (path.empty()) throw SpecError("no checkpoint given");
  if (!fs::exists(path)) throw SpecError("checkpoint " + path.string() + " does not exist");
  Checkpoint ck = load_weights(path);
  if (ck.config.vocab_size != catalog.vocabulary().size()) {
    throw SpecError("checkpoint vocabulary size " + std::to_string(ck.config.vocab_size) +
                    " differs from the task vocabulary (" +
                    std::to_string(catalog.vocabulary().size()) + ")");
  }
  return Model(ck.config, std::move(ck.weights));
}

std::vector<PromptPair> Workspace::pairs(TaskFamily f, PairingMode m,
                                         const std::unordered_set<std::string>* exclude) const {
  SamplerConfig sc;
  sc.family = f;
  sc.mode = m;
  sc.operands = operands_for(f);
  sc.few_shot = spec.few_shot;
  sc.exclude = exclude;
  const std::vector<std::string> none;
  return build_pairs(catalog, sc, spec.pairs_per_template, spec.seed,
                     f == spec.family ? spec.templates : none);
}

std::vector<TokenPair> Workspace::tokenize(const std::vector<PromptPair>& pairs) const {
  const Vocabulary& v = catalog.vocabulary();
  std::vector<TokenPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    TokenPair tp{v.tokenize(p.p1), v.tokenize(p.p2), v.id(p.r), v.id(p.r_prime), p.provenance()};
    align_positions(tp.p1, tp.p2, p.p1, p.p2);
    out.push_back(std::move(tp));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Manifest manifest_for(const ExperimentSpec& spec, const std::vector<std::string>& notes = {}) {
  std::string canon = spec.canonical();
  Manifest m;
  m.seed = spec.seed;
  if (!spec.checkpoint.empty() && fs::exists(spec.checkpoint)) {
    const std::string digest = file_digest(spec.checkpoint);
    canon += "checkpoint_digest = " + digest + "\n";
    m.notes.push_back("checkpoint_digest: " + digest);
  }
  m.spec_hash = hex64(fnv1a64(canon));
  m.notes.insert(m.notes.end(), notes.begin(), notes.end());
  return m;
}

std::vector<std::string> canonical_lines(const ExperimentSpec& spec) {
  std::vector<std::string> out;
  std::istringstream in(spec.canonical());
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<TaskFamily> training_families(const ExperimentSpec& spec) {
  return spec.train_families.empty() ? std::vector<TaskFamily>{spec.family} : spec.train_families;
}

std::unordered_set<std::string> prompt_set(const std::vector<TaskExample>& examples) {
  std::unordered_set<std::string> out;
  for (const auto& e : examples) out.insert(e.prompt);
  return out;
}

// Trace pairs of three-operand queries are drawn from prompts outside the
// fine-tuning split.
std::optional<std::unordered_set<std::string>> trace_exclusions(const Workspace& ws, TaskFamily f) {
  if (f != TaskFamily::kThreeOp) return std::nullopt;
  return prompt_set(ws.examples(TaskFamily::kThreeOp).first);
}

std::vector<PromptPair> trace_pairs(const Workspace& ws, TaskFamily f, PairingMode m) {
  const auto exclude = trace_exclusions(ws, f);
  return ws.pairs(f, m, exclude ? &*exclude : nullptr);
}

void log_line(std::ostream& log, const std::string& s) { log << s << std::endl; }

std::string kind_slug(ComponentKind k) { return lower(to_string(k)); }

CellStats stats_of(const std::vector<double>& vals) {
  CellStats c;
  c.n = vals.size();
  if (c.n == 0) return c;
  double total = 0;
  for (double v : vals) total += v;
  c.mean = total / static_cast<double>(c.n);
  double sq = 0;
  for (double v : vals) sq += (v - c.mean) * (v - c.mean);
  c.std = std::sqrt(sq / static_cast<double>(c.n));
  return c;
}

}  // namespace

TrainOutcome cmd_train(const ExperimentSpec& spec, std::ostream& log) {
  Workspace ws(spec);
  fs::create_directories(spec.out_dir);
  std::vector<LabeledSequence> corpus;
  std::string family_list;
  for (TaskFamily f : training_families(spec)) {
    auto part = tokenize_examples(ws.catalog.vocabulary(), ws.examples(f).first);
    corpus.insert(corpus.end(), part.begin(), part.end());
    family_list += (family_list.empty() ? "" : ",") + to_string(f);
  }
  const auto held = tokenize_examples(ws.catalog.vocabulary(), ws.examples(spec.family).second);
  const auto restrict = ws.answer_set(spec.family);

  const ModelConfig cfg = ws.model_config();
  Model model(cfg, Weights::random(cfg, spec.init_seed));
  log_line(log, "training on " + family_list + ": " + std::to_string(corpus.size()) +
                    " examples, " + std::to_string(model.weights().parameter_count()) +
                    " parameters");
  const TrainReport report = train(model, corpus, spec.train, {&held, &restrict});

  TrainOutcome out;
  out.checkpoint = spec.out_dir / "model.ctw";
  out.accuracy = report.final_accuracy;
  save_weights(out.checkpoint, cfg, model.weights(), "step " + std::to_string(report.steps));
  ws.catalog.vocabulary().save(spec.out_dir / "vocab.txt");
  write_metrics_log(spec.out_dir / "metrics.tsv", report, spec.train,
                    {"train_families: " + family_list,
                     "eval: held-out " + to_string(spec.family) + ", restricted argmax"});
  log_line(log, "held-out accuracy (" + to_string(spec.family) + "): " +
                    format_double(out.accuracy) + " after " + std::to_string(report.steps) +
                    " steps");
  return out;
}

TrainOutcome cmd_finetune(const ExperimentSpec& spec, std::ostream& log) {
  ExperimentSpec s = spec;
  if (s.family != TaskFamily::kThreeOp) throw SpecError("finetune expects family three_op");
  Workspace ws(s);
  fs::create_directories(s.out_dir);
  Model model = ws.load_model(s.checkpoint);
  const auto [train_ex, held_ex] = ws.examples(TaskFamily::kThreeOp);
  const auto corpus = tokenize_examples(ws.catalog.vocabulary(), train_ex);
  const auto held = tokenize_examples(ws.catalog.vocabulary(), held_ex);
  const auto restrict = ws.answer_set(TaskFamily::kThreeOp);

  std::unordered_set<std::string> traced;
  for (const auto& p : trace_pairs(ws, TaskFamily::kThreeOp, s.mode)) {
    traced.insert(p.p1.substr(p.prefix.size()));
    traced.insert(p.p2.substr(p.prefix.size()));
  }
  const double before = evaluate(model, held, restrict);
  const TrainReport report = fine_tune(model, corpus, s.finetune, traced, {&held, &restrict});

  TrainOutcome out;
  out.checkpoint = s.out_dir / "model_finetuned.ctw";
  out.accuracy = report.final_accuracy;
  save_weights(out.checkpoint, model.config(), model.weights(),
               "finetune step " + std::to_string(report.steps));
  write_metrics_log(s.out_dir / "metrics_finetune.tsv", report, s.finetune,
                    {"base checkpoint digest: " + file_digest(s.checkpoint),
                     "three_op held-out accuracy before: " + format_double(before),
                     "trace prompts checked disjoint: " + std::to_string(traced.size())});
  log_line(log, "three_op held-out accuracy: " + format_double(before) + " -> " +
                    format_double(out.accuracy));
  return out;
}

ReportBundle cmd_trace(const ExperimentSpec& spec, std::ostream& log) {
  Workspace ws(spec);
  for (auto k : spec.kinds)
    if (k == ComponentKind::kNeuron) throw SpecError("trace covers MLP and ATTN; use neuron-trace");
  const Model model = ws.load_model(spec.checkpoint);
  const std::size_t L = model.config().n_layers;
  fs::create_directories(spec.out_dir);

  const auto prompt_pairs = trace_pairs(ws, spec.family, spec.mode);
  const auto pairs = ws.tokenize(prompt_pairs);
  const auto restrict_set = ws.answer_set(spec.family);
  const std::vector<TokenId>* restrict =
      spec.restrict == RestrictPolicy::kAnswerSet ? &restrict_set : nullptr;

  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].p2.size()].push_back(i);

  const Manifest manifest =
      manifest_for(spec, {"setting: " + to_string(spec.family) + " " + to_string(spec.mode),
                          "cells average over pairs and templates of one token length"});
  ReportBundle bundle;
  bundle.dir = spec.out_dir;
  bundle.ri.label = "pooled";
  std::vector<AuditRow> audit;
  std::map<std::pair<ComponentKind, std::size_t>, std::vector<double>> last_token;
  const bool want_ri =
      std::find(spec.kinds.begin(), spec.kinds.end(), ComponentKind::kMlp) != spec.kinds.end();

  for (const auto& [T, members] : groups) {
    std::vector<TokenPair> group;
    for (std::size_t i : members) group.push_back(pairs[i]);
    std::vector<ComponentId> components;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t t = 0; t < T; ++t)
        for (auto k : spec.kinds)
          components.push_back({k, static_cast<int>(l), static_cast<int>(t), -1});

    std::vector<AuditRow> rows;
    std::vector<std::size_t> skipped;
    SweepOptions opts;
    opts.metric = spec.metric;
    opts.restrict = restrict;
    opts.threads = spec.threads;
    opts.audit = &rows;
    opts.skip_degenerate = spec.skip_degenerate;
    opts.skipped = &skipped;
    const EffectGrid grid = sweep(model, group, components, opts);
    for (auto& r : rows) {
      r.pair = members[r.pair];
      audit.push_back(r);
    }

    for (auto k : spec.kinds) {
      const fs::path file = spec.out_dir / ("heatmap_" + kind_slug(k) + "_T" + std::to_string(T) + ".csv");
      write_report(file, manifest, heatmap_csv(grid, k));
      bundle.files.push_back(file);
      for (std::size_t l = 0; l < L; ++l) {
        const auto& vals = grid.per_pair({k, static_cast<int>(l), static_cast<int>(T) - 1, -1});
        auto& acc = last_token[{k, l}];
        acc.insert(acc.end(), vals.begin(), vals.end());
      }
    }

    RiSummary g;
    g.label = "T" + std::to_string(T);
    g.pairs = group.size() - skipped.size();
    g.skipped = skipped.size();
    if (want_ri) {
      try {
        const RIReport rep = relative_importance(grid, late_mlp_subset(L), spec.ri_aggregation);
        for (const auto& [id, c] : rep.contributions) {
          g.denominator += c;
          if (std::find(rep.subset.begin(), rep.subset.end(), id) != rep.subset.end()) g.numerator += c;
        }
        g.ri = rep.ri;
        g.clamped = rep.clamped_count;
      } catch (const DegenerateGridError&) {
        // no MLP cell has a positive effect
        g.ri = std::numeric_limits<double>::quiet_NaN();
        for (const auto& id : grid.components(ComponentKind::kMlp)) {
          for (double v : grid.per_pair(id)) g.clamped += v < 0;
        }
      }
    }
    bundle.ri.numerator += g.numerator;
    bundle.ri.denominator += g.denominator;
    bundle.ri.clamped += g.clamped;
    bundle.ri.pairs += g.pairs;
    bundle.ri.skipped += g.skipped;
    bundle.groups.push_back(g);
  }
  if (want_ri) {
    bundle.ri.ri = bundle.ri.denominator > 0 ? bundle.ri.numerator / bundle.ri.denominator
                                             : std::numeric_limits<double>::quiet_NaN();
  }

  std::ostringstream profile;
  profile << "layer,position,kind,mean_ie,std_ie,n\n";
  for (auto k : spec.kinds) {
    for (std::size_t l = 0; l < L; ++l) {
      const CellStats c = stats_of(last_token[{k, l}]);
      profile << l << ",-1," << to_string(k) << ',' << format_double(c.mean) << ','
              << format_double(c.std) << ',' << c.n << '\n';
    }
  }
  const fs::path profile_file = spec.out_dir / "profile_last_token.csv";
  write_report(profile_file, manifest, profile.str());

  std::ostringstream ri;
  ri << "group,pairs,skipped,numerator,denominator,ri,clamped\n";
  auto ri_row = [&](const RiSummary& g) {
    ri << g.label << ',' << g.pairs << ',' << g.skipped << ',' << format_double(g.numerator) << ','
       << format_double(g.denominator) << ',' << format_double(g.ri) << ',' << g.clamped << '\n';
  };
  for (const auto& g : bundle.groups) ri_row(g);
  ri_row(bundle.ri);
  const fs::path ri_file = spec.out_dir / "ri.csv";
  write_report(ri_file, manifest, ri.str());

  const fs::path corpus_file = spec.out_dir / "corpus.tsv";
  auto corpus_header = manifest.lines();
  corpus_header.push_back("pairs per template: " + std::to_string(spec.pairs_per_template) +
                          ", total " + std::to_string(prompt_pairs.size()));
  corpus_header.push_back("exemplars: k=" + std::to_string(spec.few_shot) +
                          " solved queries of the same template, operands disjoint from both "
                          "queries, pairwise distinct, drawn from the pair's own stream");
  write_corpus(corpus_file, prompt_pairs, corpus_header);

  const fs::path audit_file = spec.out_dir / "audit.tsv";
  write_audit(audit_file, audit, manifest.lines());

  const fs::path manifest_file = spec.out_dir / "manifest.txt";
  std::string echo;
  for (const auto& line : canonical_lines(spec)) echo += line + '\n';
  write_report(manifest_file, manifest, echo);

  bundle.files.insert(bundle.files.end(), {profile_file, ri_file, corpus_file, audit_file, manifest_file});
  log_line(log, "trace " + to_string(spec.family) + "/" + to_string(spec.mode) + ": " +
                    std::to_string(bundle.ri.pairs) + " pairs (" + std::to_string(bundle.ri.skipped) +
                    " skipped), RI = " + format_double(bundle.ri.ri));
  return bundle;
}

// ---------------------------------------------------------------------------

std::vector<PredictionChangeCounts> prediction_change_counts(
    const Model& model, const std::vector<TokenPair>& pairs, const std::vector<TokenId>* restrict) {
  const std::size_t L = model.config().n_layers;
  std::vector<PredictionChangeCounts> out(L);
  std::vector<TokenId> everything;
  if (!restrict) {
    everything.resize(model.config().vocab_size);
    std::iota(everything.begin(), everything.end(), TokenId{0});
  }
  const std::vector<TokenId>& allowed = restrict ? *restrict : everything;
  for (const auto& pair : pairs) {
    PairRunner runner(model, pair, restrict);
    for (std::size_t l = 0; l < L; ++l) {
      const PairOutcome o = runner.run(ComponentId::mlp(static_cast<int>(l), -1));
      switch (prediction_change(o.p_clean, o.p_patched, pair.r, allowed)) {
        case PredictionChange::kNone:
          ++out[l].none;
          break;
        case PredictionChange::kDesired:
          ++out[l].desired;
          break;
        case PredictionChange::kUndesired:
          ++out[l].undesired;
          break;
        case PredictionChange::kOther:
          ++out[l].other;
          break;
      }
    }
  }
  return out;
}

fs::path cmd_prediction_change(const ExperimentSpec& spec, std::ostream& log) {
  if (spec.mode != PairingMode::kResultPreserving) {
    throw SpecError("prediction-change needs mode result_preserving, got " + to_string(spec.mode));
  }
  Workspace ws(spec);
  const Model model = ws.load_model(spec.checkpoint);
  fs::create_directories(spec.out_dir);
  const auto pairs = ws.tokenize(trace_pairs(ws, spec.family, spec.mode));
  const auto restrict_set = ws.answer_set(spec.family);
  const auto counts = prediction_change_counts(
      model, pairs, spec.restrict == RestrictPolicy::kAnswerSet ? &restrict_set : nullptr);
  std::ostringstream body;
  body << "layer,none,desired,undesired,other,n\n";
  for (std::size_t l = 0; l < counts.size(); ++l) {
    const auto& c = counts[l];
    body << l << ',' << c.none << ',' << c.desired << ',' << c.undesired << ',' << c.other << ','
         << c.total() << '\n';
  }
  const fs::path file = spec.out_dir / "prediction_change.csv";
  write_report(file, manifest_for(spec, {"last-token MLP patches, restricted argmax"}), body.str());
  log_line(log, "prediction change over " + std::to_string(pairs.size()) + " pairs written to " +
                    file.string());
  return file;
}

// ---------------------------------------------------------------------------

double random_overlap_baseline(std::size_t k, std::size_t d) {
  if (d == 0 || k == 0 || k > d) throw ContractViolation("baseline needs 1 <= k <= d");
  return static_cast<double>(k) / static_cast<double>(d);
}

double simulate_random_overlap(std::size_t k, std::size_t d, std::size_t trials,
                               std::uint64_t seed) {
  if (trials == 0) throw ContractViolation("simulation needs at least one trial");
  std::vector<std::size_t> a(d), b(d);
  double total = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng(seed, i);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    rng.shuffle(a);
    rng.shuffle(b);
    total += top_k_overlap(a, b, k);
  }
  return total / static_cast<double>(trials);
}

namespace {

struct NeuronSetting {
  TaskFamily family;
  PairingMode mode;
};

NeuronSetting neuron_setting(const std::string& name) {
  if (name == "ar") return {TaskFamily::kTwoOp, PairingMode::kOperandChange};
  if (name == "ar_rp") return {TaskFamily::kTwoOp, PairingMode::kResultPreserving};
  if (name == "ar_op") return {TaskFamily::kTwoOp, PairingMode::kOperatorChange};
  if (name == "words") return {TaskFamily::kTwoOpWords, PairingMode::kOperandChange};
  if (name == "three_op") return {TaskFamily::kThreeOp, PairingMode::kOperandChange};
  if (name == "retrieval") return {TaskFamily::kRetrieval, PairingMode::kEntityChange};
  if (name == "factual") return {TaskFamily::kFactual, PairingMode::kSubjectChange};
  throw SpecError("unknown neuron setting '" + name +
                  "' (expected ar, ar_rp, ar_op, words, three_op, retrieval or factual)");
}

}  // namespace

fs::path cmd_neuron_trace(const ExperimentSpec& spec, std::ostream& log) {
  if (spec.neuron_settings.size() < 2) throw SpecError("neuron-trace compares at least two settings");
  Workspace ws(spec);
  const Model model = ws.load_model(spec.checkpoint);
  const std::size_t L = model.config().n_layers;
  const std::size_t D = model.config().d_model;
  const int layer = spec.neuron_layer < 0 ? static_cast<int>(L / 2) : spec.neuron_layer;
  if (static_cast<std::size_t>(layer) >= L) {
    throw SpecError("neuron_layer " + std::to_string(layer) + " outside the model's " +
                    std::to_string(L) + " layers");
  }
  const std::size_t k = spec.top_k > 0 ? spec.top_k
                                       : std::max<std::size_t>(1, static_cast<std::size_t>(
                                                                      std::lround(D / 10.0)));
  if (k > D) throw SpecError("top_k exceeds d_model");
  fs::create_directories(spec.out_dir);

  std::vector<NeuronRanking> rankings;
  for (const auto& name : spec.neuron_settings) {
    const NeuronSetting st = neuron_setting(name);
    check_mode(st.family, st.mode);
    const auto pairs = ws.tokenize(trace_pairs(ws, st.family, st.mode));
    const auto restrict_set = ws.answer_set(st.family);
    const std::vector<TokenId>* restrict =
        spec.restrict == RestrictPolicy::kAnswerSet ? &restrict_set : nullptr;
    std::map<std::size_t, std::vector<TokenPair>> groups;
    for (const auto& p : pairs) groups[p.p2.size()].push_back(p);
    std::vector<std::vector<double>> per_dim(D);
    for (const auto& [T, group] : groups) {
      const int pos = spec.neuron_position < 0 ? static_cast<int>(T) + spec.neuron_position
                                               : spec.neuron_position;
      if (pos < 0 || static_cast<std::size_t>(pos) >= T) {
        throw SpecError("neuron_position " + std::to_string(spec.neuron_position) +
                        " outside prompts of " + std::to_string(T) + " tokens");
      }
      SweepOptions opts;
      opts.metric = spec.metric;
      opts.restrict = restrict;
      opts.threads = spec.threads;
      opts.skip_degenerate = spec.skip_degenerate;
      const EffectGrid grid = sweep(model, group, neuron_grid(layer, pos, D), opts);
      for (std::size_t d = 0; d < D; ++d) {
        const auto& vals = grid.per_pair(ComponentId::neuron(layer, pos, static_cast<int>(d)));
        per_dim[d].insert(per_dim[d].end(), vals.begin(), vals.end());
      }
    }
    NeuronRanking r;
    r.setting = name;
    for (const auto& vals : per_dim) r.mean_ie.push_back(stats_of(vals).mean);
    r.order = rank_descending(r.mean_ie);
    rankings.push_back(std::move(r));
    log_line(log, "neuron effects for " + name + " over " + std::to_string(pairs.size()) + " pairs");
  }

  const Manifest manifest = manifest_for(
      spec, {"neurons of the MLP output at layer " + std::to_string(layer) + ", position " +
             std::to_string(spec.neuron_position)});
  std::ostringstream ranks;
  ranks << "setting,rank,dim,mean_ie\n";
  for (const auto& r : rankings)
    for (std::size_t i = 0; i < r.order.size(); ++i)
      ranks << r.setting << ',' << i << ',' << r.order[i] << ',' << format_double(r.mean_ie[r.order[i]])
            << '\n';
  write_report(spec.out_dir / "neuron_rankings.csv", manifest, ranks.str());

  const double baseline = random_overlap_baseline(k, D);
  std::ostringstream overlap;
  overlap << "setting_a,setting_b,k,overlap\n";
  for (const auto& a : rankings)
    for (const auto& b : rankings)
      overlap << a.setting << ',' << b.setting << ',' << k << ','
              << format_double(top_k_overlap(a.order, b.order, k)) << '\n';
  overlap << "random,random," << k << ',' << format_double(baseline) << '\n';
  const fs::path file = spec.out_dir / "neuron_overlap.csv";
  write_report(file, manifest, overlap.str());
  log_line(log, "top-" + std::to_string(k) + " overlap written to " + file.string() +
                    "; random baseline k/d = " + format_double(baseline));
  return file;
}

double cmd_eval(const ExperimentSpec& spec, std::ostream& log) {
  Workspace ws(spec);
  const Model model = ws.load_model(spec.checkpoint);
  const auto held = tokenize_examples(ws.catalog.vocabulary(), ws.examples(spec.family).second);
  const double acc = evaluate(model, held, ws.answer_set(spec.family));
  fs::create_directories(spec.out_dir);
  write_report(spec.out_dir / ("eval_" + to_string(spec.family) + ".csv"), manifest_for(spec),
               "family,n,accuracy\n" + to_string(spec.family) + "," + std::to_string(held.size()) +
                   "," + format_double(acc) + "\n");
  log_line(log, "accuracy on " + std::to_string(held.size()) + " held-out " +
                    to_string(spec.family) + " queries: " + format_double(acc));
  return acc;
}

// ---------------------------------------------------------------------------

namespace {

struct TableRow {
  std::string setting;
  std::string model;
  ExperimentSpec spec;
  ReportBundle bundle;
  std::string flag;
};

ReportBundle trace_into(const ExperimentSpec& base, const fs::path& checkpoint, TaskFamily f,
                        PairingMode m, const fs::path& dir, std::ostream& log) {
  ExperimentSpec s = base;
  s.family = f;
  s.mode = m;
  s.checkpoint = checkpoint;
  s.out_dir = dir;
  s.templates.clear();
  return cmd_trace(s, log);
}

void write_table(const fs::path& path, const ExperimentSpec& spec, const std::vector<TableRow>& rows) {
  std::ostringstream body;
  body << "setting,model,family,mode,metric,pairs,skipped,ri,clamped,flag\n";
  for (const auto& r : rows) {
    body << r.setting << ',' << r.model << ',' << to_string(r.spec.family) << ','
         << to_string(r.spec.mode) << ',' << to_string(r.spec.metric) << ',' << r.bundle.ri.pairs
         << ',' << r.bundle.ri.skipped << ',' << format_double(r.bundle.ri.ri) << ','
         << r.bundle.ri.clamped << ',' << r.flag << '\n';
  }
  write_report(path, manifest_for(spec, {"relative importance of late last-token MLPs"}), body.str());
}

void write_profiles(const fs::path& path, const ExperimentSpec& spec,
                    const std::vector<TableRow>& rows) {
  std::ostringstream body;
  body << "setting,layer,position,kind,mean_ie,std_ie,n\n";
  for (const auto& r : rows) {
    std::ifstream in(r.bundle.dir / "profile_last_token.csv");
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (!header_seen) {
        header_seen = true;
        continue;
      }
      body << r.setting << ',' << line << '\n';
    }
  }
  write_report(path, manifest_for(spec, {"last-token layer profiles"}), body.str());
}

ExperimentSpec with(const ExperimentSpec& base, TaskFamily f, PairingMode m, fs::path out,
                    std::vector<TaskFamily> train_families = {}) {
  ExperimentSpec s = base;
  s.family = f;
  s.mode = m;
  s.out_dir = std::move(out);
  s.templates.clear();
  if (!train_families.empty()) s.train_families = std::move(train_families);
  return s;
}

}  // namespace

std::vector<ReportBundle> cmd_reproduce(const std::string& profile, const ExperimentSpec& spec,
                                        std::ostream& log) {
  const fs::path root = spec.out_dir / profile;
  fs::create_directories(root);
  std::vector<TableRow> rows;
  ExperimentSpec table_spec = spec;
  table_spec.out_dir = root;

  auto add_row = [&](const std::string& setting, const std::string& model, const ExperimentSpec& s,
                     const fs::path& checkpoint) {
    ReportBundle b = trace_into(s, checkpoint, s.family, s.mode, root / ("trace_" + setting), log);
    ExperimentSpec echo = s;
    rows.push_back({setting, model, echo, b, ""});
  };

  if (profile == "two_op") {
    const auto t = cmd_train(with(spec, TaskFamily::kTwoOp, PairingMode::kOperandChange, root,
                                  {TaskFamily::kTwoOp}),
                             log);
    for (auto m : {PairingMode::kOperandChange, PairingMode::kResultPreserving,
                   PairingMode::kOperatorChange}) {
      add_row(to_string(m), "base", with(spec, TaskFamily::kTwoOp, m, root), t.checkpoint);
    }
    write_profiles(root / "profiles_last_token.csv", table_spec, rows);
  } else if (profile == "two_op_words") {
    const auto t = cmd_train(with(spec, TaskFamily::kTwoOpWords, PairingMode::kOperandChange, root,
                                  {TaskFamily::kTwoOp, TaskFamily::kTwoOpWords}),
                             log);
    add_row("digits_operand_change", "base",
            with(spec, TaskFamily::kTwoOp, PairingMode::kOperandChange, root), t.checkpoint);
    for (auto m : {PairingMode::kOperandChange, PairingMode::kResultPreserving}) {
      add_row("words_" + to_string(m), "base", with(spec, TaskFamily::kTwoOpWords, m, root),
              t.checkpoint);
    }
  } else if (profile == "three_op_before_after") {
    const auto base = cmd_train(with(spec, TaskFamily::kTwoOp, PairingMode::kOperandChange,
                                     root / "base", {TaskFamily::kTwoOp}),
                                log);
    ExperimentSpec ev = with(spec, TaskFamily::kThreeOp, PairingMode::kOperandChange, root / "base");
    ev.checkpoint = base.checkpoint;
    const double before = cmd_eval(ev, log);
    ExperimentSpec ft = with(spec, TaskFamily::kThreeOp, PairingMode::kOperandChange, root / "finetuned");
    ft.checkpoint = base.checkpoint;
    const auto tuned = cmd_finetune(ft, log);
    const ExperimentSpec tr = with(spec, TaskFamily::kThreeOp, PairingMode::kOperandChange, root);
    add_row("three_op_base", "base", tr, base.checkpoint);
    add_row("three_op_finetuned", "finetuned", tr, tuned.checkpoint);
    write_report(root / "accuracy.csv", manifest_for(table_spec),
                 "model,family,accuracy\nbase,three_op," + format_double(before) +
                     "\nfinetuned,three_op," + format_double(tuned.accuracy) + "\n");
  } else if (profile == "retrieval" || profile == "factual") {
    const TaskFamily f = profile == "retrieval" ? TaskFamily::kRetrieval : TaskFamily::kFactual;
    const auto t = cmd_train(with(spec, f, default_mode(f), root, {TaskFamily::kTwoOp, f}), log);
    add_row("arithmetic", "base", with(spec, TaskFamily::kTwoOp, PairingMode::kOperandChange, root),
            t.checkpoint);
    add_row(profile, "base", with(spec, f, default_mode(f), root), t.checkpoint);
    const double arithmetic = rows[0].bundle.ri.ri;
    const double own = rows[1].bundle.ri.ri;
    rows[1].flag = std::isnan(own) || std::isnan(arithmetic) ? "undefined"
                   : own < arithmetic                        ? "low"
                                                             : "not_low";
  } else {
    throw SpecError("unknown profile '" + profile +
                    "' (expected two_op, two_op_words, three_op_before_after, retrieval or factual)");
  }

  write_table(root / "ri_table.csv", table_spec, rows);
  std::vector<ReportBundle> out;
  for (auto& r : rows) out.push_back(std::move(r.bundle));
  log_line(log, "wrote " + (root / "ri_table.csv").string());
  return out;
}

}  // namespace medtrace
