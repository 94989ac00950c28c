#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "medtrace/random.hpp"
#include "medtrace/vocabulary.hpp"

namespace medtrace {

enum class TaskFamily { kTwoOp, kTwoOpWords, kThreeOp, kRetrieval, kFactual };
enum class PairingMode {
  kOperandChange,
  kResultPreserving,
  kOperatorChange,
  kEntityChange,
  kSubjectChange,
};

std::string to_string(TaskFamily f);
std::string to_string(PairingMode m);
TaskFamily parse_family(const std::string& s);
PairingMode parse_mode(const std::string& s);
bool is_arithmetic(TaskFamily f);
// Throws SpecError when the mode does not apply to the family.
void check_mode(TaskFamily family, PairingMode mode);
PairingMode default_mode(TaskFamily family);

// ---------------------------------------------------------------------------
// Arithmetic formulas

enum class Op : std::uint8_t { kAdd, kSub, kMul, kDiv };

char op_symbol(Op op);

// Two-operand formula n1 o1 n2, or a three-operand one grouped either as
// (n1 o1 n2) o2 n3 or n1 o1 (n2 o2 n3).
struct Formula {
  Op first = Op::kAdd;
  std::optional<Op> second;
  bool group_right = false;

  std::size_t arity() const { return second ? 3 : 2; }
  std::string to_string() const;  // e.g. "(n1+n2)*n3"
  auto operator<=>(const Formula&) const = default;
};

// Exact integer evaluation; nullopt for a zero divisor or a non-integer
// quotient at any step.
std::optional<long> try_eval(const Formula& f, std::span<const long> operands);
// Same, throwing InvalidSampleError.
long eval_formula(const Formula& f, std::span<const long> operands);

// ---------------------------------------------------------------------------
// Templates, operand sets, knowledge base

struct Template {
  std::string id;
  TaskFamily family = TaskFamily::kTwoOp;
  // Slots: {n1} {n2} {n3} {e1} {e2} {eq} {subject}
  std::string text;
  Formula formula;   // arithmetic only
  int type = 0;      // two-operand phrasing type 1..6, relation index for factual
};

// Numbers that may appear as operands and results.
struct OperandSet {
  long max_value = 300;  // results (and operands) lie in 1..max_value
  long operand_max = 0;  // sampling range for operands; 0 means max_value
  bool words = false;    // render as numeral words (max 20)

  long operand_limit() const { return operand_max > 0 ? std::min(operand_max, max_value) : max_value; }
  bool contains(long v) const { return v >= 1 && v <= max_value; }
  std::string render(long v) const;
  void validate() const;
};

struct Relation {
  std::string name;
  std::string text;  // cloze template with {subject}
  std::vector<std::string> subjects;
  std::map<std::string, std::string> object_of;
};

// Seeded synthetic (subject, relation, object) facts over fixed entity names.
class KnowledgeBase {
 public:
  explicit KnowledgeBase(std::uint64_t seed);
  const std::vector<Relation>& relations() const { return relations_; }
  const Relation& relation(std::size_t index) const;
  const Relation& relation(const std::string& name_or_text) const;
  const std::string& object(const std::string& relation, const std::string& subject) const;
  std::vector<std::string> all_objects() const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Relation> relations_;
};

// Everything task-related that the experiments share: the fixed vocabulary,
// the template catalogue and the knowledge base.
class TaskCatalog {
 public:
  explicit TaskCatalog(std::uint64_t kb_seed = 7);

  const Vocabulary& vocabulary() const { return vocab_; }
  const KnowledgeBase& kb() const { return kb_; }
  const std::vector<Template>& all_templates() const { return templates_; }
  std::vector<const Template*> templates(TaskFamily family) const;
  const Template& find_template(const std::string& id) const;
  // Two-operand template with the same phrasing type and another operator.
  const Template& sibling(const Template& t, Op op) const;
  const std::vector<std::string>& entities() const { return entities_; }

  // Tokens a prediction is constrained to (restricted argmax / restricted
  // probabilities): the numbers of `operands` for numeric tasks, every
  // knowledge-base object for factual queries.
  std::vector<TokenId> answer_set(TaskFamily family, const OperandSet& operands) const;

 private:
  KnowledgeBase kb_;
  std::vector<Template> templates_;
  std::vector<std::string> entities_;
  Vocabulary vocab_;
};

// ---------------------------------------------------------------------------
// Rendering

struct Rendered {
  std::string prompt;
  std::string answer;
};

Rendered render_arithmetic(const Template& t, const OperandSet& s, std::span<const long> operands);
Rendered render_retrieval(const Template& t, const OperandSet& s, long n1, long n2,
                          const std::string& e1, const std::string& e2, const std::string& eq);
Rendered render_factual(const KnowledgeBase& kb, const Template& t, const std::string& subject);

// k solved exemplars of the same template, joined before a query. Exemplar
// operands avoid `avoid`, exemplars are pairwise distinct.
std::string few_shot_prefix(const TaskCatalog& catalog, const Template& t, const OperandSet& s,
                            std::size_t k, const std::set<long>& avoid,
                            const std::set<std::string>& avoid_entities, Rng& rng);

// ---------------------------------------------------------------------------
// Pair sampling

struct PromptPair {
  TaskFamily family = TaskFamily::kTwoOp;
  PairingMode mode = PairingMode::kOperandChange;
  std::string template_id;   // p1's template
  std::string template_id2;  // p2's template (differs only for operator_change)
  std::string prefix;        // few-shot prefix shared by both prompts
  std::string p1, p2;        // full prompts, prefix included
  std::string r, r_prime;    // answers of p1 and p2
  std::vector<long> operands1, operands2;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  std::string provenance() const;
};

struct SamplerConfig {
  TaskFamily family = TaskFamily::kTwoOp;
  PairingMode mode = PairingMode::kOperandChange;
  OperandSet operands;
  std::size_t few_shot = 0;
  std::size_t retry_budget = 1000;
  // Prompts (without prefix) that sampled queries must avoid.
  const std::unordered_set<std::string>* exclude = nullptr;
};

PromptPair sample_pair(const TaskCatalog& catalog, const SamplerConfig& config, const Template& t,
                       std::uint64_t seed, std::uint64_t index);
// Template drawn from the family with the pair's own stream.
PromptPair sample_pair(const TaskCatalog& catalog, const SamplerConfig& config,
                       std::uint64_t seed);

// `pairs_per_template` pairs for each selected template (all templates of the
// family when `template_ids` is empty), in template order.
std::vector<PromptPair> build_pairs(const TaskCatalog& catalog, const SamplerConfig& config,
                                    std::size_t pairs_per_template, std::uint64_t seed,
                                    const std::vector<std::string>& template_ids = {});

// ---------------------------------------------------------------------------
// Supervised examples

struct TaskExample {
  std::string prompt;
  std::string answer;
  std::string template_id;
};

// Every (template, operand tuple) of an arithmetic family whose operands lie
// in 1..operand_limit and whose result lies in the operand set.
std::vector<TaskExample> enumerate_arithmetic(const TaskCatalog& catalog, TaskFamily family,
                                              const OperandSet& s);
std::vector<TaskExample> sample_retrieval(const TaskCatalog& catalog, const OperandSet& s,
                                          std::size_t count, std::uint64_t seed);
std::vector<TaskExample> enumerate_factual(const TaskCatalog& catalog);

// Deterministic split: shuffles with `seed` and returns (train, held_out).
std::pair<std::vector<TaskExample>, std::vector<TaskExample>> split_examples(
    std::vector<TaskExample> examples, double held_out_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Corpus file: '#' header lines, then one tab-separated record per pair:
// family, mode, template id, p1, p2, r, r', seed.

void write_corpus(const std::filesystem::path& path, const std::vector<PromptPair>& pairs,
                  const std::vector<std::string>& header_lines);
std::vector<PromptPair> read_corpus(const std::filesystem::path& path);

}  // namespace medtrace
