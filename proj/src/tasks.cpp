#include "medtrace/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "medtrace/error.hpp"

namespace medtrace {

namespace {

constexpr std::array<Op, 4> kOps = {Op::kAdd, Op::kSub, Op::kMul, Op::kDiv};
constexpr std::array<const char*, 4> kOpNames = {"add", "sub", "mul", "div"};

const std::array<const char*, 20> kNumeralWords = {
    "one",     "two",     "three",     "four",     "five",    "six",     "seven",
    "eight",   "nine",    "ten",       "eleven",   "twelve",  "thirteen", "fourteen",
    "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"};

const std::string kPunctuation = "?:.,+-*/=";

// Phrasings per operator for the six two-operand types.
const std::array<std::array<const char*, 6>, 4> kTwoOpTexts = {{
    {"Q: How much is {n1} plus {n2}? A:", "Q: What is {n1} plus {n2}? A:",
     "Q: What is the result of {n1} plus {n2}? A:", "Q: What is the sum of {n1} and {n2}? A:",
     "The sum of {n1} and {n2} is", "{n1} + {n2} ="},
    {"Q: How much is {n1} minus {n2}? A:", "Q: What is {n1} minus {n2}? A:",
     "Q: What is the result of {n1} minus {n2}? A:",
     "Q: What is the difference between {n1} and {n2}? A:",
     "The difference between {n1} and {n2} is", "{n1} - {n2} ="},
    {"Q: How much is {n1} times {n2}? A:", "Q: What is {n1} times {n2}? A:",
     "Q: What is the result of {n1} times {n2}? A:",
     "Q: What is the product of {n1} and {n2}? A:", "The product of {n1} and {n2} is",
     "{n1} * {n2} ="},
    {"Q: How much is {n1} over {n2}? A:", "Q: What is {n1} over {n2}? A:",
     "Q: What is the result of {n1} over {n2}? A:",
     "Q: What is the ratio between {n1} and {n2}? A:", "The ratio of {n1} and {n2} is",
     "{n1} / {n2} ="},
}};

struct ThreeOpText {
  Op first, second;
  bool right;
  const char* text;
};

// (a+b)+c, (a*b)*c and (a+b)-c have right-grouped twins with the same value;
// only the left-grouped form is kept, leaving 29 combinations.
const std::array<ThreeOpText, 29> kThreeOpTexts = {{
    {Op::kAdd, Op::kAdd, false, "What is the sum of {n1}, {n2} and {n3}?"},
    {Op::kAdd, Op::kSub, false, "Sum {n1} and {n2} and subtract {n3}"},
    {Op::kAdd, Op::kMul, false, "Sum {n1} and {n2} and multiply by {n3}"},
    {Op::kAdd, Op::kDiv, false, "Sum {n1} and {n2} and divide by {n3}"},
    {Op::kSub, Op::kAdd, false, "Subtract {n2} from {n1} and add {n3}"},
    {Op::kSub, Op::kSub, false, "Subtract {n2} from {n1} and subtract {n3}"},
    {Op::kSub, Op::kMul, false, "What is the product of {n1} minus {n2} and {n3}?"},
    {Op::kSub, Op::kDiv, false, "Subtract {n2} from {n1} and divide by {n3}"},
    {Op::kMul, Op::kAdd, false, "Multiply {n1} by {n2} and add {n3}"},
    {Op::kMul, Op::kSub, false, "Multiply {n1} by {n2} and subtract {n3}"},
    {Op::kMul, Op::kMul, false, "What is the product of {n1}, {n2} and {n3}?"},
    {Op::kMul, Op::kDiv, false, "Multiply {n1} by {n2} and divide by {n3}"},
    {Op::kDiv, Op::kAdd, false, "Divide {n1} by {n2} and add {n3}"},
    {Op::kDiv, Op::kSub, false, "Divide {n1} by {n2} and subtract {n3}"},
    {Op::kDiv, Op::kMul, false, "Divide {n1} by {n2} and multiply by {n3}"},
    {Op::kDiv, Op::kDiv, false, "Divide {n1} by {n2} and divide by {n3}"},
    {Op::kAdd, Op::kMul, true, "What is the sum of {n1} and the product of {n2} and {n3}?"},
    {Op::kAdd, Op::kDiv, true, "What is the sum of {n1} and the ratio between {n2} and {n3}?"},
    {Op::kSub, Op::kAdd, true, "What is the difference between {n1} and the sum of {n2} and {n3}?"},
    {Op::kSub, Op::kSub, true,
     "What is the difference between {n1} and the difference between {n2} and {n3}?"},
    {Op::kSub, Op::kMul, true,
     "What is the difference between {n1} and the product of {n2} and {n3}?"},
    {Op::kSub, Op::kDiv, true,
     "What is the difference between {n1} and the ratio between {n2} and {n3}?"},
    {Op::kMul, Op::kAdd, true, "How much is {n1} times the sum of {n2} and {n3}?"},
    {Op::kMul, Op::kSub, true, "How much is {n1} times the difference between {n2} and {n3}?"},
    {Op::kMul, Op::kDiv, true, "How much is {n1} times the ratio between {n2} and {n3}?"},
    {Op::kDiv, Op::kAdd, true, "How much is {n1} divided by the sum of {n2} and {n3}?"},
    {Op::kDiv, Op::kSub, true, "How much is {n1} divided by the difference between {n2} and {n3}?"},
    {Op::kDiv, Op::kMul, true, "How much is {n1} divided by the product of {n2} and {n3}?"},
    {Op::kDiv, Op::kDiv, true, "How much is {n1} divided by the ratio between {n2} and {n3}?"},
}};

const std::array<const char*, 3> kRetrievalTexts = {
    "Paul has {n1} {e1} and {n2} {e2}. How many {eq} does Paul have?",
    "Anna bought {n1} {e1} and {n2} {e2}. How many {eq} did Anna buy?",
    "There are {n1} {e1} and {n2} {e2} in the box. How many {eq} are in the box?",
};

const std::vector<std::string> kEntities = {
    "apples", "bananas", "pens",   "cats",  "dogs",    "books",  "cups",   "keys",
    "coins",  "shells",  "rocks",  "birds", "lemons",  "plums",  "stamps", "chairs",
};

std::string numbered(char prefix, std::size_t i) {
  std::string s(1, prefix);
  if (i < 10) s += '0';
  return s + std::to_string(i);
}

std::vector<std::string> numbered_range(char prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(numbered(prefix, i));
  return out;
}

std::string fill(std::string text, const std::vector<std::pair<std::string, std::string>>& slots) {
  for (const auto& [slot, value] : slots) {
    const std::string key = "{" + slot + "}";
    for (std::size_t at = text.find(key); at != std::string::npos; at = text.find(key, at)) {
      text.replace(at, key.size(), value);
      at += value.size();
    }
  }
  return text;
}

// Words of a template once slots are blanked and punctuation split off.
void collect_words(const std::string& text, std::set<std::string>& out) {
  std::string s;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '{') {
      i = text.find('}', i);
      s += ' ';
      continue;
    }
    s += kPunctuation.find(text[i]) == std::string::npos ? text[i] : ' ';
  }
  std::istringstream in(s);
  for (std::string w; in >> w;) out.insert(w);
}

std::optional<long> apply(Op op, long a, long b) {
  switch (op) {
    case Op::kAdd:
      return a + b;
    case Op::kSub:
      return a - b;
    case Op::kMul:
      return a * b;
    case Op::kDiv:
      if (b == 0 || a % b != 0) return std::nullopt;
      return a / b;
  }
  return std::nullopt;
}

std::string render_number(const OperandSet& s, long v) { return s.render(v); }

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::kTwoOp:
      return "two_op";
    case TaskFamily::kTwoOpWords:
      return "two_op_words";
    case TaskFamily::kThreeOp:
      return "three_op";
    case TaskFamily::kRetrieval:
      return "retrieval";
    case TaskFamily::kFactual:
      return "factual";
  }
  return "?";
}

std::string to_string(PairingMode m) {
  switch (m) {
    case PairingMode::kOperandChange:
      return "operand_change";
    case PairingMode::kResultPreserving:
      return "result_preserving";
    case PairingMode::kOperatorChange:
      return "operator_change";
    case PairingMode::kEntityChange:
      return "entity_change";
    case PairingMode::kSubjectChange:
      return "subject_change";
  }
  return "?";
}

TaskFamily parse_family(const std::string& s) {
  for (auto f : {TaskFamily::kTwoOp, TaskFamily::kTwoOpWords, TaskFamily::kThreeOp,
                 TaskFamily::kRetrieval, TaskFamily::kFactual}) {
    if (to_string(f) == s) return f;
  }
  throw SpecError("unknown task family '" + s + "'");
}

PairingMode parse_mode(const std::string& s) {
  for (auto m : {PairingMode::kOperandChange, PairingMode::kResultPreserving,
                 PairingMode::kOperatorChange, PairingMode::kEntityChange,
                 PairingMode::kSubjectChange}) {
    if (to_string(m) == s) return m;
  }
  throw SpecError("unknown pairing mode '" + s + "'");
}

bool is_arithmetic(TaskFamily f) {
  return f == TaskFamily::kTwoOp || f == TaskFamily::kTwoOpWords || f == TaskFamily::kThreeOp;
}

void check_mode(TaskFamily family, PairingMode mode) {
  bool ok = false;
  switch (mode) {
    case PairingMode::kOperandChange:
    case PairingMode::kResultPreserving:
      ok = is_arithmetic(family);
      break;
    case PairingMode::kOperatorChange:
      ok = family == TaskFamily::kTwoOp || family == TaskFamily::kTwoOpWords;
      break;
    case PairingMode::kEntityChange:
      ok = family == TaskFamily::kRetrieval;
      break;
    case PairingMode::kSubjectChange:
      ok = family == TaskFamily::kFactual;
      break;
  }
  if (!ok) {
    throw SpecError("pairing mode " + to_string(mode) + " does not apply to family " +
                    to_string(family));
  }
}

PairingMode default_mode(TaskFamily family) {
  switch (family) {
    case TaskFamily::kRetrieval:
      return PairingMode::kEntityChange;
    case TaskFamily::kFactual:
      return PairingMode::kSubjectChange;
    default:
      return PairingMode::kOperandChange;
  }
}

// ---------------------------------------------------------------------------

char op_symbol(Op op) {
  switch (op) {
    case Op::kAdd:
      return '+';
    case Op::kSub:
      return '-';
    case Op::kMul:
      return '*';
    case Op::kDiv:
      return '/';
  }
  return '?';
}

std::string Formula::to_string() const {
  std::string o1(1, op_symbol(first));
  if (!second) return "n1" + o1 + "n2";
  std::string o2(1, op_symbol(*second));
  if (group_right) return "n1" + o1 + "(n2" + o2 + "n3)";
  return "(n1" + o1 + "n2)" + o2 + "n3";
}

std::optional<long> try_eval(const Formula& f, std::span<const long> n) {
  if (n.size() != f.arity()) {
    throw ContractViolation("formula " + f.to_string() + " takes " + std::to_string(f.arity()) +
                            " operands, got " + std::to_string(n.size()));
  }
  if (!f.second) return apply(f.first, n[0], n[1]);
  if (f.group_right) {
    auto inner = apply(*f.second, n[1], n[2]);
    if (!inner) return std::nullopt;
    return apply(f.first, n[0], *inner);
  }
  auto inner = apply(f.first, n[0], n[1]);
  if (!inner) return std::nullopt;
  return apply(*f.second, *inner, n[2]);
}

long eval_formula(const Formula& f, std::span<const long> n) {
  auto r = try_eval(f, n);
  if (!r) {
    std::string args;
    for (long v : n) args += (args.empty() ? "" : ",") + std::to_string(v);
    throw InvalidSampleError("formula " + f.to_string() + " has no integer value at (" + args +
                             ")");
  }
  return *r;
}

// ---------------------------------------------------------------------------

std::string OperandSet::render(long v) const {
  if (!contains(v)) throw ContractViolation("number " + std::to_string(v) + " outside 1.." +
                                            std::to_string(max_value));
  if (words) return kNumeralWords[static_cast<std::size_t>(v - 1)];
  return std::to_string(v);
}

void OperandSet::validate() const {
  const long cap = words ? 20 : 300;
  if (max_value < 1 || max_value > cap) {
    throw ConfigError("operand set maximum must lie in 1.." + std::to_string(cap) + ", got " +
                      std::to_string(max_value));
  }
  if (operand_max < 0) throw ConfigError("operand_max must be non-negative");
}

// ---------------------------------------------------------------------------

KnowledgeBase::KnowledgeBase(std::uint64_t seed) : seed_(seed) {
  Rng rng(seed);
  const auto countries = numbered_range('C', 12);
  const auto cities = numbered_range('K', 24);
  const auto persons = numbered_range('P', 24);
  const auto languages = numbered_range('L', 8);
  const auto things = numbered_range('T', 16);
  const auto categories = numbered_range('Y', 6);

  std::vector<std::string> country_order = countries;
  rng.shuffle(country_order);

  Relation capital_of{"capital_of", "{subject} is the capital of", {}, {}};
  Relation capital{"capital", "The capital of {subject} is", {}, {}};
  for (std::size_t i = 0; i < countries.size(); ++i) {
    capital_of.subjects.push_back(cities[i]);
    capital_of.object_of[cities[i]] = country_order[i];
  }
  for (const auto& c : countries) {
    capital.subjects.push_back(c);
    for (const auto& [city, country] : capital_of.object_of)
      if (country == c) capital.object_of[c] = city;
  }

  auto random_relation = [&](std::string name, std::string text,
                             const std::vector<std::string>& subjects,
                             const std::vector<std::string>& objects) {
    Relation r{std::move(name), std::move(text), subjects, {}};
    for (const auto& s : subjects) r.object_of[s] = rng.pick(objects);
    return r;
  };

  relations_.push_back(std::move(capital_of));
  relations_.push_back(random_relation("born_in", "{subject} was born in", persons, cities));
  relations_.push_back(random_relation("died_in", "{subject} died in", persons, cities));
  relations_.push_back(
      random_relation("native_language", "The native language of {subject} is", persons, languages));
  relations_.push_back(
      random_relation("subclass_of", "{subject} is a subclass of", things, categories));
  relations_.push_back(std::move(capital));
}

const Relation& KnowledgeBase::relation(std::size_t index) const {
  if (index >= relations_.size()) {
    throw ContractViolation("unknown relation index " + std::to_string(index));
  }
  return relations_[index];
}

const Relation& KnowledgeBase::relation(const std::string& name_or_text) const {
  for (const auto& r : relations_)
    if (r.name == name_or_text || r.text == name_or_text) return r;
  throw ContractViolation("unknown relation '" + name_or_text + "'");
}

const std::string& KnowledgeBase::object(const std::string& relation_name,
                                         const std::string& subject) const {
  const Relation& r = relation(relation_name);
  auto it = r.object_of.find(subject);
  if (it == r.object_of.end()) {
    throw ContractViolation("subject '" + subject + "' is not in relation " + r.name);
  }
  return it->second;
}

std::vector<std::string> KnowledgeBase::all_objects() const {
  std::set<std::string> objects;
  for (const auto& r : relations_)
    for (const auto& [s, o] : r.object_of) objects.insert(o);
  // Every candidate of each object type, not only the ones that happen to occur.
  for (const auto& o : numbered_range('C', 12)) objects.insert(o);
  for (const auto& o : numbered_range('K', 24)) objects.insert(o);
  for (const auto& o : numbered_range('L', 8)) objects.insert(o);
  for (const auto& o : numbered_range('Y', 6)) objects.insert(o);
  return {objects.begin(), objects.end()};
}

// ---------------------------------------------------------------------------

TaskCatalog::TaskCatalog(std::uint64_t kb_seed) : kb_(kb_seed), entities_(kEntities) {
  for (std::size_t o = 0; o < kOps.size(); ++o) {
    for (std::size_t type = 0; type < 6; ++type) {
      Template t;
      t.id = std::string("two_op.") + kOpNames[o] + "." + std::to_string(type + 1);
      t.family = TaskFamily::kTwoOp;
      t.text = kTwoOpTexts[o][type];
      t.formula.first = kOps[o];
      t.type = static_cast<int>(type + 1);
      templates_.push_back(std::move(t));
    }
  }
  for (std::size_t i = 0; i < kThreeOpTexts.size(); ++i) {
    const auto& row = kThreeOpTexts[i];
    Template t;
    t.id = "three_op." + std::string(i + 1 < 10 ? "0" : "") + std::to_string(i + 1);
    t.family = TaskFamily::kThreeOp;
    t.text = std::string("Q: ") + row.text + " A:";
    t.formula = Formula{row.first, row.second, row.right};
    t.type = static_cast<int>(i + 1);
    templates_.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < kRetrievalTexts.size(); ++i) {
    Template t;
    t.id = "retrieval." + std::to_string(i + 1);
    t.family = TaskFamily::kRetrieval;
    t.text = kRetrievalTexts[i];
    t.type = static_cast<int>(i + 1);
    templates_.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < kb_.relations().size(); ++i) {
    Template t;
    t.id = "factual." + std::to_string(i + 1);
    t.family = TaskFamily::kFactual;
    t.text = kb_.relation(i).text;
    t.type = static_cast<int>(i);
    templates_.push_back(std::move(t));
  }

  std::vector<std::string> tokens;
  for (char c : kPunctuation) tokens.emplace_back(1, c);
  for (int v = 1; v <= 300; ++v) tokens.push_back(std::to_string(v));
  for (const char* w : kNumeralWords) tokens.emplace_back(w);
  std::set<std::string> words;
  for (const auto& t : templates_) collect_words(t.text, words);
  for (const auto& w : words)
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  for (const auto& e : entities_) tokens.push_back(e);
  for (char p : std::string("CKPLTY")) {
    const std::size_t n = p == 'C' ? 12 : p == 'K' ? 24 : p == 'P' ? 24 : p == 'L' ? 8 : p == 'T' ? 16 : 6;
    for (const auto& name : numbered_range(p, n)) tokens.push_back(name);
  }
  vocab_ = Vocabulary(std::move(tokens));

  std::vector<TokenId> numbers, numeral_words, objects, entities;
  for (int v = 1; v <= 300; ++v) numbers.push_back(vocab_.id(std::to_string(v)));
  for (const char* w : kNumeralWords) numeral_words.push_back(vocab_.id(w));
  for (const auto& o : kb_.all_objects()) objects.push_back(vocab_.id(o));
  for (const auto& e : entities_) entities.push_back(vocab_.id(e));
  vocab_.define_subset("numbers", std::move(numbers));
  vocab_.define_subset("numeral_words", std::move(numeral_words));
  vocab_.define_subset("objects", std::move(objects));
  vocab_.define_subset("entities", std::move(entities));
}

std::vector<const Template*> TaskCatalog::templates(TaskFamily family) const {
  const TaskFamily wanted = family == TaskFamily::kTwoOpWords ? TaskFamily::kTwoOp : family;
  std::vector<const Template*> out;
  for (const auto& t : templates_)
    if (t.family == wanted) out.push_back(&t);
  return out;
}

const Template& TaskCatalog::find_template(const std::string& id) const {
  for (const auto& t : templates_)
    if (t.id == id) return t;
  throw SpecError("unknown template '" + id + "'");
}

const Template& TaskCatalog::sibling(const Template& t, Op op) const {
  if (t.family != TaskFamily::kTwoOp) {
    throw ContractViolation("operator siblings exist only for two-operand templates");
  }
  for (const auto& u : templates_)
    if (u.family == TaskFamily::kTwoOp && u.type == t.type && u.formula.first == op) return u;
  throw ContractViolation("no sibling of " + t.id);
}

std::vector<TokenId> TaskCatalog::answer_set(TaskFamily family, const OperandSet& s) const {
  if (family == TaskFamily::kFactual) return vocab_.subset("objects");
  const auto& all = vocab_.subset(s.words ? "numeral_words" : "numbers");
  return {all.begin(), all.begin() + s.max_value};
}

// ---------------------------------------------------------------------------

Rendered render_arithmetic(const Template& t, const OperandSet& s, std::span<const long> operands) {
  const long r = eval_formula(t.formula, operands);
  if (!s.contains(r)) {
    throw InvalidSampleError("result " + std::to_string(r) + " of " + t.id + " outside 1.." +
                             std::to_string(s.max_value));
  }
  std::vector<std::pair<std::string, std::string>> slots;
  for (std::size_t i = 0; i < operands.size(); ++i)
    slots.emplace_back("n" + std::to_string(i + 1), render_number(s, operands[i]));
  return {fill(t.text, slots), render_number(s, r)};
}

Rendered render_retrieval(const Template& t, const OperandSet& s, long n1, long n2,
                          const std::string& e1, const std::string& e2, const std::string& eq) {
  if (e1 == e2) throw ContractViolation("retrieval entities collide: " + e1);
  if (eq != e1 && eq != e2) {
    throw ContractViolation("queried entity " + eq + " is neither " + e1 + " nor " + e2);
  }
  const std::string prompt = fill(t.text, {{"n1", render_number(s, n1)},
                                           {"n2", render_number(s, n2)},
                                           {"e1", e1},
                                           {"e2", e2},
                                           {"eq", eq}});
  return {prompt, render_number(s, eq == e1 ? n1 : n2)};
}

Rendered render_factual(const KnowledgeBase& kb, const Template& t, const std::string& subject) {
  const Relation& rel = kb.relation(static_cast<std::size_t>(t.type));
  return {fill(t.text, {{"subject", subject}}), kb.object(rel.name, subject)};
}

std::string few_shot_prefix(const TaskCatalog& catalog, const Template& t, const OperandSet& s,
                            std::size_t k, const std::set<long>& avoid,
                            const std::set<std::string>& avoid_entities, Rng& rng) {
  if (k == 0) return "";
  std::vector<std::string> shots;
  std::set<std::string> seen;
  const long limit = s.operand_limit();
  for (std::size_t attempt = 0; shots.size() < k; ++attempt) {
    if (attempt >= 1000) {
      throw SamplingError("could not draw " + std::to_string(k) + " distinct exemplars for " +
                          t.id + " avoiding the query operands");
    }
    Rendered r;
    if (is_arithmetic(t.family)) {
      std::vector<long> n(t.formula.arity());
      bool clash = false;
      for (auto& v : n) {
        v = rng.uniform_int(1, limit);
        clash |= avoid.contains(v);
      }
      auto res = try_eval(t.formula, n);
      if (clash || !res || !s.contains(*res)) continue;
      r = render_arithmetic(t, s, n);
    } else if (t.family == TaskFamily::kRetrieval) {
      const long n1 = rng.uniform_int(1, limit), n2 = rng.uniform_int(1, limit);
      if (n1 == n2 || avoid.contains(n1) || avoid.contains(n2)) continue;
      const auto& e1 = rng.pick(catalog.entities());
      const auto& e2 = rng.pick(catalog.entities());
      if (e1 == e2) continue;
      r = render_retrieval(t, s, n1, n2, e1, e2, rng.uniform_int(0, 1) ? e2 : e1);
    } else {
      const Relation& rel = catalog.kb().relation(static_cast<std::size_t>(t.type));
      const auto& subject = rng.pick(rel.subjects);
      if (avoid_entities.contains(subject)) continue;
      r = render_factual(catalog.kb(), t, subject);
    }
    std::string shot = r.prompt + " " + r.answer;
    if (seen.insert(shot).second) shots.push_back(std::move(shot));
  }
  return join(shots, " ") + " ";
}

// ---------------------------------------------------------------------------

std::string PromptPair::provenance() const {
  return to_string(family) + "/" + to_string(mode) + "/" + template_id + "#" +
         std::to_string(index) + " seed " + std::to_string(seed);
}

namespace {

bool excluded(const SamplerConfig& c, const std::string& prompt) {
  return c.exclude != nullptr && c.exclude->contains(prompt);
}

std::vector<long> draw_operands(Rng& rng, std::size_t arity, long limit) {
  std::vector<long> n(arity);
  for (auto& v : n) v = rng.uniform_int(1, limit);
  return n;
}

// Every operand pair in 1..limit for which a two-operand f evaluates to `target`.
std::vector<std::vector<long>> preimage(const Formula& f, long target, long limit) {
  std::vector<std::vector<long>> out;
  for (long a = 1; a <= limit; ++a) {
    std::optional<long> b;
    switch (f.first) {
      case Op::kAdd:
        b = target - a;
        break;
      case Op::kSub:
        b = a - target;
        break;
      case Op::kMul:
        if (a != 0 && target % a == 0) b = target / a;
        break;
      case Op::kDiv:
        if (target != 0 && a % target == 0) b = a / target;
        break;
    }
    if (b && *b >= 1 && *b <= limit) out.push_back({a, *b});
  }
  return out;
}

std::set<long> as_set(const std::vector<long>& a, const std::vector<long>& b) {
  std::set<long> s(a.begin(), a.end());
  s.insert(b.begin(), b.end());
  return s;
}

PromptPair sample_arithmetic(const TaskCatalog& catalog, const SamplerConfig& c, const Template& t,
                             Rng& rng, PromptPair pair) {
  const OperandSet& s = c.operands;
  const long limit = s.operand_limit();
  const std::size_t arity = t.formula.arity();
  auto valid = [&](const Template& tt, const std::vector<long>& n) -> std::optional<Rendered> {
    auto r = try_eval(tt.formula, n);
    if (!r || !s.contains(*r)) return std::nullopt;
    Rendered out = render_arithmetic(tt, s, n);
    if (excluded(c, out.prompt)) return std::nullopt;
    return out;
  };
  if (arity == 3 && limit > 60) {
    throw ConfigError("three-operand operand range above 60 is not supported");
  }

  // Three-operand queries are sparse in the operand cube (and sparser once
  // training prompts are excluded), so they are drawn from the enumerated
  // valid tuples; uniform over that list equals uniform rejection sampling.
  std::vector<std::vector<long>> support;
  if (arity == 3) {
    std::vector<long> n(3);
    for (n[0] = 1; n[0] <= limit; ++n[0])
      for (n[1] = 1; n[1] <= limit; ++n[1])
        for (n[2] = 1; n[2] <= limit; ++n[2])
          if (valid(t, n)) support.push_back(n);
    if (support.size() < 2) {
      throw SamplingError(t.id + " has " + std::to_string(support.size()) +
                          " admissible operand tuples; a pair needs two");
    }
  }
  auto draw = [&] { return support.empty() ? draw_operands(rng, arity, limit) : rng.pick(support); };

  const Template* t2 = &t;
  std::optional<Rendered> first, second;
  std::string constraint;
  for (std::size_t attempt = 0; attempt < c.retry_budget; ++attempt) {
    pair.operands1 = draw();
    switch (c.mode) {
      case PairingMode::kOperandChange: {
        constraint = "both results in S with N != N'";
        first = valid(t, pair.operands1);
        if (!first) continue;
        pair.operands2 = draw();
        if (pair.operands2 == pair.operands1) continue;
        second = valid(t, pair.operands2);
        break;
      }
      case PairingMode::kResultPreserving: {
        constraint = "r = r' with N != N'";
        first = valid(t, pair.operands1);
        if (!first) continue;
        const long r = eval_formula(t.formula, pair.operands1);
        std::vector<std::vector<long>> candidates;
        if (support.empty()) {
          candidates = preimage(t.formula, r, limit);
        } else {
          for (const auto& n : support)
            if (eval_formula(t.formula, n) == r) candidates.push_back(n);
        }
        std::erase_if(candidates, [&](const std::vector<long>& n) {
          return n == pair.operands1 || !valid(t, n);
        });
        if (candidates.empty()) continue;
        pair.operands2 = rng.pick(candidates);
        second = valid(t, pair.operands2);
        break;
      }
      case PairingMode::kOperatorChange: {
        constraint = "both operators give results in S";
        std::vector<Op> others;
        for (Op op : kOps)
          if (op != t.formula.first) others.push_back(op);
        t2 = &catalog.sibling(t, rng.pick(others));
        first = valid(t, pair.operands1);
        if (!first) continue;
        pair.operands2 = pair.operands1;
        second = valid(*t2, pair.operands2);
        break;
      }
      default:
        check_mode(c.family, c.mode);
    }
    if (first && second) break;
    first.reset();
    second.reset();
  }
  if (!first || !second) {
    throw SamplingError("retry budget of " + std::to_string(c.retry_budget) +
                        " exhausted for " + t.id + " (" + to_string(c.mode) +
                        "): could not satisfy " + constraint);
  }
  pair.template_id2 = t2->id;
  pair.prefix = few_shot_prefix(catalog, t, s, c.few_shot, as_set(pair.operands1, pair.operands2),
                                {}, rng);
  pair.p1 = pair.prefix + first->prompt;
  pair.p2 = pair.prefix + second->prompt;
  pair.r = first->answer;
  pair.r_prime = second->answer;
  return pair;
}

PromptPair sample_retrieval_pair(const TaskCatalog& catalog, const SamplerConfig& c,
                                 const Template& t, Rng& rng, PromptPair pair) {
  const OperandSet& s = c.operands;
  const long limit = s.operand_limit();
  if (limit < 2) throw ConfigError("retrieval needs at least two distinct numbers");
  for (std::size_t attempt = 0; attempt < c.retry_budget; ++attempt) {
    const long n1 = rng.uniform_int(1, limit), n2 = rng.uniform_int(1, limit);
    const std::string& e1 = rng.pick(catalog.entities());
    const std::string& e2 = rng.pick(catalog.entities());
    if (n1 == n2 || e1 == e2) continue;
    const bool swap = rng.uniform_int(0, 1) == 1;
    auto a = render_retrieval(t, s, n1, n2, e1, e2, swap ? e2 : e1);
    auto b = render_retrieval(t, s, n1, n2, e1, e2, swap ? e1 : e2);
    if (excluded(c, a.prompt) || excluded(c, b.prompt)) continue;
    pair.operands1 = pair.operands2 = {n1, n2};
    pair.template_id2 = t.id;
    pair.prefix = few_shot_prefix(catalog, t, s, c.few_shot, {n1, n2}, {}, rng);
    pair.p1 = pair.prefix + a.prompt;
    pair.p2 = pair.prefix + b.prompt;
    pair.r = a.answer;
    pair.r_prime = b.answer;
    return pair;
  }
  throw SamplingError("retry budget of " + std::to_string(c.retry_budget) + " exhausted for " +
                      t.id + ": could not draw n1 != n2 and e1 != e2");
}

PromptPair sample_factual_pair(const TaskCatalog& catalog, const SamplerConfig& c,
                               const Template& t, Rng& rng, PromptPair pair) {
  const KnowledgeBase& kb = catalog.kb();
  const Relation& rel = kb.relation(static_cast<std::size_t>(t.type));
  for (std::size_t attempt = 0; attempt < c.retry_budget; ++attempt) {
    const std::string& s1 = rng.pick(rel.subjects);
    const std::string& s2 = rng.pick(rel.subjects);
    if (s1 == s2) continue;
    auto a = render_factual(kb, t, s1);
    auto b = render_factual(kb, t, s2);
    if (excluded(c, a.prompt) || excluded(c, b.prompt)) continue;
    pair.template_id2 = t.id;
    pair.prefix = few_shot_prefix(catalog, t, c.operands, c.few_shot, {}, {s1, s2}, rng);
    pair.p1 = pair.prefix + a.prompt;
    pair.p2 = pair.prefix + b.prompt;
    pair.r = a.answer;
    pair.r_prime = b.answer;
    return pair;
  }
  throw SamplingError("retry budget of " + std::to_string(c.retry_budget) + " exhausted for " +
                      t.id + ": could not draw two distinct subjects");
}

}  // namespace

PromptPair sample_pair(const TaskCatalog& catalog, const SamplerConfig& config, const Template& t,
                       std::uint64_t seed, std::uint64_t index) {
  check_mode(config.family, config.mode);
  config.operands.validate();
  const TaskFamily tf = config.family == TaskFamily::kTwoOpWords ? TaskFamily::kTwoOp : config.family;
  if (t.family != tf) {
    throw SpecError("template " + t.id + " does not belong to family " + to_string(config.family));
  }
  Rng rng(seed, index);
  PromptPair pair;
  pair.family = config.family;
  pair.mode = config.mode;
  pair.template_id = t.id;
  pair.seed = seed;
  pair.index = index;
  if (is_arithmetic(config.family)) return sample_arithmetic(catalog, config, t, rng, std::move(pair));
  if (config.family == TaskFamily::kRetrieval)
    return sample_retrieval_pair(catalog, config, t, rng, std::move(pair));
  return sample_factual_pair(catalog, config, t, rng, std::move(pair));
}

PromptPair sample_pair(const TaskCatalog& catalog, const SamplerConfig& config,
                       std::uint64_t seed) {
  const auto ts = catalog.templates(config.family);
  Rng pick(seed, ~std::uint64_t{0});
  return sample_pair(catalog, config, *pick.pick(ts), seed, 0);
}

std::vector<PromptPair> build_pairs(const TaskCatalog& catalog, const SamplerConfig& config,
                                    std::size_t pairs_per_template, std::uint64_t seed,
                                    const std::vector<std::string>& template_ids) {
  std::vector<const Template*> ts;
  if (template_ids.empty()) {
    ts = catalog.templates(config.family);
  } else {
    for (const auto& id : template_ids) ts.push_back(&catalog.find_template(id));
  }
  std::vector<PromptPair> out;
  std::uint64_t index = 0;
  for (const Template* t : ts)
    for (std::size_t i = 0; i < pairs_per_template; ++i)
      out.push_back(sample_pair(catalog, config, *t, seed, index++));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<TaskExample> enumerate_arithmetic(const TaskCatalog& catalog, TaskFamily family,
                                              const OperandSet& s) {
  if (!is_arithmetic(family)) throw SpecError(to_string(family) + " is not an arithmetic family");
  s.validate();
  const long limit = s.operand_limit();
  std::vector<TaskExample> out;
  for (const Template* t : catalog.templates(family)) {
    std::vector<long> n(t->formula.arity(), 1);
    while (true) {
      auto r = try_eval(t->formula, n);
      if (r && s.contains(*r)) {
        auto rendered = render_arithmetic(*t, s, n);
        out.push_back({std::move(rendered.prompt), std::move(rendered.answer), t->id});
      }
      std::size_t i = n.size();
      while (i > 0 && n[i - 1] == limit) n[--i] = 1;
      if (i == 0) break;
      ++n[i - 1];
    }
  }
  return out;
}

std::vector<TaskExample> sample_retrieval(const TaskCatalog& catalog, const OperandSet& s,
                                          std::size_t count, std::uint64_t seed) {
  s.validate();
  const auto ts = catalog.templates(TaskFamily::kRetrieval);
  const long limit = s.operand_limit();
  std::vector<TaskExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed, i);
    const Template& t = *ts[i % ts.size()];
    long n1 = 0, n2 = 0;
    std::string e1, e2;
    do {
      n1 = rng.uniform_int(1, limit);
      n2 = rng.uniform_int(1, limit);
      e1 = rng.pick(catalog.entities());
      e2 = rng.pick(catalog.entities());
    } while (n1 == n2 || e1 == e2);
    auto r = render_retrieval(t, s, n1, n2, e1, e2, rng.uniform_int(0, 1) ? e2 : e1);
    out.push_back({std::move(r.prompt), std::move(r.answer), t.id});
  }
  return out;
}

std::vector<TaskExample> enumerate_factual(const TaskCatalog& catalog) {
  std::vector<TaskExample> out;
  for (const Template* t : catalog.templates(TaskFamily::kFactual)) {
    const Relation& rel = catalog.kb().relation(static_cast<std::size_t>(t->type));
    for (const auto& subject : rel.subjects) {
      auto r = render_factual(catalog.kb(), *t, subject);
      out.push_back({std::move(r.prompt), std::move(r.answer), t->id});
    }
  }
  return out;
}

std::pair<std::vector<TaskExample>, std::vector<TaskExample>> split_examples(
    std::vector<TaskExample> examples, double held_out_fraction, std::uint64_t seed) {
  if (held_out_fraction < 0 || held_out_fraction > 1) {
    throw ContractViolation("held-out fraction must lie in [0, 1]");
  }
  Rng rng(seed);
  rng.shuffle(examples);
  const auto n_held = static_cast<std::size_t>(
      std::llround(held_out_fraction * static_cast<double>(examples.size())));
  std::vector<TaskExample> held(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::vector<TaskExample> train(examples.begin() + static_cast<std::ptrdiff_t>(n_held), examples.end());
  return {std::move(train), std::move(held)};
}

// ---------------------------------------------------------------------------

void write_corpus(const std::filesystem::path& path, const std::vector<PromptPair>& pairs,
                  const std::vector<std::string>& header_lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write corpus " + path.string());
  for (const auto& h : header_lines) out << "# " << h << '\n';
  out << "# family\tmode\ttemplate\tp1\tp2\tr\tr'\tseed\n";
  for (const auto& p : pairs) {
    for (const auto* field : {&p.p1, &p.p2, &p.r, &p.r_prime}) {
      if (field->find_first_of("\t\n") != std::string::npos) {
        throw FormatError("corpus field contains a tab or newline: " + p.provenance());
      }
    }
    std::string tmpl = p.template_id;
    if (!p.template_id2.empty() && p.template_id2 != p.template_id) tmpl += "|" + p.template_id2;
    out << to_string(p.family) << '\t' << to_string(p.mode) << '\t' << tmpl << '\t' << p.p1
        << '\t' << p.p2 << '\t' << p.r << '\t' << p.r_prime << '\t' << p.seed << '\n';
  }
  if (!out) throw FormatError("failed writing corpus " + path.string());
}

std::vector<PromptPair> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read corpus " + path.string());
  std::vector<PromptPair> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (f.size() != 8) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 8 fields, got " +
                        std::to_string(f.size()));
    }
    PromptPair p;
    try {
      p.family = parse_family(f[0]);
      p.mode = parse_mode(f[1]);
      p.seed = std::stoull(f[7]);
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const auto bar = f[2].find('|');
    p.template_id = f[2].substr(0, bar);
    p.template_id2 = bar == std::string::npos ? p.template_id : f[2].substr(bar + 1);
    p.p1 = f[3];
    p.p2 = f[4];
    p.r = f[5];
    p.r_prime = f[6];
    p.index = out.size();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace medtrace
