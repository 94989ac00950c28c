#include <doctest.h>

#include <filesystem>
#include <set>

#include "medtrace/error.hpp"
#include "medtrace/tasks.hpp"

using namespace medtrace;

namespace {

const TaskCatalog& catalog() {
  static const TaskCatalog c(7);
  return c;
}

long brute(Op op, long a, long b, bool& ok) {
  ok = true;
  switch (op) {
    case Op::kAdd:
      return a + b;
    case Op::kSub:
      return a - b;
    case Op::kMul:
      return a * b;
    case Op::kDiv:
      ok = b != 0 && a % b == 0;
      return ok ? a / b : 0;
  }
  return 0;
}

}  // namespace

TEST_CASE("formula evaluation") {
  const long n[] = {24, 4, 2};
  CHECK(eval_formula({Op::kAdd, Op::kMul, false}, n) == 56);
  CHECK(eval_formula({Op::kAdd, Op::kMul, true}, n) == 32);
  CHECK(eval_formula({Op::kDiv, Op::kDiv, false}, n) == 3);
  CHECK(eval_formula({Op::kDiv, Op::kDiv, true}, n) == 12);
  const long odd[] = {12, 8, 2};
  CHECK_FALSE(try_eval({Op::kDiv, Op::kDiv, false}, odd).has_value());
  const long bad[] = {7, 2};
  CHECK_FALSE(try_eval({Op::kDiv, std::nullopt, false}, bad).has_value());
  const long zero[] = {7, 0};
  CHECK_THROWS_AS(eval_formula({Op::kDiv, std::nullopt, false}, zero), InvalidSampleError);
  CHECK(Formula{Op::kAdd, Op::kMul, false}.to_string() == "(n1+n2)*n3");
  CHECK(Formula{Op::kAdd, Op::kMul, true}.to_string() == "n1+(n2*n3)");
}

TEST_CASE("template catalogue") {
  const auto& c = catalog();
  CHECK(c.templates(TaskFamily::kTwoOp).size() == 24);
  CHECK(c.templates(TaskFamily::kTwoOpWords).size() == 24);
  const auto three = c.templates(TaskFamily::kThreeOp);
  CHECK(three.size() == 29);
  std::set<Formula> forms;
  for (const auto* t : three) forms.insert(t->formula);
  CHECK(forms.size() == 29);
  CHECK(c.templates(TaskFamily::kRetrieval).size() == 3);
  CHECK(c.templates(TaskFamily::kFactual).size() == 6);
  const Template& add1 = c.find_template("two_op.add.1");
  CHECK(c.sibling(add1, Op::kMul).id == "two_op.mul.1");
  CHECK_THROWS_AS(c.find_template("nope"), SpecError);
  const auto s = c.answer_set(TaskFamily::kTwoOp, OperandSet{});
  CHECK(s.size() == 300);
  CHECK(c.vocabulary().token(s.front()) == "1");
  CHECK(c.vocabulary().token(s.back()) == "300");
  const auto w = c.answer_set(TaskFamily::kTwoOpWords, OperandSet{20, 0, true});
  CHECK(c.vocabulary().token(w.back()) == "twenty");
}

TEST_CASE("every template prompt tokenises") {
  const auto& c = catalog();
  const long n[] = {3, 2, 1};
  for (const auto& t : c.all_templates()) {
    Rendered r;
    if (is_arithmetic(t.family)) {
      OperandSet s;
      s.words = t.family == TaskFamily::kTwoOpWords;
      if (s.words) s.max_value = 20;
      const std::span<const long> ops(n, t.formula.arity());
      if (!try_eval(t.formula, ops) || *try_eval(t.formula, ops) < 1) continue;
      r = render_arithmetic(t, s, ops);
    } else if (t.family == TaskFamily::kRetrieval) {
      r = render_retrieval(t, OperandSet{}, 4, 5, c.entities()[0], c.entities()[1], c.entities()[1]);
      CHECK(r.answer == "5");
    } else {
      r = render_factual(c.kb(), t, c.kb().relation(static_cast<std::size_t>(t.type)).subjects[0]);
    }
    CHECK_NOTHROW(c.vocabulary().tokenize(r.prompt));
    CHECK_NOTHROW(c.vocabulary().id(r.answer));
  }
}

TEST_CASE("enumeration matches a brute-force count") {
  const auto& c = catalog();
  OperandSet s;
  s.operand_max = 9;
  const auto ex = enumerate_arithmetic(c, TaskFamily::kTwoOp, s);
  std::size_t expected = 0;
  for (Op op : {Op::kAdd, Op::kSub, Op::kMul, Op::kDiv})
    for (long a = 1; a <= 9; ++a)
      for (long b = 1; b <= 9; ++b) {
        bool ok = false;
        const long r = brute(op, a, b, ok);
        if (ok && r >= 1 && r <= 300) expected += 6;
      }
  CHECK(ex.size() == expected);
  const auto [train, held] = split_examples(ex, 0.2, 1);
  CHECK(held.size() == static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(ex.size()))));
  CHECK(train.size() + held.size() == ex.size());
  CHECK(split_examples(ex, 0.2, 1).second[0].prompt == held[0].prompt);
}

TEST_CASE("pairing modes") {
  const auto& c = catalog();
  SamplerConfig sc;
  sc.operands.operand_max = 9;
  for (PairingMode m : {PairingMode::kOperandChange, PairingMode::kResultPreserving,
                        PairingMode::kOperatorChange}) {
    sc.mode = m;
    const auto pairs = build_pairs(c, sc, 5, 3);
    CHECK(pairs.size() == 120);
    for (const auto& p : pairs) {
      CHECK((p.operands1 != p.operands2 || m == PairingMode::kOperatorChange));
      if (m == PairingMode::kResultPreserving) CHECK(p.r == p.r_prime);
      if (m == PairingMode::kOperatorChange) {
        CHECK(p.operands1 == p.operands2);
        CHECK(p.template_id != p.template_id2);
      }
      CHECK(c.vocabulary().tokenize(p.p1).size() == c.vocabulary().tokenize(p.p2).size());
      const long r = std::stol(p.r), rp = std::stol(p.r_prime);
      CHECK(r >= 1);
      CHECK(rp <= 300);
    }
  }
  sc.mode = PairingMode::kEntityChange;
  CHECK_THROWS_AS(build_pairs(c, sc, 1, 3), SpecError);

  SamplerConfig three;
  three.family = TaskFamily::kThreeOp;
  three.operands.operand_max = 9;
  three.mode = PairingMode::kResultPreserving;
  for (const auto& p : build_pairs(c, three, 2, 5)) {
    CHECK(p.r == p.r_prime);
    CHECK(eval_formula(c.find_template(p.template_id).formula, p.operands1) == std::stol(p.r));
  }

  SamplerConfig ret;
  ret.family = TaskFamily::kRetrieval;
  ret.mode = PairingMode::kEntityChange;
  ret.operands = {20, 20, false};
  for (const auto& p : build_pairs(c, ret, 4, 9)) CHECK(p.r != p.r_prime);

  SamplerConfig fac;
  fac.family = TaskFamily::kFactual;
  fac.mode = PairingMode::kSubjectChange;
  for (const auto& p : build_pairs(c, fac, 4, 9)) CHECK(p.p1 != p.p2);
}

TEST_CASE("sampling is reproducible and honours exclusions") {
  const auto& c = catalog();
  SamplerConfig sc;
  sc.operands.operand_max = 9;
  sc.few_shot = 2;
  const auto a = build_pairs(c, sc, 3, 17);
  const auto b = build_pairs(c, sc, 3, 17);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].p1 == b[i].p1);
    CHECK(a[i].p2 == b[i].p2);
    CHECK_FALSE(a[i].prefix.empty());
    CHECK(a[i].p1.starts_with(a[i].prefix));
  }
  std::unordered_set<std::string> exclude;
  for (const auto& p : a) exclude.insert(p.p1.substr(p.prefix.size()));
  sc.exclude = &exclude;
  for (const auto& p : build_pairs(c, sc, 3, 17)) {
    CHECK_FALSE(exclude.contains(p.p1.substr(p.prefix.size())));
    CHECK_FALSE(exclude.contains(p.p2.substr(p.prefix.size())));
  }
}

TEST_CASE("operand sets") {
  CHECK(OperandSet{20, 0, true}.render(7) == "seven");
  CHECK_THROWS_AS((OperandSet{21, 0, true}.validate()), ConfigError);
  CHECK_THROWS_AS((OperandSet{301, 0, false}.validate()), ConfigError);
  CHECK_THROWS_AS(check_mode(TaskFamily::kFactual, PairingMode::kOperandChange), SpecError);
  CHECK(default_mode(TaskFamily::kRetrieval) == PairingMode::kEntityChange);
}

TEST_CASE("knowledge base is seeded") {
  const KnowledgeBase a(7), b(7), c(8);
  CHECK(a.relation("born_in").object_of == b.relation("born_in").object_of);
  bool differs = false;
  for (std::size_t i = 0; i < a.relations().size(); ++i)
    differs |= a.relation(i).object_of != c.relation(i).object_of;
  CHECK(differs);
}

TEST_CASE("corpus round trip") {
  const auto& c = catalog();
  SamplerConfig sc;
  sc.operands.operand_max = 9;
  sc.mode = PairingMode::kOperatorChange;
  const auto pairs = build_pairs(c, sc, 2, 4);
  const auto path = std::filesystem::temp_directory_path() / "medtrace_corpus.tsv";
  write_corpus(path, pairs, {"test header"});
  const auto back = read_corpus(path);
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].p1 == pairs[i].p1);
    CHECK(back[i].r_prime == pairs[i].r_prime);
    CHECK(back[i].template_id2 == pairs[i].template_id2);
    CHECK(back[i].mode == pairs[i].mode);
  }
  std::filesystem::remove(path);
}
