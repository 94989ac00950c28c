#include <doctest.h>

#include <filesystem>

#include "medtrace/error.hpp"
#include "medtrace/model.hpp"
#include "medtrace/weights_io.hpp"
#include "oracle.hpp"

using namespace medtrace;

namespace {

ModelConfig small(bool ln, MlpActivation act = MlpActivation::kSigmoid) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 12;
  c.n_heads = 3;
  c.d_head = 4;
  c.d_mlp = 20;
  c.vocab_size = 17;
  c.max_seq_len = 10;
  c.rotary_dim = 4;
  c.use_layernorm = ln;
  c.mlp_activation = act;
  return c;
}

TokenSequence random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSequence s(n);
  for (auto& t : s) t = static_cast<TokenId>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1));
  return s;
}

}  // namespace

TEST_CASE("forward matches the scalar oracle") {
  for (bool ln : {true, false}) {
    for (auto act : {MlpActivation::kSigmoid, MlpActivation::kGelu}) {
      const ModelConfig c = small(ln, act);
      const Weights w = oracle::loud_weights(c, 9);
      const Model m(c, w);
      Rng rng(2);
      for (std::size_t T : {1, 4, 10}) {
        const TokenSequence s = random_tokens(rng, T, c.vocab_size);
        const auto ref = oracle::forward(c, w, s);
        const auto got = m.forward(s, {.record = true});
        for (std::size_t t = 0; t < T; ++t)
          CHECK(oracle::max_abs_diff(ref.logits[t], got.logits.row_vector(t)) < 1e-9);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
          CHECK(oracle::max_abs_diff(ref.attn[l][T - 1], got.trace->attn(l, T - 1)) < 1e-9);
          CHECK(oracle::max_abs_diff(ref.mlp[l][0], got.trace->mlp(l, 0)) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("block functions agree with the full pass") {
  const ModelConfig c = small(true);
  const Weights w = oracle::loud_weights(c, 4);
  const Model m(c, w);
  const TokenSequence s = {3, 1, 4, 1, 5};
  const auto run = m.forward(s, {.record = true});
  Matrix h(s.size(), c.d_model);
  for (std::size_t t = 0; t < s.size(); ++t) h.set_row(t, w.token_embedding.row(s[t]));
  const Vector a = m.attention_block(0, h);
  CHECK(oracle::max_abs_diff(a, run.trace->attn(0, 4)) < 1e-12);
  const Vector mm = m.mlp_block(0, h.row(2));
  CHECK(oracle::max_abs_diff(mm, run.trace->mlp(0, 2)) < 1e-12);
}

TEST_CASE("rotary encoding") {
  const Vector v = {1, 0, 0, 1, 5, 6};
  const Vector r = rotary_encode(v, 3, 4);
  CHECK(r[0] == doctest::Approx(std::cos(3.0)));
  CHECK(r[1] == doctest::Approx(std::sin(3.0)));
  CHECK(r[2] == doctest::Approx(-std::sin(0.03)));
  CHECK(r[3] == doctest::Approx(std::cos(0.03)));
  CHECK(r[4] == 5);
  CHECK(r[5] == 6);
  // Dot products depend on relative offsets only.
  Rng rng(8);
  Vector q(8), k(8);
  for (auto& x : q) x = rng.normal();
  for (auto& x : k) x = rng.normal();
  const double base = dot(rotary_encode(q, 5, 8), rotary_encode(k, 2, 8));
  CHECK(dot(rotary_encode(q, 9, 8), rotary_encode(k, 6, 8)) == doctest::Approx(base).epsilon(1e-12));
  CHECK_THROWS_AS(rotary_encode(q, 1, 3), ConfigError);
}

TEST_CASE("interventions follow the oracle") {
  const ModelConfig c = small(true);
  const Weights w = oracle::loud_weights(c, 12);
  const Model m(c, w);
  const TokenSequence s = {2, 7, 7, 1, 9, 4};
  Vector rep(c.d_model);
  for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = 0.1 * static_cast<double>(i) - 0.5;

  InterventionSet iv;
  iv.add(ComponentId::mlp(1, 2), rep);
  iv.add(ComponentId::attn(0, -1), rep);
  iv.add(ComponentId::neuron(2, 3, 5), 1.75);
  oracle::Patch p;
  p.vectors[ComponentId::mlp(1, 2)] = rep;
  p.vectors[ComponentId::attn(0, 5)] = rep;
  p.scalars[ComponentId::neuron(2, 3, 5)] = 1.75;
  const auto ref = oracle::forward(c, w, s, p);
  const auto got = m.forward(s, {}, &iv);
  for (std::size_t t = 0; t < s.size(); ++t)
    CHECK(oracle::max_abs_diff(ref.logits[t], got.logits.row_vector(t)) < 1e-9);

  const auto clean = m.forward(s, {.keep_cache = true});
  const auto fast = m.patched_forward(*clean.cache, iv);
  CHECK(fast.logits == got.logits);
  CHECK(fast.distribution == got.distribution);

  InterventionSet bad;
  bad.add(ComponentId::mlp(3, 0), rep);
  CHECK_THROWS_AS(m.forward(s, {}, &bad), InterventionError);
  InterventionSet bad_pos;
  bad_pos.add(ComponentId::attn(0, 6), rep);
  CHECK_THROWS_AS(m.forward(s, {}, &bad_pos), InterventionError);
  InterventionSet bad_len;
  bad_len.add(ComponentId::attn(0, 1), Vector(3, 0.0));
  CHECK_THROWS_AS(m.forward(s, {}, &bad_len), InterventionError);
  InterventionSet dup;
  dup.add(ComponentId::mlp(0, 0), rep);
  CHECK_THROWS_AS(dup.add(ComponentId::mlp(0, 0), rep), InterventionError);
}

TEST_CASE("sequence validation") {
  const ModelConfig c = small(false);
  const Model m(c, Weights::random(c, 1));
  CHECK_THROWS_AS(m.forward({}), ContractViolation);
  CHECK_THROWS_AS(m.forward({1, 17}), VocabularyError);
  CHECK_THROWS_AS(m.forward(TokenSequence(11, 0)), ShapeError);
  ModelConfig broken = c;
  broken.rotary_dim = 6;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
  broken = c;
  broken.n_heads = 2;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig c = small(true, MlpActivation::kGelu);
  const Weights w = Weights::random(c, 77);
  const auto path = std::filesystem::temp_directory_path() / "medtrace_test_model.ctw";
  save_weights(path, c, w, "step 0");
  const Checkpoint ck = load_weights(path);
  CHECK(ck.config == c);
  CHECK(ck.weights == w);
  CHECK(std::filesystem::exists(manifest_path(path)));
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
}

TEST_CASE("vocabulary tokenisation") {
  const Vocabulary v({"1", "12", "7", "?", "plus", "A:"});
  CHECK(v.tokenize("12 plus 7?") == TokenSequence{1, 4, 2, 3});
  CHECK(v.tokenize("112") == TokenSequence{0, 1});
  CHECK(v.detokenize(TokenSequence{4, 2}) == "plus 7");
  CHECK_THROWS_AS(v.tokenize("8"), VocabularyError);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), VocabularyError);
}
