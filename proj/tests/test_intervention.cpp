#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "medtrace/error.hpp"
#include "medtrace/intervention.hpp"
#include "oracle.hpp"

using namespace medtrace;

namespace {

ModelConfig config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_mlp = 16;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  c.rotary_dim = 2;
  return c;
}

}  // namespace

TEST_CASE("patched probabilities match an oracle run with p1's activation") {
  const ModelConfig c = config();
  const Weights w = oracle::loud_weights(c, 3);
  const Model m(c, w);
  const TokenPair pair{{1, 2, 3, 4}, {1, 5, 3, 4}, 6, 7, "demo"};
  const std::vector<TokenId> restrict = {5, 6, 7, 8};
  const PairRunner runner(m, pair, &restrict);
  const auto p1 = oracle::forward(c, w, pair.p1);
  for (const auto& id : full_grid(c.n_layers, 4)) {
    oracle::Patch patch;
    const auto& src = id.kind == ComponentKind::kMlp ? p1.mlp : p1.attn;
    patch.vectors[id] = src[id.layer][id.position];
    const auto ref = oracle::forward(c, w, pair.p2, patch);
    oracle::Vec sub;
    for (TokenId t : restrict) sub.push_back(ref.logits[3][t]);
    const auto p = oracle::softmax(sub);
    const PairOutcome o = runner.run(id);
    CHECK(o.p_patched[6] == doctest::Approx(p[1]).epsilon(1e-10));
    CHECK(o.p_patched[7] == doctest::Approx(p[2]).epsilon(1e-10));
    CHECK(o.p_patched[0] == 0.0);
    const EffectProbs e = o.probs();
    CHECK(effect_of(o, MetricKind::kRelative) == doctest::Approx(indirect_effect(e)));
  }
}

TEST_CASE("patching a prompt with itself has no effect") {
  const ModelConfig c = config();
  const Model m(c, oracle::loud_weights(c, 5));
  const TokenPair pair{{3, 1, 4, 1}, {3, 1, 4, 1}, 2, 2, "self"};
  auto grid = full_grid(c.n_layers, 4);
  for (const auto& n : neuron_grid(1, -1, c.d_model)) grid.push_back(n);
  const EffectGrid g = sweep(m, {pair}, grid);
  for (const auto& id : g.components()) CHECK(g.cell(id).mean == 0.0);
}

TEST_CASE("sweep is independent of the thread count") {
  const ModelConfig c = config();
  const Model m(c, oracle::loud_weights(c, 6));
  std::vector<TokenPair> pairs;
  Rng rng(1);
  for (int i = 0; i < 7; ++i) {
    TokenPair p;
    for (int t = 0; t < 5; ++t) {
      p.p1.push_back(static_cast<TokenId>(rng.uniform_int(0, 10)));
      p.p2.push_back(static_cast<TokenId>(rng.uniform_int(0, 10)));
    }
    p.r = static_cast<TokenId>(rng.uniform_int(0, 10));
    p.r_prime = static_cast<TokenId>(rng.uniform_int(0, 10));
    pairs.push_back(p);
  }
  const auto grid = full_grid(c.n_layers, 5);
  std::vector<AuditRow> a1, a3;
  SweepOptions one;
  one.audit = &a1;
  SweepOptions three = one;
  three.threads = 3;
  three.audit = &a3;
  const EffectGrid g1 = sweep(m, pairs, grid, one);
  const EffectGrid g3 = sweep(m, pairs, grid, three);
  for (const auto& id : g1.components()) CHECK(g1.per_pair(id) == g3.per_pair(id));
  REQUIRE(a1.size() == pairs.size() * grid.size());
  CHECK(a1.size() == a3.size());
  CHECK(a1[0].pair == 0);
  CHECK(a1.back().pair == pairs.size() - 1);

  const auto path = std::filesystem::temp_directory_path() / "medtrace_audit.tsv";
  write_audit(path, a1, {"test"});
  std::ifstream in(path);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++rows;
  CHECK(rows == a1.size() + 1);
  std::filesystem::remove(path);
}

TEST_CASE("degenerate pairs abort or are skipped") {
  ModelConfig c = config();
  c.use_layernorm = false;
  Weights w = Weights::zeros(c);
  w.token_embedding.fill(1.0);
  // Token 9's logit dwarfs everything: P(r) underflows.
  for (std::size_t d = 0; d < c.d_model; ++d) w.unembedding(d, 9) = 2000.0;
  const Model m(c, w);
  const TokenPair bad{{1, 2}, {1, 3}, 4, 5, "bad"};
  const TokenPair good{{1, 2}, {1, 3}, 9, 9, "good"};
  const auto grid = full_grid(c.n_layers, 2);
  CHECK_THROWS_AS(sweep(m, {good, bad}, grid), Error);
  SweepOptions o;
  o.skip_degenerate = true;
  std::vector<std::size_t> skipped;
  o.skipped = &skipped;
  const EffectGrid g = sweep(m, {good, bad}, grid, o);
  CHECK(skipped == std::vector<std::size_t>{1});
  CHECK(g.cell(ComponentId::mlp(0, 0)).n == 1);
  CHECK_THROWS_AS(sweep(m, {bad}, grid, o), DegenerateGridError);
}

TEST_CASE("pair validation") {
  CHECK_THROWS_AS(align_positions({1, 2}, {1, 2, 3}), PairingError);
  CHECK(align_positions({1, 2}, {2, 1}) == std::vector<std::size_t>{0, 1});
  const ModelConfig c = config();
  const Model m(c, Weights::random(c, 1));
  CHECK_THROWS_AS(sweep(m, {{{1, 2}, {1, 2}, 0, 0, "a"}, {{1, 2, 3}, {1, 2, 3}, 0, 0, "b"}},
                        full_grid(2, 2)),
                  PairingError);
  const TokenPair p{{1, 2}, {1, 3}, 0, 0, "x"};
  CHECK_THROWS_AS(run_pair(m, p, ComponentId::mlp(2, 0)), InterventionError);
  CHECK_THROWS_AS(run_pair(m, p, ComponentId::mlp(0, 2)), InterventionError);
}
