#include <doctest.h>

#include <cmath>

#include "medtrace/error.hpp"
#include "medtrace/trainer.hpp"
#include "oracle.hpp"

using namespace medtrace;

namespace {

ModelConfig tiny(bool ln, MlpActivation act) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_mlp = 12;
  c.vocab_size = 9;
  c.max_seq_len = 8;
  c.rotary_dim = 4;
  c.use_layernorm = ln;
  c.mlp_activation = act;
  return c;
}

// Cross-entropy straight from the oracle forward pass.
double oracle_loss(const ModelConfig& c, const Weights& w, const std::vector<TokenSequence>& batch,
                   const std::vector<std::vector<std::uint8_t>>& masks) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenSequence in(batch[b].begin(), batch[b].end() - 1);
    const auto run = oracle::forward(c, w, in);
    for (std::size_t t = 0; t < in.size(); ++t) {
      if (!masks[b][t]) continue;
      const auto p = oracle::softmax(run.logits[t]);
      total -= std::log(p[batch[b][t + 1]]);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("loss masks") {
  CHECK(make_mask(4, LossMask::kAnswerOnly) == std::vector<std::uint8_t>{0, 0, 1});
  CHECK(make_mask(4, LossMask::kFullSequence) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK_THROWS(make_mask(1, LossMask::kAnswerOnly));
}

TEST_CASE("analytic gradients agree with central differences") {
  for (bool ln : {true, false}) {
    for (auto act : {MlpActivation::kSigmoid, MlpActivation::kGelu}) {
      const ModelConfig c = tiny(ln, act);
      const Weights w = oracle::loud_weights(c, 21, 0.3);
      const Model m(c, w);
      const std::vector<TokenSequence> batch = {{1, 2, 3, 4, 5}, {6, 6, 0, 8}};
      const std::vector<std::vector<std::uint8_t>> masks = {{1, 0, 1, 1}, {1, 1, 1}};
      const LossAndGradients lg = loss_and_gradients(m, batch, masks);
      CHECK(lg.targets == 6);
      CHECK(lg.loss == doctest::Approx(oracle_loss(c, w, batch, masks)).epsilon(1e-10));

      std::vector<std::pair<std::string, Matrix>> grads;
      lg.gradients.visit([&](const std::string& n, const Matrix& g) { grads.emplace_back(n, g); });
      Weights probe = w;
      std::size_t idx = 0;
      double worst = 0;
      probe.visit([&](const std::string& name, Matrix& t) {
        const Matrix& g = grads[idx++].second;
        Rng rng(idx);
        for (int k = 0; k < 6; ++k) {
          const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(t.size()) - 1));
          const double keep = t.values()[i];
          const double h = 1e-5;
          t.values()[i] = keep + h;
          const double up = oracle_loss(c, probe, batch, masks);
          t.values()[i] = keep - h;
          const double down = oracle_loss(c, probe, batch, masks);
          t.values()[i] = keep;
          const double num = (up - down) / (2 * h);
          const double an = g.values()[i];
          const double rel = std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6});
          if (rel > worst) worst = rel;
          if (rel > 1e-4) MESSAGE(name << "[" << i << "] analytic " << an << " numeric " << num);
        }
      });
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("empty masks give zero loss and gradients") {
  const ModelConfig c = tiny(true, MlpActivation::kSigmoid);
  const Model m(c, Weights::random(c, 2));
  const LossAndGradients lg = loss_and_gradients(m, {{1, 2, 3}}, {{0, 0}});
  CHECK(lg.loss == 0.0);
  CHECK(lg.targets == 0);
  lg.gradients.visit([](const std::string&, const Matrix& g) {
    for (double v : g.values()) CHECK(v == 0.0);
  });
}

TEST_CASE("training memorises a tiny corpus") {
  const ModelConfig c = tiny(true, MlpActivation::kSigmoid);
  Model m(c, Weights::random(c, 4));
  std::vector<LabeledSequence> corpus = {
      {{1, 2, 3}, 4, "a"}, {{2, 1, 3}, 5, "b"}, {{1, 1, 3}, 6, "c"}, {{2, 2, 3}, 7, "d"}};
  const std::vector<TokenId> restrict = {4, 5, 6, 7};
  CHECK(evaluate(m, corpus, restrict) < 1.0);
  TrainConfig tc;
  tc.learning_rate = 3e-2;
  tc.batch_size = 4;
  tc.max_steps = 150;
  tc.epochs = 1000;
  tc.eval_every = 50;
  const TrainReport rep = train(m, corpus, tc, {&corpus, &restrict});
  CHECK(rep.steps == 150);
  CHECK(rep.final_accuracy == 1.0);
  CHECK(rep.log.back().loss < rep.log.front().loss);

  Model again(c, Weights::random(c, 4));
  train(again, corpus, tc, {&corpus, &restrict});
  CHECK(again.weights() == m.weights());

  TrainConfig none = tc;
  none.epochs = 0;
  none.max_steps = 0;
  Model idle(c, Weights::random(c, 4));
  CHECK(train(idle, corpus, none).steps == 0);
  CHECK(idle.weights() == Weights::random(c, 4));
}

TEST_CASE("fine-tuning refuses traced prompts") {
  const ModelConfig c = tiny(false, MlpActivation::kSigmoid);
  Model m(c, Weights::random(c, 4));
  const std::vector<LabeledSequence> corpus = {{{1, 2}, 3, "1 2"}, {{2, 1}, 3, "2 1"}};
  TrainConfig tc;
  tc.max_steps = 2;
  CHECK_THROWS_AS(fine_tune(m, corpus, tc, {"2 1"}), ContractViolation);
  CHECK_NOTHROW(fine_tune(m, corpus, tc, {"3 3"}));
}

TEST_CASE("weight decay shrinks matrices but not layernorm") {
  const ModelConfig c = tiny(true, MlpActivation::kGelu);
  const Weights start = oracle::loud_weights(c, 8, 0.5);
  const std::vector<LabeledSequence> corpus = {{{1, 2}, 3, "1 2"}, {{2, 4}, 6, "2 4"}};
  TrainConfig tc;
  tc.schedule = LrSchedule::kConstant;
  tc.learning_rate = 0.01;
  tc.max_steps = 1;
  tc.batch_size = 2;
  Model plain(c, start), decayed(c, start);
  train(plain, corpus, tc);
  tc.weight_decay = 3.0;
  train(decayed, corpus, tc);

  std::vector<std::pair<std::string, const Matrix*>> a, b, w0;
  plain.weights().visit([&](const std::string& n, const Matrix& m) { a.emplace_back(n, &m); });
  decayed.weights().visit([&](const std::string& n, const Matrix& m) { b.emplace_back(n, &m); });
  start.visit([&](const std::string& n, const Matrix& m) { w0.emplace_back(n, &m); });
  for (std::size_t k = 0; k < a.size(); ++k) {
    const bool ln = a[k].first.find("ln") != std::string::npos;
    const auto pa = a[k].second->values(), pb = b[k].second->values(), p0 = w0[k].second->values();
    double worst = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      const double expected = ln ? 0.0 : 0.01 * 3.0 * p0[i];
      worst = std::max(worst, std::abs((pa[i] - pb[i]) - expected));
    }
    INFO(a[k].first);
    CHECK(worst < 1e-14);
  }
}

TEST_CASE("config validation") {
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.batch_size = 1;
  tc.weight_decay = -0.1;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  CHECK(parse_schedule("constant") == LrSchedule::kConstant);
  CHECK_THROWS_AS(parse_loss_mask("nope"), ConfigError);
}
