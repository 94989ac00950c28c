#include "medtrace/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "medtrace/error.hpp"
#include "medtrace/metrics.hpp"

namespace medtrace {

std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "linear_decay"; }
std::string to_string(LossMask m) { return m == LossMask::kAnswerOnly ? "answer_only" : "full_sequence"; }

LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "linear_decay") return LrSchedule::kLinearDecay;
  throw ConfigError("unknown schedule '" + s + "'");
}

LossMask parse_loss_mask(const std::string& s) {
  if (s == "answer_only") return LossMask::kAnswerOnly;
  if (s == "full_sequence") return LossMask::kFullSequence;
  throw ConfigError("unknown loss mask '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be non-negative");
  }
}

std::vector<std::uint8_t> make_mask(std::size_t seq_len, LossMask policy) {
  if (seq_len < 2) throw ContractViolation("a training sequence needs at least two tokens");
  std::vector<std::uint8_t> mask(seq_len - 1, policy == LossMask::kFullSequence ? 1 : 0);
  mask.back() = 1;
  return mask;
}

namespace {

void add_into(Matrix& acc, const Matrix& m) {
  auto a = acc.values();
  auto b = m.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Backward of y = (x - mean) * rstd * gain + bias for one row.
void layernorm_backward(std::span<const double> x, double mean, double rstd,
                        std::span<const double> gain, std::span<const double> dy,
                        std::span<double> dx, std::span<double> dgain, std::span<double> dbias) {
  const std::size_t d = x.size();
  Vector xhat(d), dxhat(d);
  double mean_dxhat = 0, mean_dxhat_xhat = 0;
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    dxhat[i] = dy[i] * gain[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
    mean_dxhat += dxhat[i];
    mean_dxhat_xhat += dxhat[i] * xhat[i];
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i)
    dx[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
}

double activation_derivative(MlpActivation a, double pre, double act) {
  if (a == MlpActivation::kSigmoid) return act * (1.0 - act);
  return gelu_derivative(pre);
}

// Accumulates one sequence's gradients; returns its summed loss.
double backward_one(const Model& model, const TokenSequence& seq,
                    const std::vector<std::uint8_t>& mask, double weight, Gradients& g) {
  const ModelConfig& cfg = model.config();
  const Weights& w = model.weights();
  const TokenSequence input(seq.begin(), seq.end() - 1);
  ForwardOptions opts;
  opts.keep_cache = true;
  opts.logits = LogitsMode::kLastOnly;
  const ForwardResult fwd = model.forward(input, opts);
  const RunCache& c = *fwd.cache;

  const std::size_t T = input.size();
  const std::size_t D = cfg.d_model;
  const std::size_t V = cfg.vocab_size;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head;
  const bool ln = cfg.use_layernorm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  double loss = 0;
  Matrix dxf(T, D);
  Vector logits(V);
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    auto xf = c.xf.row(t);
    std::fill(logits.begin(), logits.end(), 0.0);
    for (std::size_t i = 0; i < D; ++i) kernels::axpy(xf[i], w.unembedding.row(i), logits);
    Vector p = softmax(logits);
    const TokenId target = seq[t + 1];
    loss -= std::log(std::max(p[target], 1e-300));
    p[target] -= 1.0;
    for (double& v : p) v *= weight;
    auto dx = dxf.row(t);
    for (std::size_t i = 0; i < D; ++i) {
      kernels::axpy(xf[i], p, g.unembedding.row(i));
      dx[i] = dot(w.unembedding.row(i), p);
    }
  }

  Matrix dh_mat(T, D);
  if (ln) {
    for (std::size_t t = 0; t < T; ++t)
      layernorm_backward(c.final_h.row(t), c.lnf_mean[t], c.lnf_rstd[t], w.lnf_gain.row(0),
                         dxf.row(t), dh_mat.row(t), g.lnf_gain.row(0), g.lnf_bias.row(0));
  } else {
    dh_mat = dxf;
  }

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const LayerWeights& lw = w.layers[l];
    LayerWeights& lg = g.layers[l];
    const LayerState& s = c.layers[l];

    // MLP branch.
    add_into(lg.w_proj, matmul_tn(s.act, dh_mat));
    Matrix dpre = matmul_nt(dh_mat, lw.w_proj);
    for (std::size_t t = 0; t < T; ++t) {
      auto dp = dpre.row(t);
      auto pre = s.pre.row(t);
      auto act = s.act.row(t);
      for (std::size_t i = 0; i < dp.size(); ++i)
        dp[i] *= activation_derivative(cfg.mlp_activation, pre[i], act[i]);
    }
    add_into(lg.w_fc, matmul_tn(s.x, dpre));
    Matrix dx = matmul_nt(dpre, lw.w_fc);

    // Attention branch.
    add_into(lg.w_o, matmul_tn(s.z, dh_mat));
    const Matrix dz = matmul_nt(dh_mat, lw.w_o);
    Matrix dq(T, D), dk(T, D), dv(T, D);
    Vector dp(T);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t t = 0; t < T; ++t) {
        auto dzt = dz.row(t).subspan(off, dh);
        auto pr = s.probs[hd].row(t);
        double weighted = 0;
        for (std::size_t j = 0; j <= t; ++j) {
          dp[j] = dot(dzt, s.v.row(j).subspan(off, dh));
          weighted += pr[j] * dp[j];
          kernels::axpy(pr[j], dzt, dv.row(j).subspan(off, dh));
        }
        auto dqt = dq.row(t).subspan(off, dh);
        auto qt = s.q.row(t).subspan(off, dh);
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = pr[j] * (dp[j] - weighted) * scale;
          kernels::axpy(ds, s.k.row(j).subspan(off, dh), dqt);
          kernels::axpy(ds, qt, dk.row(j).subspan(off, dh));
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t hd = 0; hd < H; ++hd) {
        model.rotate_head(dq.row(t).subspan(hd * dh, dh), t, -1.0);
        model.rotate_head(dk.row(t).subspan(hd * dh, dh), t, -1.0);
      }
    }
    add_into(lg.w_q, matmul_tn(s.x, dq));
    add_into(lg.w_k, matmul_tn(s.x, dk));
    add_into(lg.w_v, matmul_tn(s.x, dv));
    add_into(dx, matmul_nt(dq, lw.w_q));
    add_into(dx, matmul_nt(dk, lw.w_k));
    add_into(dx, matmul_nt(dv, lw.w_v));

    // Residual path plus the block input's normalisation.
    if (ln) {
      for (std::size_t t = 0; t < T; ++t)
        layernorm_backward(s.input.row(t), s.ln_mean[t], s.ln_rstd[t], lw.ln_gain.row(0),
                           dx.row(t), dh_mat.row(t), lg.ln_gain.row(0), lg.ln_bias.row(0));
    } else {
      add_into(dh_mat, dx);
    }
  }

  for (std::size_t t = 0; t < T; ++t)
    kernels::axpy(1.0, dh_mat.row(t), g.token_embedding.row(input[t]));
  return loss;
}

double global_norm(const Gradients& g) {
  double sq = 0;
  g.visit([&](const std::string&, const Matrix& m) {
    for (double v : m.values()) sq += v * v;
  });
  return std::sqrt(sq);
}

struct Adam {
  Weights m, v;
  std::size_t t = 0;
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit Adam(const ModelConfig& cfg) : m(Weights::zeros(cfg)), v(Weights::zeros(cfg)) {}

  void step(Weights& w, const Gradients& g, double lr, double grad_scale, double decay) {
    ++t;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
    std::vector<Matrix*> ws, ms, vs;
    std::vector<const Matrix*> gs;
    std::vector<double> shrink;
    w.visit([&](const std::string& name, Matrix& x) {
      ws.push_back(&x);
      shrink.push_back(name.find("ln") == std::string::npos ? 1.0 - lr * decay : 1.0);
    });
    m.visit([&](const std::string&, Matrix& x) { ms.push_back(&x); });
    v.visit([&](const std::string&, Matrix& x) { vs.push_back(&x); });
    g.visit([&](const std::string&, const Matrix& x) { gs.push_back(&x); });
    for (std::size_t k = 0; k < ws.size(); ++k) {
      auto wv = ws[k]->values();
      auto mv = ms[k]->values();
      auto vv = vs[k]->values();
      auto gv = gs[k]->values();
      for (std::size_t i = 0; i < wv.size(); ++i) {
        const double gi = gv[i] * grad_scale;
        mv[i] = kBeta1 * mv[i] + (1 - kBeta1) * gi;
        vv[i] = kBeta2 * vv[i] + (1 - kBeta2) * gi * gi;
        wv[i] = shrink[k] * wv[i] - lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + kEps);
      }
    }
  }
};

double learning_rate_at(const TrainConfig& c, std::size_t step, std::size_t total) {
  double lr = c.learning_rate;
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  if (c.schedule == LrSchedule::kLinearDecay && total > 0) {
    lr *= 1.0 - static_cast<double>(step) / static_cast<double>(total);
  }
  return lr;
}

}  // namespace

LossAndGradients loss_and_gradients(const Model& model, const std::vector<TokenSequence>& batch,
                                    const std::vector<std::vector<std::uint8_t>>& masks) {
  if (batch.empty()) throw ContractViolation("loss over an empty batch");
  if (masks.size() != batch.size()) throw ContractViolation("one mask per sequence required");
  LossAndGradients out;
  out.gradients = Weights::zeros(model.config());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].size() < 2) throw ContractViolation("a training sequence needs at least two tokens");
    if (batch[i].size() - 1 > model.config().max_seq_len) {
      throw ShapeError("training sequence of " + std::to_string(batch[i].size()) +
                       " tokens exceeds max_seq_len + 1");
    }
    if (masks[i].size() != batch[i].size() - 1) {
      throw ContractViolation("mask length must be sequence length - 1");
    }
    for (auto m : masks[i]) out.targets += m ? 1 : 0;
  }
  if (out.targets == 0) return out;
  const double weight = 1.0 / static_cast<double>(out.targets);
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (std::find(masks[i].begin(), masks[i].end(), 1) == masks[i].end()) continue;
    total += backward_one(model, batch[i], masks[i], weight, out.gradients);
  }
  out.loss = total * weight;
  return out;
}

std::vector<LabeledSequence> tokenize_examples(const Vocabulary& vocab,
                                               const std::vector<TaskExample>& examples) {
  std::vector<LabeledSequence> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    const TokenSequence answer = vocab.tokenize(e.answer);
    if (answer.size() != 1) {
      throw VocabularyError("answer '" + e.answer + "' is not a single token");
    }
    out.push_back({vocab.tokenize(e.prompt), answer.front(), e.prompt});
  }
  return out;
}

double evaluate(const Model& model, const std::vector<LabeledSequence>& eval_set,
                const std::vector<TokenId>& restrict) {
  if (eval_set.empty()) throw ContractViolation("evaluation over an empty set");
  std::vector<TokenId> sorted(restrict);
  std::sort(sorted.begin(), sorted.end());
  ForwardOptions opts;
  opts.logits = LogitsMode::kLastOnly;
  std::size_t correct = 0;
  for (const auto& ex : eval_set) {
    if (!std::binary_search(sorted.begin(), sorted.end(), ex.answer)) {
      throw ContractViolation("answer of '" + ex.text + "' lies outside the restriction set");
    }
    const ForwardResult r = model.forward(ex.prompt, opts);
    if (restricted_argmax(r.last_logits(), restrict) == ex.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

TrainReport train(Model& model, const std::vector<LabeledSequence>& corpus,
                  const TrainConfig& config, const EvalHook& eval) {
  config.validate();
  if (corpus.empty()) throw ContractViolation("training corpus is empty");
  TrainReport report;
  const std::size_t per_epoch = (corpus.size() + config.batch_size - 1) / config.batch_size;
  std::size_t total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min(total, config.max_steps);
  if (config.max_steps > 0 && config.epochs == 0) total = 0;

  Adam adam(model.config());
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(config.seed, epoch);
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size() && step < total; b += config.batch_size) {
      std::vector<TokenSequence> batch;
      std::vector<std::vector<std::uint8_t>> masks;
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) {
        const auto& ex = corpus[order[i]];
        TokenSequence seq = ex.prompt;
        seq.push_back(ex.answer);
        masks.push_back(make_mask(seq.size(), config.mask));
        batch.push_back(std::move(seq));
      }
      const LossAndGradients lg = loss_and_gradients(model, batch, masks);
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("loss diverged (" + std::to_string(lg.loss) + ") at step " +
                            std::to_string(step));
      }
      double grad_scale = 1.0;
      if (config.clip_norm > 0) {
        const double n = global_norm(lg.gradients);
        if (!std::isfinite(n)) {
          throw TrainingError("non-finite gradient at step " + std::to_string(step));
        }
        if (n > config.clip_norm) grad_scale = config.clip_norm / n;
      }
      const double lr = learning_rate_at(config, step, total);
      adam.step(model.mutable_weights(), lg.gradients, lr, grad_scale, config.weight_decay);
      StepLog entry{step, lr, lg.loss, -1};
      ++step;
      if (eval.set && config.eval_every > 0 && step % config.eval_every == 0 && step < total) {
        entry.eval_accuracy = evaluate(model, *eval.set, *eval.restrict);
      }
      report.log.push_back(entry);
    }
  }
  report.steps = step;
  if (eval.set) {
    report.final_accuracy = evaluate(model, *eval.set, *eval.restrict);
    if (!report.log.empty()) report.log.back().eval_accuracy = report.final_accuracy;
  }
  return report;
}

TrainReport fine_tune(Model& model, const std::vector<LabeledSequence>& corpus,
                      const TrainConfig& config, const std::unordered_set<std::string>& trace_prompts,
                      const EvalHook& eval) {
  std::vector<std::string> collisions;
  for (const auto& ex : corpus)
    if (trace_prompts.contains(ex.text)) collisions.push_back(ex.text);
  if (!collisions.empty()) {
    std::string msg = std::to_string(collisions.size()) +
                      " fine-tuning prompts also appear in the tracing corpus:";
    for (std::size_t i = 0; i < std::min<std::size_t>(collisions.size(), 5); ++i)
      msg += " '" + collisions[i] + "'";
    throw ContractViolation(msg);
  }
  return train(model, corpus, config, eval);
}

void write_metrics_log(const std::filesystem::path& path, const TrainReport& report,
                       const TrainConfig& config, const std::vector<std::string>& extra_header) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write metrics log " + path.string());
  for (const auto& h : extra_header) out << "# " << h << '\n';
  out << "# optimizer: adam beta1=0.9 beta2=0.999 eps=1e-8 (substitutes adafactor)\n";
  out << "# schedule: " << to_string(config.schedule) << " lr=" << config.learning_rate
      << " batch=" << config.batch_size << " epochs=" << config.epochs
      << " clip_norm=" << config.clip_norm << " weight_decay=" << config.weight_decay << '\n';
  out << "# loss mask: " << to_string(config.mask)
      << (config.mask == LossMask::kAnswerOnly ? " (assumed; supervises only the answer token)" : "")
      << '\n';
  out << "step\tlr\tloss\teval_accuracy\n";
  char buf[128];
  for (const auto& s : report.log) {
    if (s.eval_accuracy >= 0)
      std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\n", s.step, s.lr, s.loss, s.eval_accuracy);
    else
      std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t\n", s.step, s.lr, s.loss);
    out << buf;
  }
  if (!out) throw FormatError("failed writing metrics log " + path.string());
}

}  // namespace medtrace
