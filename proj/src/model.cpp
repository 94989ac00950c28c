#include "medtrace/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "medtrace/error.hpp"

namespace medtrace {

std::string to_string(MlpActivation a) {
  return a == MlpActivation::kSigmoid ? "sigmoid" : "gelu";
}

MlpActivation parse_activation(const std::string& s) {
  if (s == "sigmoid") return MlpActivation::kSigmoid;
  if (s == "gelu") return MlpActivation::kGelu;
  throw ConfigError("unknown mlp activation '" + s + "' (expected sigmoid or gelu)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (n_heads * d_head != d_model) {
    throw ConfigError("n_heads * d_head = " + std::to_string(n_heads * d_head) +
                      " differs from d_model = " + std::to_string(d_model));
  }
  if (rotary_dim % 2 != 0) {
    throw ConfigError("rotary_dim must be even, got " + std::to_string(rotary_dim));
  }
  if (rotary_dim > d_head) {
    throw ConfigError("rotary_dim " + std::to_string(rotary_dim) + " exceeds d_head " +
                      std::to_string(d_head));
  }
}

// ---------------------------------------------------------------------------
// Weights

Weights Weights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  Weights w;
  w.token_embedding = Matrix(cfg.vocab_size, d);
  w.layers.resize(cfg.n_layers);
  for (auto& lw : w.layers) {
    if (cfg.use_layernorm) {
      lw.ln_gain = Matrix(1, d);
      lw.ln_bias = Matrix(1, d);
    }
    lw.w_q = Matrix(d, d);
    lw.w_k = Matrix(d, d);
    lw.w_v = Matrix(d, d);
    lw.w_o = Matrix(d, d);
    lw.w_fc = Matrix(d, cfg.d_mlp);
    lw.w_proj = Matrix(cfg.d_mlp, d);
  }
  if (cfg.use_layernorm) {
    w.lnf_gain = Matrix(1, d);
    w.lnf_bias = Matrix(1, d);
  }
  w.unembedding = Matrix(d, cfg.vocab_size);
  return w;
}

Weights Weights::random(const ModelConfig& cfg, std::uint64_t seed) {
  Weights w = zeros(cfg);
  Rng rng(seed);
  const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  w.visit([&](const std::string& name, Matrix& m) {
    const bool gain = name.ends_with("gain");
    const bool bias = name.ends_with("bias");
    const bool resid = name.ends_with("w_o") || name.ends_with("w_proj");
    for (double& x : m.values()) {
      if (gain)
        x = 1.0;
      else if (bias)
        x = 0.0;
      else
        x = rng.normal(0.0, resid ? resid_std : 0.02);
    }
  });
  return w;
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

void Weights::check_shapes(const ModelConfig& cfg) const {
  const Weights expected = zeros(cfg);
  std::vector<std::pair<std::string, std::string>> want, have;
  expected.visit([&](const std::string& n, const Matrix& m) { want.emplace_back(n, m.shape_string()); });
  visit([&](const std::string& n, const Matrix& m) { have.emplace_back(n, m.shape_string()); });
  if (want.size() != have.size()) {
    throw ShapeError("weights hold " + std::to_string(have.size()) + " tensors, config expects " +
                     std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i] != have[i]) {
      throw ShapeError("tensor " + have[i].first + " has shape " + have[i].second + ", expected " +
                       want[i].first + " " + want[i].second);
    }
  }
}

// ---------------------------------------------------------------------------
// Components and interventions

std::string to_string(ComponentKind k) {
  switch (k) {
    case ComponentKind::kMlp:
      return "MLP";
    case ComponentKind::kAttn:
      return "ATTN";
    case ComponentKind::kNeuron:
      return "NEURON";
  }
  return "?";
}

ComponentKind parse_component_kind(const std::string& s) {
  std::string u;
  for (char c : s) u += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (u == "MLP") return ComponentKind::kMlp;
  if (u == "ATTN" || u == "ATTENTION") return ComponentKind::kAttn;
  if (u == "NEURON") return ComponentKind::kNeuron;
  throw ConfigError("unknown component kind '" + s + "'");
}

ComponentId ComponentId::resolved(std::size_t seq_len) const {
  ComponentId out = *this;
  if (position < 0) out.position = static_cast<int>(seq_len) + position;
  return out;
}

std::string ComponentId::to_string() const {
  std::string s = medtrace::to_string(kind) + "(l=" + std::to_string(layer) +
                  ",t=" + std::to_string(position);
  if (kind == ComponentKind::kNeuron) s += ",d=" + std::to_string(dim);
  return s + ")";
}

void InterventionSet::add(const ComponentId& id, Replacement value) {
  if (!entries.emplace(id, std::move(value)).second) {
    throw InterventionError("duplicate intervention on " + id.to_string());
  }
}

void InterventionSet::add_residual(int layer, int position, Vector value) {
  if (!residual.emplace(std::pair{layer, position}, std::move(value)).second) {
    throw InterventionError("duplicate residual intervention at layer " + std::to_string(layer) +
                            ", position " + std::to_string(position));
  }
}

Vector ActivationTrace::attn(std::size_t layer, std::size_t position) const {
  return attn_.at(layer).row_vector(position);
}

Vector ActivationTrace::mlp(std::size_t layer, std::size_t position) const {
  return mlp_.at(layer).row_vector(position);
}

Replacement ActivationTrace::value_of(const ComponentId& id) const {
  const ComponentId c = id.resolved(seq_len());
  if (c.layer < 0 || static_cast<std::size_t>(c.layer) >= n_layers() || c.position < 0 ||
      static_cast<std::size_t>(c.position) >= seq_len()) {
    throw InterventionError("trace has no entry for " + id.to_string());
  }
  const auto l = static_cast<std::size_t>(c.layer);
  const auto t = static_cast<std::size_t>(c.position);
  switch (c.kind) {
    case ComponentKind::kMlp:
      return mlp(l, t);
    case ComponentKind::kAttn:
      return attn(l, t);
    case ComponentKind::kNeuron:
      if (c.dim < 0 || static_cast<std::size_t>(c.dim) >= mlp_[l].cols()) {
        throw InterventionError("trace has no entry for " + id.to_string());
      }
      return mlp_[l](t, static_cast<std::size_t>(c.dim));
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Model

namespace {

double rotary_angle(std::size_t position, std::size_t pair, std::size_t rotary_dim, double base) {
  const double inv_freq =
      std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(rotary_dim));
  return static_cast<double>(position) * inv_freq;
}

void layernorm_row(std::span<const double> in, std::span<const double> gain,
                   std::span<const double> bias, std::span<double> out, double& mean_out,
                   double& rstd_out) {
  const auto d = static_cast<double>(in.size());
  double mean = 0.0;
  for (double x : in) mean += x;
  mean /= d;
  double var = 0.0;
  for (double x : in) var += (x - mean) * (x - mean);
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - mean) * rstd * gain[i] + bias[i];
  mean_out = mean;
  rstd_out = rstd;
}

double activate(MlpActivation a, double x) {
  return a == MlpActivation::kSigmoid ? sigmoid(x) : gelu(x);
}

}  // namespace

Vector rotary_encode(std::span<const double> v, std::size_t position, std::size_t rotary_dim,
                     double base) {
  if (rotary_dim % 2 != 0) {
    throw ConfigError("rotary_dim must be even, got " + std::to_string(rotary_dim));
  }
  if (rotary_dim > v.size()) throw ShapeError("rotary_dim exceeds vector length");
  Vector out(v.begin(), v.end());
  for (std::size_t i = 0; i < rotary_dim / 2; ++i) {
    const double theta = rotary_angle(position, i, rotary_dim, base);
    const double c = std::cos(theta), s = std::sin(theta);
    const double x0 = v[2 * i], x1 = v[2 * i + 1];
    out[2 * i] = x0 * c - x1 * s;
    out[2 * i + 1] = x0 * s + x1 * c;
  }
  return out;
}

Model::Model(ModelConfig config, Weights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  weights_.check_shapes(config_);
  const std::size_t half = config_.rotary_dim / 2;
  rope_cos_ = Matrix(config_.max_seq_len, std::max<std::size_t>(half, 1));
  rope_sin_ = Matrix(config_.max_seq_len, std::max<std::size_t>(half, 1));
  for (std::size_t t = 0; t < config_.max_seq_len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = rotary_angle(t, i, config_.rotary_dim, 10000.0);
      rope_cos_(t, i) = std::cos(theta);
      rope_sin_(t, i) = std::sin(theta);
    }
  }
}

void Model::rotate_head(std::span<double> head, std::size_t position, double sign) const {
  for (std::size_t i = 0; i < config_.rotary_dim / 2; ++i) {
    const double c = rope_cos_(position, i);
    const double s = sign * rope_sin_(position, i);
    const double x0 = head[2 * i], x1 = head[2 * i + 1];
    head[2 * i] = x0 * c - x1 * s;
    head[2 * i + 1] = x0 * s + x1 * c;
  }
}

Vector Model::rotary_encode(std::span<const double> q_or_k, std::size_t position) const {
  if (q_or_k.size() != config_.d_head) {
    throw ShapeError("rotary input has length " + std::to_string(q_or_k.size()) +
                     ", expected d_head = " + std::to_string(config_.d_head));
  }
  if (position >= config_.max_seq_len) throw ShapeError("rotary position beyond max_seq_len");
  Vector out(q_or_k.begin(), q_or_k.end());
  rotate_head(out, position, 1.0);
  return out;
}

void Model::validate_sequence(const TokenSequence& seq) const {
  if (seq.empty()) throw ContractViolation("empty token sequence");
  if (seq.size() > config_.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  for (TokenId id : seq) {
    if (id >= config_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(config_.vocab_size));
    }
  }
}

void Model::validate_interventions(const InterventionSet& set, std::size_t seq_len) const {
  const auto L = static_cast<int>(config_.n_layers);
  const auto T = static_cast<int>(seq_len);
  const auto D = config_.d_model;
  for (const auto& [id, value] : set.entries) {
    const ComponentId c = id.resolved(seq_len);
    std::string why;
    if (c.layer < 0 || c.layer >= L) {
      why = "layer out of range [0, " + std::to_string(L) + ")";
    } else if (c.position < 0 || c.position >= T) {
      why = "position out of range for sequence of length " + std::to_string(T);
    } else if (c.kind == ComponentKind::kNeuron) {
      if (c.dim < 0 || static_cast<std::size_t>(c.dim) >= D) why = "neuron dim out of range";
      else if (!std::holds_alternative<double>(value)) why = "neuron replacement must be a scalar";
    } else if (c.dim != -1) {
      why = "dim is only valid for NEURON components";
    } else if (!std::holds_alternative<Vector>(value) || std::get<Vector>(value).size() != D) {
      why = "replacement must be a vector of length d_model";
    }
    if (!why.empty()) throw InterventionError("invalid intervention " + id.to_string() + ": " + why);
  }
  for (const auto& [key, value] : set.residual) {
    const int pos = key.second < 0 ? key.second + T : key.second;
    if (key.first < 0 || key.first >= L || pos < 0 || pos >= T || value.size() != D) {
      throw InterventionError("invalid residual intervention at layer " + std::to_string(key.first) +
                              ", position " + std::to_string(key.second));
    }
  }
}

void Model::run(RunCache& cache, const InterventionSet* iv, std::size_t start_layer,
                std::size_t start_pos) const {
  const std::size_t T = cache.tokens.size();
  const std::size_t D = config_.d_model;
  const std::size_t H = config_.n_heads;
  const std::size_t dh = config_.d_head;
  const std::size_t L = config_.n_layers;
  const bool ln = config_.use_layernorm;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto apply_residual = [&](std::size_t layer, Matrix& h) {
    if (!iv) return;
    for (const auto& [key, value] : iv->residual) {
      if (static_cast<std::size_t>(key.first) != layer) continue;
      const int pos = key.second < 0 ? key.second + static_cast<int>(T) : key.second;
      h.set_row(static_cast<std::size_t>(pos), value);
    }
  };

  Matrix h;
  if (start_layer == 0) {
    h = Matrix(T, D);
    for (std::size_t t = 0; t < T; ++t) h.set_row(t, weights_.token_embedding.row(cache.tokens[t]));
  } else {
    h = start_layer < L ? cache.layers[start_layer].input : cache.final_h;
    apply_residual(start_layer - 1, h);
  }

  for (std::size_t l = start_layer; l < L; ++l) {
    const LayerWeights& w = weights_.layers[l];
    LayerState& s = cache.layers[l];
    s.input = h;

    if (ln) {
      for (std::size_t t = start_pos; t < T; ++t)
        layernorm_row(s.input.row(t), w.ln_gain.row(0), w.ln_bias.row(0), s.x.row(t),
                      s.ln_mean[t], s.ln_rstd[t]);
    } else {
      for (std::size_t t = start_pos; t < T; ++t) s.x.set_row(t, s.input.row(t));
    }

    // Attention: q, k, v for new rows, rotary on q and k.
    kernels::matmul_rows(s.x, w.w_q, s.q, start_pos);
    kernels::matmul_rows(s.x, w.w_k, s.k, start_pos);
    kernels::matmul_rows(s.x, w.w_v, s.v, start_pos);
    for (std::size_t t = start_pos; t < T; ++t) {
      for (std::size_t hd = 0; hd < H; ++hd) {
        rotate_head(s.q.row(t).subspan(hd * dh, dh), t, 1.0);
        rotate_head(s.k.row(t).subspan(hd * dh, dh), t, 1.0);
      }
    }
    Vector scores(T);
    for (std::size_t hd = 0; hd < H; ++hd) {
      Matrix& p = s.probs[hd];
      for (std::size_t t = start_pos; t < T; ++t) {
        auto qt = s.q.row(t).subspan(hd * dh, dh);
        for (std::size_t j = 0; j <= t; ++j) {
          auto kj = s.k.row(j).subspan(hd * dh, dh);
          double acc = 0.0;
          for (std::size_t i = 0; i < dh; ++i) acc += qt[i] * kj[i];
          scores[j] = acc * scale;
        }
        const Vector pr = softmax(std::span<const double>(scores.data(), t + 1));
        auto prow = p.row(t);
        std::fill(prow.begin(), prow.end(), 0.0);
        std::copy(pr.begin(), pr.end(), prow.begin());
        auto zt = s.z.row(t).subspan(hd * dh, dh);
        std::fill(zt.begin(), zt.end(), 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
          auto vj = s.v.row(j).subspan(hd * dh, dh);
          kernels::axpy(pr[j], vj, zt);
        }
      }
    }
    kernels::matmul_rows(s.z, w.w_o, s.attn, start_pos);

    // MLP reads the same block input (parallel attention).
    kernels::matmul_rows(s.x, w.w_fc, s.pre, start_pos);
    for (std::size_t t = start_pos; t < T; ++t) {
      auto pre = s.pre.row(t);
      auto act = s.act.row(t);
      for (std::size_t i = 0; i < pre.size(); ++i) act[i] = activate(config_.mlp_activation, pre[i]);
    }
    kernels::matmul_rows(s.act, w.w_proj, s.mlp, start_pos);

    if (iv) {
      for (const auto& [id, value] : iv->entries) {
        if (static_cast<std::size_t>(id.layer) != l) continue;
        const auto t = static_cast<std::size_t>(id.resolved(T).position);
        switch (id.kind) {
          case ComponentKind::kAttn:
            s.attn.set_row(t, std::get<Vector>(value));
            break;
          case ComponentKind::kMlp:
            s.mlp.set_row(t, std::get<Vector>(value));
            break;
          case ComponentKind::kNeuron:
            s.mlp(t, static_cast<std::size_t>(id.dim)) = std::get<double>(value);
            break;
        }
      }
    }

    for (std::size_t t = start_pos; t < T; ++t) {
      auto hr = h.row(t);
      auto ar = s.attn.row(t);
      auto mr = s.mlp.row(t);
      auto ir = s.input.row(t);
      for (std::size_t i = 0; i < D; ++i) hr[i] = ir[i] + ar[i] + mr[i];
    }
    apply_residual(l, h);
  }

  cache.final_h = std::move(h);
  if (ln) {
    for (std::size_t t = start_pos; t < T; ++t)
      layernorm_row(cache.final_h.row(t), weights_.lnf_gain.row(0), weights_.lnf_bias.row(0),
                    cache.xf.row(t), cache.lnf_mean[t], cache.lnf_rstd[t]);
  } else {
    for (std::size_t t = start_pos; t < T; ++t) cache.xf.set_row(t, cache.final_h.row(t));
  }
}

ForwardResult Model::finish(std::shared_ptr<RunCache> cache, const ForwardOptions& opts) const {
  ForwardResult result;
  const std::size_t T = cache->tokens.size();
  const std::size_t V = config_.vocab_size;
  if (opts.logits == LogitsMode::kAll) {
    result.logits = Matrix(T, V);
    kernels::matmul_rows(cache->xf, weights_.unembedding, result.logits, 0);
  } else {
    Matrix last(1, config_.d_model);
    last.set_row(0, cache->xf.row(T - 1));
    result.logits = Matrix(1, V);
    kernels::matmul_rows(last, weights_.unembedding, result.logits, 0);
  }
  result.distribution = softmax(result.last_logits());
  if (opts.record) {
    std::vector<Matrix> attn, mlp;
    attn.reserve(cache->layers.size());
    mlp.reserve(cache->layers.size());
    for (const auto& s : cache->layers) {
      attn.push_back(s.attn);
      mlp.push_back(s.mlp);
    }
    result.trace = ActivationTrace(std::move(attn), std::move(mlp));
  }
  if (opts.keep_cache) result.cache = std::move(cache);
  return result;
}

ForwardResult Model::forward(const TokenSequence& seq, const ForwardOptions& opts,
                             const InterventionSet* interventions) const {
  validate_sequence(seq);
  if (interventions) validate_interventions(*interventions, seq.size());
  const std::size_t T = seq.size();
  const std::size_t D = config_.d_model;
  auto cache = std::make_shared<RunCache>();
  cache->tokens = seq;
  cache->clean = !interventions || interventions->empty();
  cache->layers.resize(config_.n_layers);
  for (auto& s : cache->layers) {
    s.x = Matrix(T, D);
    if (config_.use_layernorm) {
      s.ln_mean.assign(T, 0.0);
      s.ln_rstd.assign(T, 0.0);
    }
    s.q = Matrix(T, D);
    s.k = Matrix(T, D);
    s.v = Matrix(T, D);
    s.probs.assign(config_.n_heads, Matrix(T, T));
    s.z = Matrix(T, D);
    s.attn = Matrix(T, D);
    s.pre = Matrix(T, config_.d_mlp);
    s.act = Matrix(T, config_.d_mlp);
    s.mlp = Matrix(T, D);
  }
  cache->xf = Matrix(T, D);
  if (config_.use_layernorm) {
    cache->lnf_mean.assign(T, 0.0);
    cache->lnf_rstd.assign(T, 0.0);
  }
  run(*cache, interventions, 0, 0);
  return finish(std::move(cache), opts);
}

ForwardResult Model::patched_forward(const RunCache& clean, const InterventionSet& interventions,
                                     const ForwardOptions& opts) const {
  if (!clean.clean) throw ContractViolation("patched_forward needs a cache from a clean run");
  const std::size_t T = clean.tokens.size();
  validate_interventions(interventions, T);
  std::size_t start_layer = config_.n_layers;
  std::size_t start_pos = T;
  for (const auto& [id, value] : interventions.entries) {
    start_layer = std::min(start_layer, static_cast<std::size_t>(id.layer));
    start_pos = std::min(start_pos, static_cast<std::size_t>(id.resolved(T).position));
  }
  for (const auto& [key, value] : interventions.residual) {
    start_layer = std::min(start_layer, static_cast<std::size_t>(key.first) + 1);
    const int pos = key.second < 0 ? key.second + static_cast<int>(T) : key.second;
    start_pos = std::min(start_pos, static_cast<std::size_t>(pos));
  }
  auto cache = std::make_shared<RunCache>(clean);
  cache->clean = interventions.empty();
  if (start_pos < T) run(*cache, &interventions, start_layer, start_pos);
  return finish(std::move(cache), opts);
}

Vector Model::attention_block(std::size_t layer, const Matrix& h_prefix) const {
  if (h_prefix.rows() == 0) throw ContractViolation("attention over an empty prefix");
  if (h_prefix.cols() != config_.d_model) throw ShapeError("attention input width mismatch");
  if (layer >= config_.n_layers) throw ContractViolation("layer out of range");
  const LayerWeights& w = weights_.layers[layer];
  const std::size_t T = h_prefix.rows();
  const std::size_t D = config_.d_model;
  const std::size_t dh = config_.d_head;
  Matrix x(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    if (config_.use_layernorm) {
      double mean = 0, rstd = 0;
      layernorm_row(h_prefix.row(t), w.ln_gain.row(0), w.ln_bias.row(0), x.row(t), mean, rstd);
    } else {
      x.set_row(t, h_prefix.row(t));
    }
  }
  const Matrix k = matmul(x, w.w_k);
  const Matrix v = matmul(x, w.w_v);
  Matrix q_last(1, D);
  q_last.set_row(0, x.row(T - 1));
  const Matrix q = matmul(q_last, w.w_q);
  Vector concat(D, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t hd = 0; hd < config_.n_heads; ++hd) {
    const Vector qh = rotary_encode(q.row(0).subspan(hd * dh, dh), T - 1);
    Vector scores(T);
    for (std::size_t j = 0; j < T; ++j) {
      const Vector kh = rotary_encode(k.row(j).subspan(hd * dh, dh), j);
      scores[j] = dot(qh, kh) * scale;
    }
    const Vector p = softmax(scores);
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t i = 0; i < dh; ++i) concat[hd * dh + i] += p[j] * v(j, hd * dh + i);
  }
  const Matrix out = matmul(Matrix(1, D, concat), w.w_o);
  return out.row_vector(0);
}

Vector Model::mlp_block(std::size_t layer, std::span<const double> h) const {
  if (h.size() != config_.d_model) throw ShapeError("mlp input width mismatch");
  if (layer >= config_.n_layers) throw ContractViolation("layer out of range");
  const LayerWeights& w = weights_.layers[layer];
  Matrix x(1, config_.d_model);
  if (config_.use_layernorm) {
    double mean = 0, rstd = 0;
    layernorm_row(h, w.ln_gain.row(0), w.ln_bias.row(0), x.row(0), mean, rstd);
  } else {
    x.set_row(0, h);
  }
  Matrix hidden = matmul(x, w.w_fc);
  for (double& v : hidden.values()) v = activate(config_.mlp_activation, v);
  return matmul(hidden, w.w_proj).row_vector(0);
}

Vector restricted_softmax(std::span<const double> logits, const std::vector<TokenId>* restrict) {
  if (!restrict) return softmax(logits);
  if (restrict->empty()) throw ContractViolation("empty restriction set");
  Vector sub(restrict->size());
  for (std::size_t i = 0; i < restrict->size(); ++i) {
    const TokenId id = (*restrict)[i];
    if (id >= logits.size()) throw VocabularyError("restriction token id out of range");
    sub[i] = logits[id];
  }
  const Vector p = softmax(sub);
  Vector out(logits.size(), 0.0);
  for (std::size_t i = 0; i < restrict->size(); ++i) out[(*restrict)[i]] = p[i];
  return out;
}

Vector predict_distribution(const ForwardResult& result, const std::vector<TokenId>* restrict) {
  return restricted_softmax(result.last_logits(), restrict);
}

}  // namespace medtrace
