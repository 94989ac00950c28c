#pragma once

// Scalar reference forward pass, written straight from the model definition
// with no shared code paths: explicit loops, per-token recomputation of every
// projection, rotary angles recomputed from scratch.

#include <cmath>
#include <map>
#include <vector>

#include "medtrace/model.hpp"

namespace oracle {

using medtrace::ComponentId;
using medtrace::ComponentKind;
using medtrace::Matrix;
using medtrace::ModelConfig;
using medtrace::TokenSequence;
using medtrace::Weights;
using Vec = std::vector<double>;

inline Vec row_times(const Vec& x, const Matrix& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    long double acc = 0;
    for (std::size_t i = 0; i < w.rows(); ++i) acc += static_cast<long double>(x[i]) * w(i, j);
    out[j] = static_cast<double>(acc);
  }
  return out;
}

inline Vec layer_norm(const Vec& x, const Matrix& g, const Matrix& b) {
  const double n = static_cast<double>(x.size());
  double mu = 0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g(0, i) + b(0, i);
  return out;
}

inline Vec rotate(const Vec& v, std::size_t pos, std::size_t rotary_dim) {
  Vec out = v;
  for (std::size_t i = 0; 2 * i + 1 < rotary_dim; ++i) {
    const double theta = static_cast<double>(pos) / std::pow(10000.0, 2.0 * i / rotary_dim);
    out[2 * i] = v[2 * i] * std::cos(theta) - v[2 * i + 1] * std::sin(theta);
    out[2 * i + 1] = v[2 * i] * std::sin(theta) + v[2 * i + 1] * std::cos(theta);
  }
  return out;
}

inline double act(const ModelConfig& c, double x) {
  if (c.mlp_activation == medtrace::MlpActivation::kSigmoid) return 1.0 / (1.0 + std::exp(-x));
  const double k = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

struct Patch {
  std::map<ComponentId, Vec> vectors;  // MLP / ATTN, position resolved
  std::map<ComponentId, double> scalars;  // NEURON, position resolved
  std::map<std::pair<int, int>, Vec> residual;
};

struct Run {
  std::vector<Vec> logits;                  // per position
  std::vector<std::vector<Vec>> attn, mlp;  // [layer][position]
};

inline Run forward(const ModelConfig& c, const Weights& w, const TokenSequence& toks,
                   const Patch& patch = {}) {
  const std::size_t T = toks.size(), D = c.d_model, dh = c.d_head;
  std::vector<Vec> h(T);
  for (std::size_t t = 0; t < T; ++t) h[t] = w.token_embedding.row_vector(toks[t]);
  Run run;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    std::vector<Vec> x(T), q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      x[t] = c.use_layernorm ? layer_norm(h[t], lw.ln_gain, lw.ln_bias) : h[t];
      q[t] = row_times(x[t], lw.w_q);
      k[t] = row_times(x[t], lw.w_k);
      v[t] = row_times(x[t], lw.w_v);
    }
    std::vector<Vec> a(T), m(T);
    for (std::size_t t = 0; t < T; ++t) {
      Vec z(D, 0.0);
      for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
        Vec qh(q[t].begin() + hd * dh, q[t].begin() + (hd + 1) * dh);
        qh = rotate(qh, t, c.rotary_dim);
        Vec s(t + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          Vec kh(k[j].begin() + hd * dh, k[j].begin() + (hd + 1) * dh);
          kh = rotate(kh, j, c.rotary_dim);
          double d = 0;
          for (std::size_t i = 0; i < dh; ++i) d += qh[i] * kh[i];
          s[j] = d / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double zsum = 0;
        for (auto& e : s) zsum += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t i = 0; i < dh; ++i) z[hd * dh + i] += s[j] / zsum * v[j][hd * dh + i];
      }
      a[t] = row_times(z, lw.w_o);
      Vec pre = row_times(x[t], lw.w_fc);
      for (double& e : pre) e = act(c, e);
      m[t] = row_times(pre, lw.w_proj);
      const int li = static_cast<int>(l), ti = static_cast<int>(t);
      if (auto it = patch.vectors.find(ComponentId::attn(li, ti)); it != patch.vectors.end()) a[t] = it->second;
      if (auto it = patch.vectors.find(ComponentId::mlp(li, ti)); it != patch.vectors.end()) m[t] = it->second;
      for (std::size_t d = 0; d < D; ++d) {
        auto it = patch.scalars.find(ComponentId::neuron(li, ti, static_cast<int>(d)));
        if (it != patch.scalars.end()) m[t][d] = it->second;
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t d = 0; d < D; ++d) h[t][d] += a[t][d] + m[t][d];
      auto it = patch.residual.find({static_cast<int>(l), static_cast<int>(t)});
      if (it != patch.residual.end()) h[t] = it->second;
    }
    run.attn.push_back(a);
    run.mlp.push_back(m);
  }
  for (std::size_t t = 0; t < T; ++t) {
    const Vec xf = c.use_layernorm ? layer_norm(h[t], w.lnf_gain, w.lnf_bias) : h[t];
    run.logits.push_back(row_times(xf, w.unembedding));
  }
  return run;
}

inline Vec softmax(const Vec& z) {
  double mx = -1e300;
  for (double v : z) mx = std::max(mx, v);
  Vec p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

// Weights with a larger scale than the default init, so that attention
// patterns and layernorm statistics are far from uniform.
inline Weights loud_weights(const ModelConfig& c, std::uint64_t seed, double scale = 0.4) {
  Weights w = Weights::zeros(c);
  medtrace::Rng rng(seed);
  w.visit([&](const std::string& name, Matrix& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (double& v : m.values()) v = gain ? 1.0 + 0.3 * rng.normal() : scale * rng.normal();
  });
  return w;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
