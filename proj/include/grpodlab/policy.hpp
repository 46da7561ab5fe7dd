#pragma once

// The compact autoregressive token policy: a single-block (configurable)
// causal-attention network over a flat double-precision parameter vector,
// with hand-written reverse-mode gradients for the GRPO-D and SFT losses.
// Double precision throughout; gradient checks at 1e-4 depend on it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "grpodlab/errors.hpp"
#include "grpodlab/grpo.hpp"
#include "grpodlab/parallel.hpp"
#include "grpodlab/rng.hpp"

namespace grpodlab {

struct PolicyArch {
  int vocab_size = 0;
  int d_model = 32;
  int n_heads = 2;
  int n_blocks = 1;
  int max_context = 160;

  int head_dim() const { return d_model / n_heads; }
  int mlp_hidden() const { return 4 * d_model; }

  void validate() const {
    if (vocab_size < 2) throw config_error("arch: vocab_size must be >= 2");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw config_error("arch: d_model must be a positive multiple of n_heads");
    if (n_blocks < 1) throw config_error("arch: n_blocks must be >= 1");
    if (max_context < 2) throw config_error("arch: max_context must be >= 2");
  }

  // tok_emb + pos_emb + per block (Wq,Wk,Wv,Wo + W1,W2) + lm_head
  long parameter_count() const {
    long v = vocab_size, d = d_model, c = max_context, b = n_blocks;
    return 2 * v * d + c * d + b * (4 * d * d + 8 * d * d);
  }

  bool operator==(const PolicyArch&) const = default;
};

// Offsets of each weight matrix inside the flat parameter vector. The order
// here is the declared order of the checkpoint payload.
struct ParamLayout {
  struct Block {
    long wq, wk, wv, wo, w1, w2;
  };
  long tok_emb = 0;
  long pos_emb = 0;
  std::vector<Block> blocks;
  long lm_head = 0;
  long total = 0;

  explicit ParamLayout(const PolicyArch& a) {
    long d = a.d_model, cursor = 0;
    tok_emb = cursor; cursor += static_cast<long>(a.vocab_size) * d;
    pos_emb = cursor; cursor += static_cast<long>(a.max_context) * d;
    for (int b = 0; b < a.n_blocks; ++b) {
      Block blk{};
      blk.wq = cursor; cursor += d * d;
      blk.wk = cursor; cursor += d * d;
      blk.wv = cursor; cursor += d * d;
      blk.wo = cursor; cursor += d * d;
      blk.w1 = cursor; cursor += 4 * d * d;
      blk.w2 = cursor; cursor += 4 * d * d;
      blocks.push_back(blk);
    }
    lm_head = cursor; cursor += static_cast<long>(a.vocab_size) * d;
    total = cursor;
  }
};

struct PolicyParams {
  PolicyArch arch;
  std::vector<double> values;
  int version = 1;
};

// Deep immutable copy; later updates to the source never alter it.
inline PolicyParams snapshot(const PolicyParams& params) { return params; }

inline PolicyParams init_params(const PolicyArch& arch, std::uint64_t seed) {
  arch.validate();
  PolicyParams p;
  p.arch = arch;
  p.values.assign(static_cast<std::size_t>(arch.parameter_count()), 0.0);
  RngStream rng = RngStream::from_seed(seed, RngDomain::ParamInit);
  ParamLayout lay(arch);
  // Body weights at 0.08, lm_head at 0.02 so the initial next-token
  // distribution stays near uniform.
  const double body_std = 0.08, head_std = 0.02;
  for (long i = 0; i < lay.lm_head; ++i)
    p.values[static_cast<std::size_t>(i)] = body_std * rng.next_normal();
  for (long i = lay.lm_head; i < lay.total; ++i)
    p.values[static_cast<std::size_t>(i)] = head_std * rng.next_normal();
  return p;
}

namespace nnk {  // shared numeric kernels; both decode paths must agree bitwise

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// y = W x, W row-major (n_out x n_in)
inline void matvec(const double* w, const double* x, double* y, int n_out,
                   int n_in) {
  for (int o = 0; o < n_out; ++o) y[o] = dot(w + o * n_in, x, n_in);
}

// dW += dy outer x; dx += W^T dy
inline void matvec_backward(const double* w, const double* x,
                            const double* dy, double* dw, double* dx,
                            int n_out, int n_in) {
  for (int o = 0; o < n_out; ++o) {
    const double dyo = dy[o];
    const double* row = w + o * n_in;
    double* drow = dw + o * n_in;
    for (int i = 0; i < n_in; ++i) {
      drow[i] += dyo * x[i];
      dx[i] += row[i] * dyo;
    }
  }
}

constexpr double kRmsEps = 1e-6;

// y = x / rms(x); returns 1/rms for the backward pass
inline double rmsnorm(const double* x, double* y, int n) {
  double ms = dot(x, x, n) / n + kRmsEps;
  double inv = 1.0 / std::sqrt(ms);
  for (int i = 0; i < n; ++i) y[i] = x[i] * inv;
  return inv;
}

// dx += inv*dy - (dot(dy,x)*inv^3/n)*x
inline void rmsnorm_backward(const double* dy, const double* x, double inv,
                             double* dx, int n) {
  double coeff = dot(dy, x, n) * inv * inv * inv / n;
  for (int i = 0; i < n; ++i) dx[i] += dy[i] * inv - coeff * x[i];
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
}

inline double gelu_grad(double x) {
  double phi_cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
  double phi_pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
  return phi_cdf + x * phi_pdf;
}

inline double log_sum_exp(const double* logits, int n, double max_val) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(logits[i] - max_val);
  return max_val + std::log(s);
}

}  // namespace nnk

// ---------------------------------------------------------------------------
// Incremental decoding with a K/V cache.
// ---------------------------------------------------------------------------

class DecodeState {
 public:
  explicit DecodeState(const PolicyParams& params)
      : params_(&params), lay_(params.arch) {
    const PolicyArch& a = params.arch;
    const std::size_t cd =
        static_cast<std::size_t>(a.max_context) * a.d_model;
    k_cache_.assign(static_cast<std::size_t>(a.n_blocks) * cd, 0.0);
    v_cache_.assign(static_cast<std::size_t>(a.n_blocks) * cd, 0.0);
    logits_.assign(static_cast<std::size_t>(a.vocab_size), 0.0);
  }

  int pos() const { return pos_; }

  // Feeds one token, returns logits over the next token.
  const std::vector<double>& feed(int token) {
    const PolicyArch& a = params_->arch;
    if (token < 0 || token >= a.vocab_size)
      throw contract_error("decode: token id out of range");
    if (pos_ >= a.max_context)
      throw contract_error("decode: context overflow");
    const int d = a.d_model, hd = a.head_dim(), hidden = a.mlp_hidden();
    const double* w = params_->values.data();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> x(static_cast<std::size_t>(d));
    std::vector<double> a_norm(static_cast<std::size_t>(d));
    std::vector<double> q(static_cast<std::size_t>(d));
    std::vector<double> ctx(static_cast<std::size_t>(d));
    std::vector<double> tmp_d(static_cast<std::size_t>(d));
    std::vector<double> h(static_cast<std::size_t>(hidden));

    for (int i = 0; i < d; ++i)
      x[static_cast<std::size_t>(i)] =
          w[lay_.tok_emb + static_cast<long>(token) * d + i] +
          w[lay_.pos_emb + static_cast<long>(pos_) * d + i];

    for (int b = 0; b < a.n_blocks; ++b) {
      const ParamLayout::Block& blk = lay_.blocks[static_cast<std::size_t>(b)];
      double* kc = k_cache_.data() +
                   static_cast<std::size_t>(b) * a.max_context * d;
      double* vc = v_cache_.data() +
                   static_cast<std::size_t>(b) * a.max_context * d;

      nnk::rmsnorm(x.data(), a_norm.data(), d);
      nnk::matvec(w + blk.wq, a_norm.data(), q.data(), d, d);
      nnk::matvec(w + blk.wk, a_norm.data(), kc + pos_ * d, d, d);
      nnk::matvec(w + blk.wv, a_norm.data(), vc + pos_ * d, d, d);

      for (int hh = 0; hh < a.n_heads; ++hh) {
        const int off = hh * hd;
        double max_score = -1e300;
        std::vector<double> scores(static_cast<std::size_t>(pos_ + 1));
        for (int s = 0; s <= pos_; ++s) {
          double sc = nnk::dot(q.data() + off, kc + s * d + off, hd) *
                      inv_sqrt_hd;
          scores[static_cast<std::size_t>(s)] = sc;
          max_score = std::max(max_score, sc);
        }
        double z = 0.0;
        for (int s = 0; s <= pos_; ++s) {
          double e = std::exp(scores[static_cast<std::size_t>(s)] - max_score);
          scores[static_cast<std::size_t>(s)] = e;
          z += e;
        }
        const double inv_z = 1.0 / z;
        for (int j = 0; j < hd; ++j) {
          double acc = 0.0;
          for (int s = 0; s <= pos_; ++s)
            acc += scores[static_cast<std::size_t>(s)] * vc[s * d + off + j];
          ctx[static_cast<std::size_t>(off + j)] = acc * inv_z;
        }
      }
      nnk::matvec(w + blk.wo, ctx.data(), tmp_d.data(), d, d);
      for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += tmp_d[static_cast<std::size_t>(i)];

      nnk::rmsnorm(x.data(), a_norm.data(), d);
      nnk::matvec(w + blk.w1, a_norm.data(), h.data(), hidden, d);
      for (int i = 0; i < hidden; ++i)
        h[static_cast<std::size_t>(i)] = nnk::gelu(h[static_cast<std::size_t>(i)]);
      nnk::matvec(w + blk.w2, h.data(), tmp_d.data(), d, hidden);
      for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += tmp_d[static_cast<std::size_t>(i)];
    }

    nnk::rmsnorm(x.data(), a_norm.data(), d);
    nnk::matvec(w + lay_.lm_head, a_norm.data(), logits_.data(),
                a.vocab_size, d);
    ++pos_;
    return logits_;
  }

 private:
  const PolicyParams* params_;
  ParamLayout lay_;
  std::vector<double> k_cache_, v_cache_, logits_;
  int pos_ = 0;
};

struct SamplerCfg {
  double temperature = 1.0;
  int max_new_tokens = 48;
  bool greedy = false;

  void validate() const {
    if (!greedy && !(temperature > 0.0))
      throw config_error("sampler: temperature must be > 0");
    if (max_new_tokens < 1)
      throw config_error("sampler: max_new_tokens must be >= 1");
  }
};

struct SampledCompletion {
  std::vector<int> tokens;
  std::vector<double> logps;  // under the distribution actually sampled from
};

// Autoregressive decoding until eos or the length cap. Sampled log-probs are
// recorded from the temperature-adjusted distribution at generation time;
// greedy decoding is the temperature->0 limit and records log 1 = 0.
inline SampledCompletion sample_completion(const PolicyParams& params,
                                           const std::vector<int>& prompt,
                                           const SamplerCfg& sampler,
                                           RngStream& rng, int eos_token) {
  sampler.validate();
  const PolicyArch& a = params.arch;
  if (prompt.empty()) throw contract_error("sample: prompt must be non-empty");
  if (static_cast<int>(prompt.size()) + sampler.max_new_tokens > a.max_context)
    throw contract_error("sample: prompt plus max_new_tokens exceeds context");

  DecodeState state(params);
  const std::vector<double>* logits = nullptr;
  for (int t : prompt) logits = &state.feed(t);

  SampledCompletion out;
  const int v = a.vocab_size;
  std::vector<double> scaled(static_cast<std::size_t>(v));
  for (int step = 0; step < sampler.max_new_tokens; ++step) {
    int chosen;
    double logp;
    if (sampler.greedy) {
      chosen = 0;
      for (int i = 1; i < v; ++i)
        if ((*logits)[static_cast<std::size_t>(i)] >
            (*logits)[static_cast<std::size_t>(chosen)])
          chosen = i;
      logp = 0.0;
    } else {
      double max_l = -1e300;
      for (int i = 0; i < v; ++i) {
        scaled[static_cast<std::size_t>(i)] =
            (*logits)[static_cast<std::size_t>(i)] / sampler.temperature;
        max_l = std::max(max_l, scaled[static_cast<std::size_t>(i)]);
      }
      double z = 0.0;
      for (int i = 0; i < v; ++i) {
        scaled[static_cast<std::size_t>(i)] =
            std::exp(scaled[static_cast<std::size_t>(i)] - max_l);
        z += scaled[static_cast<std::size_t>(i)];
      }
      const double target = rng.next_double() * z;
      double cum = 0.0;
      chosen = v - 1;
      for (int i = 0; i < v; ++i) {
        cum += scaled[static_cast<std::size_t>(i)];
        if (target < cum) {
          chosen = i;
          break;
        }
      }
      logp = std::log(scaled[static_cast<std::size_t>(chosen)] / z);
    }
    out.tokens.push_back(chosen);
    out.logps.push_back(logp);
    if (chosen == eos_token) break;
    if (step + 1 < sampler.max_new_tokens) logits = &state.feed(chosen);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full-sequence forward with cached activations for the backward pass.
// ---------------------------------------------------------------------------

namespace detail {

// Activations for one sequence. Position p holds token seq[p] and its logits
// predict seq[p+1]; n_pos = len(seq) - 1 positions are processed.
struct SeqCache {
  int n_pos = 0;
  std::vector<int> seq;
  // per block, flattened [block][pos][dim]
  std::vector<double> x_in, a_norm, q, k, v, ctx, x_mid, m_norm, h_pre, h_act,
      x_out;
  std::vector<double> inv1, inv2;      // [block][pos]
  std::vector<double> aw;              // [block][head][pos][pos]
  std::vector<double> y, inv3;         // final norm
  std::vector<double> probs;           // softmax at positions with gradient
  std::vector<double> logits_row;      // scratch
};

inline void forward_sequence(const PolicyParams& params, const ParamLayout& lay,
                             const std::vector<int>& seq, SeqCache& c) {
  const PolicyArch& a = params.arch;
  const int L = static_cast<int>(seq.size());
  if (L < 2) throw contract_error("forward: need at least two tokens");
  if (L > a.max_context) throw contract_error("forward: context overflow");
  const int n = L - 1, d = a.d_model, hd = a.head_dim(),
            hidden = a.mlp_hidden(), nb = a.n_blocks, nh = a.n_heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* w = params.values.data();

  c.n_pos = n;
  c.seq = seq;
  const std::size_t nd = static_cast<std::size_t>(n) * d;
  c.x_in.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.a_norm.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.q.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.k.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.v.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.ctx.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.x_mid.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.m_norm.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.x_out.assign(static_cast<std::size_t>(nb) * nd, 0.0);
  c.h_pre.assign(static_cast<std::size_t>(nb) * n * hidden, 0.0);
  c.h_act.assign(static_cast<std::size_t>(nb) * n * hidden, 0.0);
  c.inv1.assign(static_cast<std::size_t>(nb) * n, 0.0);
  c.inv2.assign(static_cast<std::size_t>(nb) * n, 0.0);
  c.aw.assign(static_cast<std::size_t>(nb) * nh * n * n, 0.0);
  c.y.assign(nd, 0.0);
  c.inv3.assign(static_cast<std::size_t>(n), 0.0);

  // embeddings into block 0 input
  for (int p = 0; p < n; ++p)
    for (int i = 0; i < d; ++i)
      c.x_in[static_cast<std::size_t>(p) * d + i] =
          w[lay.tok_emb + static_cast<long>(seq[static_cast<std::size_t>(p)]) * d + i] +
          w[lay.pos_emb + static_cast<long>(p) * d + i];

  for (int b = 0; b < nb; ++b) {
    const ParamLayout::Block& blk = lay.blocks[static_cast<std::size_t>(b)];
    double* x = c.x_in.data() + static_cast<std::size_t>(b) * nd;
    double* an = c.a_norm.data() + static_cast<std::size_t>(b) * nd;
    double* q = c.q.data() + static_cast<std::size_t>(b) * nd;
    double* k = c.k.data() + static_cast<std::size_t>(b) * nd;
    double* v = c.v.data() + static_cast<std::size_t>(b) * nd;
    double* ctx = c.ctx.data() + static_cast<std::size_t>(b) * nd;
    double* xm = c.x_mid.data() + static_cast<std::size_t>(b) * nd;
    double* mn = c.m_norm.data() + static_cast<std::size_t>(b) * nd;
    double* hp = c.h_pre.data() + static_cast<std::size_t>(b) * n * hidden;
    double* ha = c.h_act.data() + static_cast<std::size_t>(b) * n * hidden;
    double* xo = c.x_out.data() + static_cast<std::size_t>(b) * nd;
    double* inv1 = c.inv1.data() + static_cast<std::size_t>(b) * n;
    double* inv2 = c.inv2.data() + static_cast<std::size_t>(b) * n;
    double* aw = c.aw.data() + static_cast<std::size_t>(b) * nh * n * n;

    for (int p = 0; p < n; ++p) {
      inv1[p] = nnk::rmsnorm(x + p * d, an + p * d, d);
      nnk::matvec(w + blk.wq, an + p * d, q + p * d, d, d);
      nnk::matvec(w + blk.wk, an + p * d, k + p * d, d, d);
      nnk::matvec(w + blk.wv, an + p * d, v + p * d, d, d);
    }
    for (int p = 0; p < n; ++p) {
      for (int hh = 0; hh < nh; ++hh) {
        const int off = hh * hd;
        double* row = aw + (static_cast<std::size_t>(hh) * n + p) * n;
        double max_score = -1e300;
        for (int s = 0; s <= p; ++s) {
          double sc = nnk::dot(q + p * d + off, k + s * d + off, hd) *
                      inv_sqrt_hd;
          row[s] = sc;
          max_score = std::max(max_score, sc);
        }
        double z = 0.0;
        for (int s = 0; s <= p; ++s) {
          row[s] = std::exp(row[s] - max_score);
          z += row[s];
        }
        const double inv_z = 1.0 / z;
        for (int j = 0; j < hd; ++j) {
          double acc = 0.0;
          for (int s = 0; s <= p; ++s) acc += row[s] * v[s * d + off + j];
          ctx[p * d + off + j] = acc * inv_z;
        }
        for (int s = 0; s <= p; ++s) row[s] *= inv_z;  // store normalized
      }
      nnk::matvec(w + blk.wo, ctx + p * d, xm + p * d, d, d);
      for (int i = 0; i < d; ++i) xm[p * d + i] += x[p * d + i];

      inv2[p] = nnk::rmsnorm(xm + p * d, mn + p * d, d);
      nnk::matvec(w + blk.w1, mn + p * d, hp + p * hidden, hidden, d);
      for (int i = 0; i < hidden; ++i)
        ha[p * hidden + i] = nnk::gelu(hp[p * hidden + i]);
      nnk::matvec(w + blk.w2, ha + p * hidden, xo + p * d, d, hidden);
      for (int i = 0; i < d; ++i) xo[p * d + i] += xm[p * d + i];
    }
    if (b + 1 < nb)
      std::copy(xo, xo + nd, c.x_in.data() + static_cast<std::size_t>(b + 1) * nd);
  }

  const double* x_last =
      c.x_out.data() + static_cast<std::size_t>(nb - 1) * nd;
  for (int p = 0; p < n; ++p)
    c.inv3[static_cast<std::size_t>(p)] =
        nnk::rmsnorm(x_last + p * d, c.y.data() + p * d, d);
}

// Log-probs of seq[p0+1 .. L-1]; also caches full softmax rows for backward
// when keep_probs is set.
inline std::vector<double> completion_logps(const PolicyParams& params,
                                            const ParamLayout& lay,
                                            SeqCache& c, int prompt_len,
                                            bool keep_probs) {
  const PolicyArch& a = params.arch;
  const int n = c.n_pos, d = a.d_model, vsz = a.vocab_size;
  const int first = prompt_len - 1;
  const double* w = params.values.data();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n - first));
  if (keep_probs)
    c.probs.assign(static_cast<std::size_t>(n) * vsz, 0.0);
  c.logits_row.assign(static_cast<std::size_t>(vsz), 0.0);

  for (int p = first; p < n; ++p) {
    nnk::matvec(w + lay.lm_head, c.y.data() + p * d, c.logits_row.data(), vsz,
                d);
    double max_l = -1e300;
    for (int i = 0; i < vsz; ++i)
      max_l = std::max(max_l, c.logits_row[static_cast<std::size_t>(i)]);
    const double lse = nnk::log_sum_exp(c.logits_row.data(), vsz, max_l);
    const int target = c.seq[static_cast<std::size_t>(p + 1)];
    out.push_back(c.logits_row[static_cast<std::size_t>(target)] - lse);
    if (keep_probs) {
      double* row = c.probs.data() + static_cast<std::size_t>(p) * vsz;
      for (int i = 0; i < vsz; ++i)
        row[i] = std::exp(c.logits_row[static_cast<std::size_t>(i)] - lse);
    }
  }
  return out;
}

// Reverse pass. dlogp[j] is dL/d(logp of completion token j); the softmax
// rows cached by completion_logps turn it into dlogits, then the network
// runs backward accumulating into grad (flat, same layout as params).
inline void backward_sequence(const PolicyParams& params,
                              const ParamLayout& lay, const SeqCache& c,
                              int prompt_len,
                              const std::vector<double>& dlogp,
                              std::vector<double>& grad) {
  const PolicyArch& a = params.arch;
  const int n = c.n_pos, d = a.d_model, hd = a.head_dim(),
            hidden = a.mlp_hidden(), nb = a.n_blocks, nh = a.n_heads,
            vsz = a.vocab_size;
  const int first = prompt_len - 1;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* w = params.values.data();
  double* g = grad.data();
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  std::vector<double> dx(nd, 0.0);  // gradient wrt current residual stream
  std::vector<double> dtmp(static_cast<std::size_t>(d), 0.0);
  std::vector<double> dlogits(static_cast<std::size_t>(vsz), 0.0);

  // lm head + final rmsnorm
  for (int j = 0; j < n - first; ++j) {
    const int p = first + j;
    const double dl = dlogp[static_cast<std::size_t>(j)];
    if (dl == 0.0) continue;
    const double* prow = c.probs.data() + static_cast<std::size_t>(p) * vsz;
    const int target = c.seq[static_cast<std::size_t>(p + 1)];
    for (int i = 0; i < vsz; ++i)
      dlogits[static_cast<std::size_t>(i)] = -dl * prow[i];
    dlogits[static_cast<std::size_t>(target)] += dl;

    std::fill(dtmp.begin(), dtmp.end(), 0.0);
    nnk::matvec_backward(w + lay.lm_head, c.y.data() + p * d, dlogits.data(),
                         g + lay.lm_head, dtmp.data(), vsz, d);
    const double* x_last =
        c.x_out.data() + static_cast<std::size_t>(nb - 1) * nd;
    nnk::rmsnorm_backward(dtmp.data(), x_last + p * d,
                          c.inv3[static_cast<std::size_t>(p)], dx.data() + p * d, d);
  }

  std::vector<double> dan(nd, 0.0), dq(nd, 0.0), dk(nd, 0.0), dv(nd, 0.0),
      dctx(nd, 0.0), dxm(nd, 0.0);
  std::vector<double> dh(static_cast<std::size_t>(n) * hidden, 0.0);
  std::vector<double> dscore(static_cast<std::size_t>(n), 0.0);

  for (int b = nb - 1; b >= 0; --b) {
    const ParamLayout::Block& blk = lay.blocks[static_cast<std::size_t>(b)];
    const double* x = c.x_in.data() + static_cast<std::size_t>(b) * nd;
    const double* an = c.a_norm.data() + static_cast<std::size_t>(b) * nd;
    const double* q = c.q.data() + static_cast<std::size_t>(b) * nd;
    const double* k = c.k.data() + static_cast<std::size_t>(b) * nd;
    const double* v = c.v.data() + static_cast<std::size_t>(b) * nd;
    const double* ctx = c.ctx.data() + static_cast<std::size_t>(b) * nd;
    const double* xm = c.x_mid.data() + static_cast<std::size_t>(b) * nd;
    const double* mn = c.m_norm.data() + static_cast<std::size_t>(b) * nd;
    const double* hp = c.h_pre.data() + static_cast<std::size_t>(b) * n * hidden;
    const double* ha = c.h_act.data() + static_cast<std::size_t>(b) * n * hidden;
    const double* inv1 = c.inv1.data() + static_cast<std::size_t>(b) * n;
    const double* inv2 = c.inv2.data() + static_cast<std::size_t>(b) * n;
    const double* aw = c.aw.data() + static_cast<std::size_t>(b) * nh * n * n;

    std::fill(dan.begin(), dan.end(), 0.0);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::fill(dctx.begin(), dctx.end(), 0.0);
    std::fill(dxm.begin(), dxm.end(), 0.0);
    std::fill(dh.begin(), dh.end(), 0.0);

    // mlp: x_out = x_mid + W2 gelu(W1 rmsnorm(x_mid))
    for (int p = 0; p < n; ++p) {
      const double* dxo = dx.data() + p * d;
      std::fill(dtmp.begin(), dtmp.end(), 0.0);
      nnk::matvec_backward(w + blk.w2, ha + p * hidden, dxo, g + blk.w2,
                           dh.data() + p * hidden, d, hidden);
      for (int i = 0; i < hidden; ++i)
        dh[static_cast<std::size_t>(p) * hidden + i] *=
            nnk::gelu_grad(hp[p * hidden + i]);
      nnk::matvec_backward(w + blk.w1, mn + p * d, dh.data() + p * hidden,
                           g + blk.w1, dtmp.data(), hidden, d);
      // residual + through the norm
      for (int i = 0; i < d; ++i) dxm[static_cast<std::size_t>(p) * d + i] = dxo[i];
      nnk::rmsnorm_backward(dtmp.data(), xm + p * d, inv2[p],
                            dxm.data() + p * d, d);
    }

    // attention: x_mid = x_in + Wo ctx
    for (int p = 0; p < n; ++p) {
      nnk::matvec_backward(w + blk.wo, ctx + p * d, dxm.data() + p * d,
                           g + blk.wo, dctx.data() + p * d, d, d);
    }
    for (int hh = 0; hh < nh; ++hh) {
      const int off = hh * hd;
      for (int p = 0; p < n; ++p) {
        const double* row = aw + (static_cast<std::size_t>(hh) * n + p) * n;
        const double* dhead = dctx.data() + p * d + off;
        double sum_dw_w = 0.0;
        for (int s = 0; s <= p; ++s) {
          const double* vs = v + s * d + off;
          double* dvs = dv.data() + s * d + off;
          double ds = nnk::dot(dhead, vs, hd);
          for (int j = 0; j < hd; ++j) dvs[j] += row[s] * dhead[j];
          dscore[static_cast<std::size_t>(s)] = ds;
          sum_dw_w += ds * row[s];
        }
        for (int s = 0; s <= p; ++s) {
          const double ds =
              row[s] * (dscore[static_cast<std::size_t>(s)] - sum_dw_w) *
              inv_sqrt_hd;
          const double* ks = k + s * d + off;
          double* dks = dk.data() + s * d + off;
          const double* qp = q + p * d + off;
          double* dqp = dq.data() + p * d + off;
          for (int j = 0; j < hd; ++j) {
            dqp[j] += ds * ks[j];
            dks[j] += ds * qp[j];
          }
        }
      }
    }
    for (int p = 0; p < n; ++p) {
      nnk::matvec_backward(w + blk.wq, an + p * d, dq.data() + p * d,
                           g + blk.wq, dan.data() + p * d, d, d);
      nnk::matvec_backward(w + blk.wk, an + p * d, dk.data() + p * d,
                           g + blk.wk, dan.data() + p * d, d, d);
      nnk::matvec_backward(w + blk.wv, an + p * d, dv.data() + p * d,
                           g + blk.wv, dan.data() + p * d, d, d);
      // dx = dxm (residual) + rmsnorm path
      for (int i = 0; i < d; ++i)
        dx[static_cast<std::size_t>(p) * d + i] = dxm[static_cast<std::size_t>(p) * d + i];
      nnk::rmsnorm_backward(dan.data() + p * d, x + p * d, inv1[p],
                            dx.data() + p * d, d);
    }
  }

  // embeddings
  for (int p = 0; p < n; ++p) {
    const int tok = c.seq[static_cast<std::size_t>(p)];
    for (int i = 0; i < d; ++i) {
      g[lay.tok_emb + static_cast<long>(tok) * d + i] +=
          dx[static_cast<std::size_t>(p) * d + i];
      g[lay.pos_emb + static_cast<long>(p) * d + i] +=
          dx[static_cast<std::size_t>(p) * d + i];
    }
  }
}

}  // namespace detail

// log pi(o_t | q, o_<t) for each completion token, at temperature 1.
inline std::vector<double> logprobs(const PolicyParams& params,
                                    const std::vector<int>& prompt,
                                    const std::vector<int>& completion) {
  if (prompt.empty()) throw contract_error("logprobs: empty prompt");
  if (completion.empty()) throw contract_error("logprobs: empty completion");
  for (int t : prompt)
    if (t < 0 || t >= params.arch.vocab_size)
      throw contract_error("logprobs: prompt token out of range");
  for (int t : completion)
    if (t < 0 || t >= params.arch.vocab_size)
      throw contract_error("logprobs: completion token out of range");
  ParamLayout lay(params.arch);
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), completion.begin(), completion.end());
  detail::SeqCache cache;
  detail::forward_sequence(params, lay, seq, cache);
  return detail::completion_logps(params, lay, cache,
                                  static_cast<int>(prompt.size()), false);
}

// Full next-token distribution after the given context (diagnostics/tests).
inline std::vector<double> next_token_distribution(
    const PolicyParams& params, const std::vector<int>& context) {
  DecodeState state(params);
  const std::vector<double>* logits = nullptr;
  for (int t : context) logits = &state.feed(t);
  if (!logits) throw contract_error("next_token_distribution: empty context");
  const int v = params.arch.vocab_size;
  double max_l = -1e300;
  for (int i = 0; i < v; ++i)
    max_l = std::max(max_l, (*logits)[static_cast<std::size_t>(i)]);
  const double lse = nnk::log_sum_exp(logits->data(), v, max_l);
  std::vector<double> probs(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i)
    probs[static_cast<std::size_t>(i)] =
        std::exp((*logits)[static_cast<std::size_t>(i)] - lse);
  return probs;
}

struct GrpoBatchResult {
  double loss = 0.0;
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  std::vector<double> grad;
};

// Loss per Eq. 4 plus its exact parameter gradient. pi_ref and pi_old
// log-probs are constants: no gradient flows through them, nor through the
// min/clip branch selection beyond the active branch. ref_logps_cache, when
// given, must hold logprobs under ref_params for exactly these rollouts.
inline GrpoBatchResult loss_and_grad(
    const PolicyParams& params, const std::vector<Group>& groups,
    const PolicyParams& ref_params, int step, const KLScheduleCfg& schedule,
    const ClipCfg& clip,
    const std::vector<std::vector<std::vector<double>>>* ref_logps_cache =
        nullptr,
    int threads = 1) {
  if (ref_params.arch != params.arch)
    throw contract_error("loss_and_grad: reference arch mismatch");
  clip.validate();
  const double beta = beta_at(step, schedule);
  const std::size_t n_groups = groups.size();
  if (n_groups == 0) throw contract_error("loss_and_grad: no groups");
  for (const Group& group : groups) {
    if (group.rollouts.size() < 2 ||
        group.advantages.size() != group.rollouts.size())
      throw contract_error("loss_and_grad: bad group shape");
    if (group.prompt_tokens.empty())
      throw contract_error("loss_and_grad: group missing prompt tokens");
    for (const Rollout& ro : group.rollouts)
      if (ro.tokens.empty() || ro.old_logps.size() != ro.tokens.size())
        throw contract_error("loss_and_grad: bad rollout shape");
  }
  ParamLayout lay(params.arch);

  std::vector<std::vector<std::vector<double>>> cur_logps(n_groups);
  std::vector<std::vector<std::vector<double>>> ref_logps(n_groups);
  std::vector<std::vector<double>> group_grads(n_groups);
  std::vector<double> group_kl_sums(n_groups, 0.0);
  std::vector<long> group_clipped(n_groups, 0), group_tokens(n_groups, 0);

  parallel_for(static_cast<int>(n_groups), threads, [&](int gi_int) {
    const std::size_t gi = static_cast<std::size_t>(gi_int);
    const Group& group = groups[gi];
    const std::size_t g = group.rollouts.size();
    cur_logps[gi].resize(g);
    ref_logps[gi].resize(g);
    group_grads[gi].assign(static_cast<std::size_t>(lay.total), 0.0);

    for (std::size_t i = 0; i < g; ++i) {
      const Rollout& ro = group.rollouts[i];
      const std::size_t len = ro.tokens.size();

      std::vector<int> seq = group.prompt_tokens;
      seq.insert(seq.end(), ro.tokens.begin(), ro.tokens.end());
      detail::SeqCache cache;
      detail::forward_sequence(params, lay, seq, cache);
      cur_logps[gi][i] = detail::completion_logps(
          params, lay, cache, static_cast<int>(group.prompt_tokens.size()),
          true);

      if (ref_logps_cache)
        ref_logps[gi][i] = (*ref_logps_cache)[gi][i];
      else
        ref_logps[gi][i] = logprobs(ref_params, group.prompt_tokens, ro.tokens);
      if (ref_logps[gi][i].size() != len)
        throw contract_error("loss_and_grad: ref log-prob misalignment");

      // d(loss)/d(logp_cur) per token
      const double adv = group.advantages[i];
      const double weight =
          -1.0 / (static_cast<double>(n_groups) * static_cast<double>(g) *
                  static_cast<double>(len));
      std::vector<double> dlogp(len, 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        const double lc = cur_logps[gi][i][t];
        const double lo = ro.old_logps[t];
        const double lr = ref_logps[gi][i][t];
        const double ratio = std::exp(lc - lo);
        const double clipped =
            std::clamp(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon);
        const double v1 = ratio * adv, v2 = clipped * adv;
        double dsurr;
        if (v1 <= v2) {
          dsurr = ratio * adv;  // unclipped branch active
        } else {
          ++group_clipped[gi];
          dsurr = 0.0;  // clip saturates: zero gradient on this side
        }
        const double rho = std::exp(lr - lc);
        group_kl_sums[gi] += std::expm1(lr - lc) - (lr - lc);
        dlogp[t] = weight * (dsurr - beta * (1.0 - rho));
      }
      group_tokens[gi] += static_cast<long>(len);
      detail::backward_sequence(params, lay, cache,
                                static_cast<int>(group.prompt_tokens.size()),
                                dlogp, group_grads[gi]);
    }
  });

  GrpoBatchResult out;
  out.grad.assign(static_cast<std::size_t>(lay.total), 0.0);
  long clipped_total = 0, tokens_total = 0;
  double kl_sum = 0.0;
  for (std::size_t gi = 0; gi < n_groups; ++gi) {  // fixed reduction order
    for (std::size_t j = 0; j < out.grad.size(); ++j)
      out.grad[j] += group_grads[gi][j];
    kl_sum += group_kl_sums[gi];
    clipped_total += group_clipped[gi];
    tokens_total += group_tokens[gi];
  }
  out.loss = grpo_d_loss(groups, cur_logps, ref_logps, step, schedule, clip);
  out.kl_mean = tokens_total > 0 ? kl_sum / static_cast<double>(tokens_total) : 0.0;
  out.clip_fraction =
      tokens_total > 0
          ? static_cast<double>(clipped_total) / static_cast<double>(tokens_total)
          : 0.0;
  return out;
}

struct SftPair {
  std::vector<int> prompt;
  std::vector<int> gold;
};

struct SftBatchResult {
  double loss = 0.0;
  std::vector<double> grad;
};

// Batch-mean of per-sequence token-mean negative log-likelihood, with exact
// gradient. A single (prompt, gold) pair is the batch of one.
inline SftBatchResult sft_batch_loss_and_grad(const PolicyParams& params,
                                              const std::vector<SftPair>& batch,
                                              int threads = 1) {
  if (batch.empty()) throw contract_error("sft: empty batch");
  ParamLayout lay(params.arch);
  const std::size_t n = batch.size();
  std::vector<double> seq_losses(n, 0.0);
  std::vector<std::vector<double>> seq_grads(n);

  parallel_for(static_cast<int>(n), threads, [&](int bi_int) {
    const std::size_t bi = static_cast<std::size_t>(bi_int);
    const SftPair& pair = batch[bi];
    if (pair.prompt.empty() || pair.gold.empty())
      throw contract_error("sft: empty prompt or gold completion");
    std::vector<int> seq = pair.prompt;
    seq.insert(seq.end(), pair.gold.begin(), pair.gold.end());
    detail::SeqCache cache;
    detail::forward_sequence(params, lay, seq, cache);
    std::vector<double> lp = detail::completion_logps(
        params, lay, cache, static_cast<int>(pair.prompt.size()), true);
    const std::size_t len = lp.size();
    double sum = 0.0;
    for (double l : lp) sum += l;
    seq_losses[bi] = -sum / static_cast<double>(len);

    seq_grads[bi].assign(static_cast<std::size_t>(lay.total), 0.0);
    const double dl =
        -1.0 / (static_cast<double>(n) * static_cast<double>(len));
    std::vector<double> dlogp(len, dl);
    detail::backward_sequence(params, lay, cache,
                              static_cast<int>(pair.prompt.size()), dlogp,
                              seq_grads[bi]);
  });

  SftBatchResult out;
  out.grad.assign(static_cast<std::size_t>(lay.total), 0.0);
  for (std::size_t bi = 0; bi < n; ++bi) {
    out.loss += seq_losses[bi] / static_cast<double>(n);
    for (std::size_t j = 0; j < out.grad.size(); ++j)
      out.grad[j] += seq_grads[bi][j];
  }
  return out;
}

inline SftBatchResult sft_loss_and_grad(const PolicyParams& params,
                                        const std::vector<int>& prompt,
                                        const std::vector<int>& gold) {
  return sft_batch_loss_and_grad(params, {{prompt, gold}});
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

struct OptimizerState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<double> m, v;
};

inline void optimizer_step(PolicyParams& params,
                           const std::vector<double>& grad,
                           OptimizerState& state) {
  const std::size_t n = params.values.size();
  if (grad.size() != n)
    throw contract_error("optimizer_step: gradient shape mismatch");
  for (double gv : grad)
    if (!std::isfinite(gv))
      throw runtime_abort("optimizer_step: non-finite gradient");
  if (state.m.empty()) state.m.assign(n, 0.0);
  if (state.v.empty()) state.v.assign(n, 0.0);
  if (state.m.size() != n || state.v.size() != n)
    throw contract_error("optimizer_step: moment shape mismatch");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params.values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    if (!std::isfinite(params.values[i]))
      throw runtime_abort("optimizer_step: non-finite parameter after update");
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON manifest line, then the parameter vector (and
// optimizer moments, if present) as little-endian IEEE-754 doubles in
// declared order. sha256 covers the binary payload.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "grpo-d-lab/ckpt";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void append_doubles_le(std::string& buf, const std::vector<double>& xs) {
  for (double x : xs) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    for (int b = 0; b < 8; ++b)
      buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

inline std::vector<double> read_doubles_le(const std::string& buf,
                                           std::size_t offset, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b)
      bits = (bits << 8) |
             static_cast<unsigned char>(buf[offset + i * 8 + static_cast<std::size_t>(b)]);
    double x;
    std::memcpy(&x, &bits, 8);
    out[i] = x;
  }
  return out;
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &md_len, EVP_sha256(),
                 nullptr) != 1)
    throw io_error("sha256 computation failed");
  static const char* kHex = "0123456789abcdef";
  std::string out;
  out.reserve(md_len * 2);
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

}  // namespace detail

struct CheckpointData {
  PolicyParams params;
  std::optional<OptimizerState> optimizer;
  std::string vocab_hash;
};

inline void save_checkpoint(const std::string& path,
                            const PolicyParams& params,
                            const OptimizerState* optimizer,
                            const std::string& vocab_hash) {
  std::string payload;
  payload.reserve(params.values.size() * 8 * (optimizer ? 3 : 1));
  detail::append_doubles_le(payload, params.values);
  if (optimizer) {
    if (optimizer->m.size() != params.values.size() ||
        optimizer->v.size() != params.values.size())
      throw contract_error("save_checkpoint: moment shape mismatch");
    detail::append_doubles_le(payload, optimizer->m);
    detail::append_doubles_le(payload, optimizer->v);
  }

  nlohmann::json manifest{
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"arch",
       {{"vocab_size", params.arch.vocab_size},
        {"d_model", params.arch.d_model},
        {"n_heads", params.arch.n_heads},
        {"n_blocks", params.arch.n_blocks},
        {"max_context", params.arch.max_context},
        {"vocab_hash", vocab_hash}}},
      {"param_count", params.values.size()},
      {"sha256", detail::sha256_hex(payload)}};
  if (optimizer)
    manifest["optimizer"] = {{"lr", optimizer->lr},
                             {"beta1", optimizer->beta1},
                             {"beta2", optimizer->beta2},
                             {"eps", optimizer->eps},
                             {"step", optimizer->step}};
  else
    manifest["optimizer"] = nullptr;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open checkpoint for writing: " + path);
  out << manifest.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw io_error("checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error("empty checkpoint: " + path);
  nlohmann::json manifest = nlohmann::json::parse(line, nullptr, false);
  if (manifest.is_discarded() ||
      manifest.value("format", "") != kCheckpointFormat)
    throw io_error("not a checkpoint file: " + path);
  if (manifest.value("version", -1) != kCheckpointVersion)
    throw io_error("checkpoint version mismatch in " + path);

  CheckpointData data;
  const auto& arch_j = manifest.at("arch");
  data.params.arch.vocab_size = arch_j.at("vocab_size").get<int>();
  data.params.arch.d_model = arch_j.at("d_model").get<int>();
  data.params.arch.n_heads = arch_j.at("n_heads").get<int>();
  data.params.arch.n_blocks = arch_j.at("n_blocks").get<int>();
  data.params.arch.max_context = arch_j.at("max_context").get<int>();
  data.vocab_hash = arch_j.value("vocab_hash", "");
  data.params.arch.validate();

  const std::size_t n = manifest.at("param_count").get<std::size_t>();
  if (n != static_cast<std::size_t>(data.params.arch.parameter_count()))
    throw io_error("checkpoint param_count disagrees with arch in " + path);

  std::string payload((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  const bool has_opt = !manifest.at("optimizer").is_null();
  const std::size_t expect = n * 8 * (has_opt ? 3 : 1);
  if (payload.size() != expect)
    throw io_error("checkpoint payload truncated or oversized in " + path);
  if (detail::sha256_hex(payload) != manifest.value("sha256", ""))
    throw io_error("checkpoint sha256 mismatch in " + path);

  data.params.values = detail::read_doubles_le(payload, 0, n);
  for (double x : data.params.values)
    if (!std::isfinite(x)) throw io_error("non-finite parameter in " + path);
  if (has_opt) {
    OptimizerState opt;
    const auto& oj = manifest.at("optimizer");
    opt.lr = oj.at("lr").get<double>();
    opt.beta1 = oj.at("beta1").get<double>();
    opt.beta2 = oj.at("beta2").get<double>();
    opt.eps = oj.at("eps").get<double>();
    opt.step = oj.at("step").get<long>();
    opt.m = detail::read_doubles_le(payload, n * 8, n);
    opt.v = detail::read_doubles_le(payload, n * 16, n);
    data.optimizer = std::move(opt);
  }
  return data;
}

}  // namespace grpodlab
