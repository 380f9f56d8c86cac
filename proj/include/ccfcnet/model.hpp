#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/fc_matrix.hpp"
#include "ccfcnet/nn.hpp"

namespace ccfcnet {

enum class Mode { train, eval };

struct Ablations {
  bool no_mask = false;
  bool no_intra = false;
  bool no_prototype = false;
  bool no_step2 = false;
  bool no_reg = false;
};

struct ModelConfig {
  int r = 0;
  int d = 0;            // 0 -> r
  int hidden_enc = 128;
  int n_blocks = 2;
  int n_heads = 10;
  double tau_gumbel = 5.0;
  double softmax_temp = 0.5;
  double dropout = 0.5;
  int attn_hidden = 0;  // 0 -> round(r(r-1)/4)
  int dec_hidden = 0;   // 0 -> round(r(r-1)/4)
  int n_classes = 2;

  int n_edges() const { return upper_edge_count(r); }

  void finalize() {
    if (r < 2) throw ConfigError("model requires r >= 2");
    if (d == 0) d = r;
    if (attn_hidden == 0) attn_hidden = static_cast<int>(std::llround(r * (r - 1) / 4.0));
    if (dec_hidden == 0) dec_hidden = static_cast<int>(std::llround(r * (r - 1) / 4.0));
    if (n_heads < 1 || d % n_heads != 0) {
      throw ConfigError("feature dim " + std::to_string(d) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (tau_gumbel <= 0) throw ConfigError("tau_gumbel must be positive");
    if (softmax_temp <= 0) throw ConfigError("softmax_temp must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0,1)");
    if (n_blocks < 0) throw ConfigError("n_blocks must be >= 0");
    if (n_classes != 2) throw ConfigError("tooling supports exactly 2 classes");
  }
};

// Fixed table: alternating sin/cos over the feature index, one row per token.
inline Matrix sinusoidal_position_table(int n_rows, int d) {
  Matrix e(n_rows, d);
  for (int pos = 0; pos < n_rows; ++pos) {
    for (int j = 0; j < d; ++j) {
      const int pair = j - (j % 2);
      const double omega = std::exp(-std::log(10000.0) * pair / d);
      e(pos, j) = (j % 2 == 0) ? std::sin(pos * omega) : std::cos(pos * omega);
    }
  }
  return e;
}

struct AttentionNetParams {
  LinearParams fc1, fc2;
};

struct IntraEncoderParams {
  LayerNormParams ln;
  LinearParams fc1, fc2;
};

struct MhsaParams {
  LayerNormParams ln;
  LinearParams q, k, v;
  Matrix w_out;  // d x d, no bias
};

struct BlockParams {
  MhsaParams mhsa;
  IntraEncoderParams intra;
};

struct DecoderParams {
  LinearParams fc1, fc2;
};

struct TensorRef {
  std::string name;
  double* data = nullptr;
  int rows = 0;
  int cols = 0;
  bool decoder = false;

  int size() const { return rows * cols; }
  Eigen::Map<Matrix> map() const { return Eigen::Map<Matrix>(data, rows, cols); }
};

struct ModelParams {
  ModelConfig config;
  Ablations ablations;

  AttentionNetParams attn;
  IntraEncoderParams stem;  // r -> d, applied to each row of the masked FC
  std::vector<BlockParams> blocks;
  Vector z_summary;    // d
  Matrix prototypes;   // C x d
  LinearParams head;   // linear classifier used under no_prototype
  DecoderParams decoder;
  Matrix pos_table;    // (r+1) x d, fixed, not trained

  static ModelParams init(ModelConfig cfg, const Ablations& ab, uint64_t seed) {
    cfg.finalize();
    ModelParams p;
    p.config = cfg;
    p.ablations = ab;

    const int ne = cfg.n_edges();
    p.attn.fc1.resize(cfg.attn_hidden, ne);
    p.attn.fc2.resize(ne, cfg.attn_hidden);
    p.stem.ln.resize(cfg.r);
    p.stem.fc1.resize(cfg.hidden_enc, cfg.r);
    p.stem.fc2.resize(cfg.d, cfg.hidden_enc);
    p.blocks.resize(cfg.n_blocks);
    for (auto& blk : p.blocks) {
      blk.mhsa.ln.resize(cfg.d);
      blk.mhsa.q.resize(cfg.d, cfg.d);
      blk.mhsa.k.resize(cfg.d, cfg.d);
      blk.mhsa.v.resize(cfg.d, cfg.d);
      blk.mhsa.w_out = Matrix::Zero(cfg.d, cfg.d);
      blk.intra.ln.resize(cfg.d);
      blk.intra.fc1.resize(cfg.hidden_enc, cfg.d);
      blk.intra.fc2.resize(cfg.d, cfg.hidden_enc);
    }
    p.z_summary = Vector::Zero(cfg.d);
    p.prototypes = Matrix::Zero(cfg.n_classes, cfg.d);
    p.head.resize(cfg.n_classes, cfg.d);
    p.decoder.fc1.resize(cfg.dec_hidden, cfg.d);
    p.decoder.fc2.resize(ne, cfg.dec_hidden);
    p.pos_table = sinusoidal_position_table(cfg.r + 1, cfg.d);

    Rng rng(seed);
    p.attn.fc1.init_uniform_fanin(rng);
    p.attn.fc2.init_uniform_fanin(rng);
    p.stem.fc1.init_uniform_fanin(rng);
    p.stem.fc2.init_uniform_fanin(rng);
    for (auto& blk : p.blocks) {
      blk.mhsa.q.init_uniform_fanin(rng);
      blk.mhsa.k.init_uniform_fanin(rng);
      blk.mhsa.v.init_uniform_fanin(rng);
      const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
      for (int i = 0; i < cfg.d; ++i)
        for (int j = 0; j < cfg.d; ++j) blk.mhsa.w_out(i, j) = bound * (2.0 * uniform01(rng) - 1.0);
      blk.intra.fc1.init_uniform_fanin(rng);
      blk.intra.fc2.init_uniform_fanin(rng);
    }
    for (int i = 0; i < cfg.d; ++i) p.z_summary[i] = 0.02 * normal01(rng);
    for (int c = 0; c < cfg.n_classes; ++c)
      for (int i = 0; i < cfg.d; ++i) p.prototypes(c, i) = 0.02 * normal01(rng);
    p.head.init_uniform_fanin(rng);
    p.decoder.fc1.init_uniform_fanin(rng);
    p.decoder.fc2.init_uniform_fanin(rng);
    return p;
  }

  // Same shapes, all tensors zero; used for gradient accumulation.
  static ModelParams zeros_like(const ModelParams& other) {
    ModelParams g = other;
    for (auto& t : g.tensors()) t.map().setZero();
    return g;
  }

  std::vector<TensorRef> tensors() {
    std::vector<TensorRef> refs;
    auto add = [&refs](const std::string& name, double* data, int rows, int cols,
                       bool dec = false) {
      refs.push_back(TensorRef{name, data, rows, cols, dec});
    };
    auto add_linear = [&](const std::string& prefix, LinearParams& lp, bool dec = false) {
      add(prefix + ".weight", lp.W.data(), static_cast<int>(lp.W.rows()),
          static_cast<int>(lp.W.cols()), dec);
      add(prefix + ".bias", lp.b.data(), static_cast<int>(lp.b.size()), 1, dec);
    };
    auto add_ln = [&](const std::string& prefix, LayerNormParams& ln) {
      add(prefix + ".gamma", ln.gamma.data(), static_cast<int>(ln.gamma.size()), 1);
      add(prefix + ".beta", ln.beta.data(), static_cast<int>(ln.beta.size()), 1);
    };
    add_linear("attn.fc1", attn.fc1);
    add_linear("attn.fc2", attn.fc2);
    add_ln("stem.ln", stem.ln);
    add_linear("stem.fc1", stem.fc1);
    add_linear("stem.fc2", stem.fc2);
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string bp = "blocks." + std::to_string(l);
      add_ln(bp + ".mhsa.ln", blocks[l].mhsa.ln);
      add_linear(bp + ".mhsa.q", blocks[l].mhsa.q);
      add_linear(bp + ".mhsa.k", blocks[l].mhsa.k);
      add_linear(bp + ".mhsa.v", blocks[l].mhsa.v);
      add(bp + ".mhsa.out.weight", blocks[l].mhsa.w_out.data(),
          static_cast<int>(blocks[l].mhsa.w_out.rows()),
          static_cast<int>(blocks[l].mhsa.w_out.cols()));
      add_ln(bp + ".intra.ln", blocks[l].intra.ln);
      add_linear(bp + ".intra.fc1", blocks[l].intra.fc1);
      add_linear(bp + ".intra.fc2", blocks[l].intra.fc2);
    }
    add("z_summary", z_summary.data(), static_cast<int>(z_summary.size()), 1);
    add("prototypes", prototypes.data(), static_cast<int>(prototypes.rows()),
        static_cast<int>(prototypes.cols()));
    add_linear("head", head);
    add_linear("decoder.fc1", decoder.fc1, /*dec=*/true);
    add_linear("decoder.fc2", decoder.fc2, /*dec=*/true);
    return refs;
  }
};

// ---------------------------------------------------------------------------
// Gumbel-sigmoid and the adaptive attention mask
// ---------------------------------------------------------------------------

// Train mode perturbs logits with the difference of two Gumbel draws before
// the temperature-scaled sigmoid; eval mode is the deterministic sigmoid.
inline Vector gumbel_sigmoid(const Vector& logits, double tau, Mode mode, Rng& rng,
                             Vector* noise_out = nullptr) {
  if (tau <= 0) throw ConfigError("gumbel-sigmoid temperature must be positive");
  Vector out(logits.size());
  Vector noise = Vector::Zero(logits.size());
  if (mode == Mode::train) {
    for (int i = 0; i < logits.size(); ++i) {
      const double g1 = -std::log(-std::log(uniform_open01(rng)));
      const double g2 = -std::log(-std::log(uniform_open01(rng)));
      noise[i] = g1 - g2;
    }
  }
  for (int i = 0; i < logits.size(); ++i) out[i] = sigmoid((logits[i] + noise[i]) / tau);
  if (noise_out) *noise_out = std::move(noise);
  return out;
}

struct AttentionNetCache {
  Vector x_upper;
  Vector h_pre, h;
  Vector logits;
  Vector m_upper;
};

inline Vector attention_mask_upper(const AttentionNetParams& p, const Vector& x_upper, double tau,
                                   Mode mode, Rng& rng, AttentionNetCache* cache) {
  if (x_upper.size() != p.fc1.W.cols()) {
    throw ShapeError("attention input length " + std::to_string(x_upper.size()) +
                     ", expected " + std::to_string(p.fc1.W.cols()));
  }
  Vector h_pre = linear_vec(p.fc1, x_upper);
  Vector h = h_pre.cwiseMax(0.0);
  Vector logits = linear_vec(p.fc2, h);
  Vector m = gumbel_sigmoid(logits, tau, mode, rng);
  if (cache) {
    cache->x_upper = x_upper;
    cache->h_pre = std::move(h_pre);
    cache->h = std::move(h);
    cache->logits = std::move(logits);
    cache->m_upper = m;
  }
  return m;
}

// dL/dm_upper -> attention-net parameter grads (noise is additive, so the
// sigmoid local slope is m(1-m)/tau in both modes).
inline void attention_mask_backward(const AttentionNetParams& p, const AttentionNetCache& cache,
                                    const Vector& dm, double tau, AttentionNetParams* grad) {
  Vector dlogits =
      (dm.array() * cache.m_upper.array() * (1.0 - cache.m_upper.array()) / tau).matrix();
  Vector dh = Vector::Zero(cache.h.size());
  linear_vec_backward(p.fc2, cache.h, dlogits, grad ? &grad->fc2 : nullptr, &dh);
  Vector dh_pre = (dh.array() * (cache.h_pre.array() > 0.0).cast<double>()).matrix();
  linear_vec_backward(p.fc1, cache.x_upper, dh_pre, grad ? &grad->fc1 : nullptr, nullptr);
}

inline Matrix adaptive_attention(const ModelParams& params, const Vector& x_upper, Mode mode,
                                 Rng& rng, AttentionNetCache* cache = nullptr) {
  Vector m = attention_mask_upper(params.attn, x_upper, params.config.tau_gumbel, mode, rng, cache);
  return devectorize_symmetric(m, params.config.r);
}

inline Matrix apply_mask(const Matrix& x, const Matrix& m) {
  if (x.rows() != m.rows() || x.cols() != m.cols()) {
    throw ShapeError("mask shape does not match FC shape");
  }
  return x.cwiseProduct(m);
}

// ---------------------------------------------------------------------------
// Encoder: row-shared MLP (intra) + multi-head self-attention (inter)
// ---------------------------------------------------------------------------

struct IntraCache {
  Matrix in;
  LayerNormCache ln;
  Matrix ln_out;
  Matrix h_pre, h_act;
  Matrix drop;  // empty in eval mode
};

inline Matrix intra_forward(const IntraEncoderParams& p, const Matrix& x, Mode mode,
                            double dropout, Rng& rng, IntraCache* cache) {
  IntraCache local;
  IntraCache& c = cache ? *cache : local;
  c.in = x;
  c.ln_out = layer_norm(p.ln, x, &c.ln);
  c.h_pre = linear_rows(p.fc1, c.ln_out);
  c.h_act = c.h_pre.unaryExpr([](double v) { return gelu(v); });
  Matrix out = linear_rows(p.fc2, c.h_act);
  if (mode == Mode::train && dropout > 0) {
    c.drop = dropout_mask(static_cast<int>(out.rows()), static_cast<int>(out.cols()), dropout, rng);
    out = out.cwiseProduct(c.drop);
  } else {
    c.drop.resize(0, 0);
  }
  return out;
}

inline void intra_backward(const IntraEncoderParams& p, const IntraCache& c, Matrix dout,
                           IntraEncoderParams* grad, Matrix* dx) {
  if (c.drop.size() > 0) dout = dout.cwiseProduct(c.drop);
  Matrix dh_act = Matrix::Zero(c.h_act.rows(), c.h_act.cols());
  linear_rows_backward(p.fc2, c.h_act, dout, grad ? &grad->fc2 : nullptr, &dh_act);
  Matrix dh_pre = dh_act.cwiseProduct(c.h_pre.unaryExpr([](double v) { return gelu_grad(v); }));
  Matrix dln_out = Matrix::Zero(c.ln_out.rows(), c.ln_out.cols());
  linear_rows_backward(p.fc1, c.ln_out, dh_pre, grad ? &grad->fc1 : nullptr, &dln_out);
  layer_norm_backward(p.ln, c.ln, dln_out, grad ? &grad->ln : nullptr, dx);
}

struct SelfAttentionResult {
  Matrix attn;  // row-stochastic n x n
  Matrix out;   // n x d_v
};

// Scaled dot-product attention; scale_dim is the dimension under the sqrt.
inline SelfAttentionResult self_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                          int scale_dim) {
  SelfAttentionResult res;
  res.attn = softmax_rows(q * k.transpose() / std::sqrt(static_cast<double>(scale_dim)));
  res.out = res.attn * v;
  return res;
}

struct MhsaCache {
  Matrix in;
  LayerNormCache ln;
  Matrix ln_out;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // per head
  Matrix concat;
  Matrix drop;
};

inline Matrix mhsa_forward(const MhsaParams& p, const Matrix& z, int n_heads, Mode mode,
                           double dropout, Rng& rng, MhsaCache* cache) {
  const int d = static_cast<int>(p.w_out.rows());
  const int dh = d / n_heads;
  MhsaCache local;
  MhsaCache& c = cache ? *cache : local;
  c.in = z;
  c.ln_out = layer_norm(p.ln, z, &c.ln);
  c.q = linear_rows(p.q, c.ln_out);
  c.k = linear_rows(p.k, c.ln_out);
  c.v = linear_rows(p.v, c.ln_out);
  c.attn.resize(n_heads);
  c.concat.resize(z.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    auto res = self_attention(c.q.middleCols(h * dh, dh), c.k.middleCols(h * dh, dh),
                              c.v.middleCols(h * dh, dh), d);
    c.attn[h] = std::move(res.attn);
    c.concat.middleCols(h * dh, dh) = res.out;
  }
  Matrix out = c.concat * p.w_out.transpose();
  if (mode == Mode::train && dropout > 0) {
    c.drop = dropout_mask(static_cast<int>(out.rows()), static_cast<int>(out.cols()), dropout, rng);
    out = out.cwiseProduct(c.drop);
  } else {
    c.drop.resize(0, 0);
  }
  return out;
}

struct MhsaGrads {
  LayerNormParams* ln = nullptr;
  LinearParams* q = nullptr;
  LinearParams* k = nullptr;
  LinearParams* v = nullptr;
  Matrix* w_out = nullptr;
};

inline void mhsa_backward(const MhsaParams& p, const MhsaCache& c, int n_heads, Matrix dout,
                          const MhsaGrads& grad, Matrix* dz) {
  const int d = static_cast<int>(p.w_out.rows());
  const int dh = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d));
  if (c.drop.size() > 0) dout = dout.cwiseProduct(c.drop);
  if (grad.w_out) *grad.w_out += dout.transpose() * c.concat;
  Matrix dconcat = dout * p.w_out;

  Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
  Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = c.q.middleCols(h * dh, dh);
    const auto kh = c.k.middleCols(h * dh, dh);
    const auto vh = c.v.middleCols(h * dh, dh);
    const Matrix doh = dconcat.middleCols(h * dh, dh);
    const Matrix dah = doh * vh.transpose();
    dv.middleCols(h * dh, dh) += c.attn[h].transpose() * doh;
    const Matrix dsh = softmax_rows_backward(c.attn[h], dah);
    dq.middleCols(h * dh, dh) += dsh * kh * inv_scale;
    dk.middleCols(h * dh, dh) += dsh.transpose() * qh * inv_scale;
  }
  Matrix dln_out = Matrix::Zero(c.ln_out.rows(), c.ln_out.cols());
  linear_rows_backward(p.q, c.ln_out, dq, grad.q, &dln_out);
  linear_rows_backward(p.k, c.ln_out, dk, grad.k, &dln_out);
  linear_rows_backward(p.v, c.ln_out, dv, grad.v, &dln_out);
  layer_norm_backward(p.ln, c.ln, dln_out, grad.ln, dz);
}

struct BlockCache {
  MhsaCache mhsa;
  Matrix z_mid;  // after attention residual
  IntraCache intra;
};

struct EncoderCache {
  bool stem_used = true;
  IntraCache stem;
  Matrix z0;
  std::vector<BlockCache> block;
  Matrix z_final;
};

struct EncoderOutput {
  std::vector<Matrix> z_blocks;  // Z^(l) for l = 0..L
  Vector z_summary_out;
  Vector z_bar;
};

// Rows of x are seed-based networks; a learnable summary token is prepended
// and a fixed positional table added before the transformer blocks.
inline EncoderOutput encoder_forward(const ModelParams& params, const Matrix& x, Mode mode,
                                     Rng& rng, EncoderCache* cache = nullptr,
                                     bool want_traces = false) {
  const auto& cfg = params.config;
  if (x.rows() != cfg.r || x.cols() != cfg.r) {
    throw ShapeError("encoder input must be RxR");
  }
  EncoderCache local;
  EncoderCache& c = cache ? *cache : local;

  Matrix z_rows;
  if (params.ablations.no_intra) {
    if (cfg.d != cfg.r) throw ConfigError("no_intra requires d == r");
    c.stem_used = false;
    z_rows = x;
  } else {
    c.stem_used = true;
    z_rows = intra_forward(params.stem, x, mode, cfg.dropout, rng, &c.stem);
  }

  Matrix z(cfg.r + 1, cfg.d);
  z.row(0) = params.z_summary.transpose();
  z.bottomRows(cfg.r) = z_rows;
  z += params.pos_table;
  c.z0 = z;

  EncoderOutput out;
  if (want_traces) out.z_blocks.push_back(z);
  c.block.resize(params.blocks.size());
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    Matrix attn_out =
        mhsa_forward(params.blocks[l].mhsa, z, cfg.n_heads, mode, cfg.dropout, rng, &c.block[l].mhsa);
    Matrix z_mid = attn_out + z;
    c.block[l].z_mid = z_mid;
    if (params.ablations.no_intra) {
      z = z_mid;
    } else {
      Matrix mlp_out =
          intra_forward(params.blocks[l].intra, z_mid, mode, cfg.dropout, rng, &c.block[l].intra);
      z = mlp_out + z_mid;
    }
    if (want_traces) out.z_blocks.push_back(z);
  }
  c.z_final = z;
  out.z_summary_out = z.row(0).transpose();
  out.z_bar = z.bottomRows(cfg.r).colwise().mean().transpose();
  return out;
}

struct EncoderGrads {
  ModelParams* params = nullptr;  // grad accumulator; nullptr freezes the encoder
};

// Backpropagates d(z_summary_out), d(z_bar) to the encoder input; parameter
// grads accumulate into grads.params when provided.
inline Matrix encoder_backward(const ModelParams& params, const EncoderCache& c,
                               const Vector& dz_summary, const Vector& dz_bar,
                               const EncoderGrads& grads) {
  const auto& cfg = params.config;
  ModelParams* g = grads.params;
  Matrix dz = Matrix::Zero(cfg.r + 1, cfg.d);
  dz.row(0) = dz_summary.transpose();
  dz.bottomRows(cfg.r).rowwise() += (dz_bar / cfg.r).transpose();

  for (int l = static_cast<int>(params.blocks.size()) - 1; l >= 0; --l) {
    if (!params.ablations.no_intra) {
      Matrix dz_mid = dz;  // residual branch
      intra_backward(params.blocks[l].intra, c.block[l].intra, dz,
                     g ? &g->blocks[l].intra : nullptr, &dz_mid);
      dz = std::move(dz_mid);
    }
    Matrix dz_in = dz;  // residual branch
    MhsaGrads mg;
    if (g) {
      mg.ln = &g->blocks[l].mhsa.ln;
      mg.q = &g->blocks[l].mhsa.q;
      mg.k = &g->blocks[l].mhsa.k;
      mg.v = &g->blocks[l].mhsa.v;
      mg.w_out = &g->blocks[l].mhsa.w_out;
    }
    mhsa_backward(params.blocks[l].mhsa, c.block[l].mhsa, cfg.n_heads, dz, mg, &dz_in);
    dz = std::move(dz_in);
  }

  if (g) g->z_summary += dz.row(0).transpose();
  Matrix dx = Matrix::Zero(cfg.r, cfg.r);
  if (c.stem_used) {
    intra_backward(params.stem, c.stem, dz.bottomRows(cfg.r), g ? &g->stem : nullptr, &dx);
  } else {
    dx = dz.bottomRows(cfg.r);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Prototype classifier, decoder, regularizer
// ---------------------------------------------------------------------------

inline Vector cosine_similarities(const Vector& z, const Matrix& prototypes) {
  const double zn = z.norm();
  if (zn < 1e-12) throw DegenerateVector("feature vector has near-zero norm");
  Vector sims(prototypes.rows());
  for (int c = 0; c < prototypes.rows(); ++c) {
    const double pn = prototypes.row(c).norm();
    if (pn < 1e-12) throw DegenerateVector("prototype " + std::to_string(c) + " has near-zero norm");
    sims[c] = prototypes.row(c).dot(z.transpose()) / (zn * pn);
  }
  return sims;
}

struct ClassifierCache {
  Vector z;
  Vector sims;
  Vector probs;
};

inline Vector prototype_classify(const Vector& z, const Matrix& prototypes, double softmax_temp,
                                 ClassifierCache* cache = nullptr) {
  Vector sims = cosine_similarities(z, prototypes);
  Vector probs = softmax_vec(sims / softmax_temp);
  if (cache) {
    cache->z = z;
    cache->sims = sims;
    cache->probs = probs;
  }
  return probs;
}

// d|L is the gradient wrt each cosine similarity; shared by the CE and
// regularizer paths.
inline void cosine_backward(const Vector& z, const Matrix& prototypes, const Vector& sims,
                            const Vector& dsims, Vector* dz, Matrix* dprototypes) {
  const double zn = z.norm();
  for (int c = 0; c < prototypes.rows(); ++c) {
    if (dsims[c] == 0.0) continue;
    const Vector p = prototypes.row(c).transpose();
    const double pn = p.norm();
    if (dz) *dz += dsims[c] * (p / (zn * pn) - sims[c] * z / (zn * zn));
    if (dprototypes) {
      dprototypes->row(c) += (dsims[c] * (z / (zn * pn) - sims[c] * p / (pn * pn))).transpose();
    }
  }
}

// Cross-entropy on the temperature-scaled cosine softmax.
inline void classifier_ce_backward(const ClassifierCache& c, const Matrix& prototypes,
                                   double softmax_temp, int label, double scale, Vector* dz,
                                   Matrix* dprototypes) {
  Vector dsims = c.probs / softmax_temp * scale;
  dsims[label] -= scale / softmax_temp;
  cosine_backward(c.z, prototypes, c.sims, dsims, dz, dprototypes);
}

struct HeadCache {
  Vector z;
  Vector probs;
};

inline Vector head_classify(const LinearParams& head, const Vector& z, HeadCache* cache = nullptr) {
  Vector probs = softmax_vec(linear_vec(head, z));
  if (cache) {
    cache->z = z;
    cache->probs = probs;
  }
  return probs;
}

inline void head_ce_backward(const LinearParams& head, const HeadCache& c, int label, double scale,
                             LinearParams* grad, Vector* dz) {
  Vector dlogits = c.probs * scale;
  dlogits[label] -= scale;
  linear_vec_backward(head, c.z, dlogits, grad, dz);
}

struct DecoderCache {
  Vector feature;
  Vector h_pre, h;
  Vector upper;
};

// Two linear layers with a ReLU between, devectorized to a symmetric
// zero-diagonal matrix.
inline FCMatrix decode(const DecoderParams& p, const Vector& feature, int r,
                       DecoderCache* cache = nullptr) {
  DecoderCache local;
  DecoderCache& c = cache ? *cache : local;
  c.feature = feature;
  c.h_pre = linear_vec(p.fc1, feature);
  c.h = c.h_pre.cwiseMax(0.0);
  c.upper = linear_vec(p.fc2, c.h);
  return FCMatrix(devectorize_symmetric(c.upper, r));
}

inline void decode_backward(const DecoderParams& p, const DecoderCache& c, const Vector& dupper,
                            DecoderParams* grad, Vector* dfeature) {
  Vector dh = Vector::Zero(c.h.size());
  linear_vec_backward(p.fc2, c.h, dupper, grad ? &grad->fc2 : nullptr, &dh);
  Vector dh_pre = (dh.array() * (c.h_pre.array() > 0.0).cast<double>()).matrix();
  linear_vec_backward(p.fc1, c.feature, dh_pre, grad ? &grad->fc1 : nullptr, dfeature);
}

// Gradient of a symmetric matrix function wrt its upper vector: mirrored
// entries both contribute.
inline Vector gather_upper_grad(const Matrix& dmat) {
  const int r = static_cast<int>(dmat.rows());
  Vector dv(upper_edge_count(r));
  int k = 0;
  for (int i = 0; i < r; ++i)
    for (int j = i + 1; j < r; ++j) dv[k++] = dmat(i, j) + dmat(j, i);
  return dv;
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

struct ForwardTrace {
  Matrix mask;     // M
  Matrix x_mask;   // M .* X
  std::vector<Matrix> z_blocks;
  Vector z_summary_out;
  Vector z_bar;
  Vector sims;     // classifier scores before softmax (cosines or head logits)
  Vector probs;
  int predicted = -1;
  FCMatrix x_hat;

  bool correct(int label) const { return predicted == label; }
};

inline ForwardTrace full_forward(const FCMatrix& x, const ModelParams& params, Mode mode,
                                 Rng& rng) {
  const auto& cfg = params.config;
  if (x.r() != cfg.r) throw ShapeError("subject FC has wrong R");
  ForwardTrace t;
  if (params.ablations.no_mask) {
    t.mask = Matrix::Ones(cfg.r, cfg.r);
    t.mask.diagonal().setZero();
    t.x_mask = x.values;
  } else {
    t.mask = adaptive_attention(params, vectorize_upper(x), mode, rng);
    t.x_mask = apply_mask(x.values, t.mask);
  }
  EncoderOutput enc = encoder_forward(params, t.x_mask, mode, rng, nullptr, /*want_traces=*/true);
  t.z_blocks = std::move(enc.z_blocks);
  t.z_summary_out = std::move(enc.z_summary_out);
  t.z_bar = std::move(enc.z_bar);
  if (params.ablations.no_prototype) {
    HeadCache hc;
    t.probs = head_classify(params.head, t.z_summary_out, &hc);
    t.sims = linear_vec(params.head, t.z_summary_out);
  } else {
    ClassifierCache cc;
    t.probs = prototype_classify(t.z_summary_out, params.prototypes, cfg.softmax_temp, &cc);
    t.sims = cc.sims;
  }
  int best = 0;
  for (int c = 1; c < t.sims.size(); ++c)
    if (t.sims[c] > t.sims[best]) best = c;
  t.predicted = best;
  t.x_hat = decode(params.decoder, Vector(t.z_bar + t.z_summary_out), cfg.r);
  return t;
}

}  // namespace ccfcnet
