#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/dataset.hpp"
#include "ccfcnet/metrics.hpp"
#include "ccfcnet/model.hpp"
#include "ccfcnet/optimizer.hpp"

namespace ccfcnet {

struct TrainConfig {
  double lr_step1 = 5e-4;
  double lr_step2 = 1e-4;
  int batch_size = 32;
  double weight_decay = 1e-4;
  double lambda_recon = 1.0;
  double lambda_class = 0.1;
  int epochs = 60;
  uint64_t seed = 7;
  Ablations ablations;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean absolute error over the upper triangle; the target is the masked FC.
inline double loss_recon(const FCMatrix& x_hat, const FCMatrix& x_mask) {
  if (x_hat.r() != x_mask.r()) throw ShapeError("reconstruction shapes differ");
  return (vectorize_upper(x_hat) - vectorize_upper(x_mask)).cwiseAbs().mean();
}

inline double loss_class(const Vector& probs, int label) {
  if (label < 0 || label >= probs.size()) throw DomainError("label out of range");
  if (probs[label] <= 0) throw DomainError("probability of true class is not positive");
  return -std::log(probs[label]);
}

// Sum of absolute cosine similarities between the averaged feature and every
// prototype; drives the individual-level feature away from class directions.
inline double loss_reg(const Vector& z_bar, const Matrix& prototypes) {
  return cosine_similarities(z_bar, prototypes).cwiseAbs().sum();
}

struct StepLosses {
  double recon = 0;
  double classification = 0;
  double reg = 0;
  double total = 0;
};

struct LossWeights {
  double recon = 1.0;
  double classification = 1.0;
  double reg = 1.0;
};

// Forward + backward for one sample of the joint objective. grad_scale is the
// factor applied to parameter gradients (1/batch for mean-reduced batches).
// Pass grads = nullptr for loss evaluation only.
//
// The reconstruction target is the masked FC treated as a fixed target: no
// gradient flows through the target side (otherwise shrinking the mask toward
// zero trivially shrinks the loss). recon_target_override substitutes a
// caller-supplied target, which keeps the loss a well-defined function of the
// parameters for finite-difference checks.
inline StepLosses step1_sample(const FCMatrix& x, int label, const ModelParams& params, Mode mode,
                               Rng& rng, ModelParams* grads, double grad_scale,
                               const LossWeights& w, const Vector* recon_target_override = nullptr) {
  const auto& cfg = params.config;
  const auto& ab = params.ablations;
  const int ne = cfg.n_edges();

  AttentionNetCache attn_cache;
  Matrix x_mask;
  if (ab.no_mask) {
    x_mask = x.values;
  } else {
    Vector m_upper = attention_mask_upper(params.attn, vectorize_upper(x), cfg.tau_gumbel, mode,
                                          rng, &attn_cache);
    x_mask = apply_mask(x.values, devectorize_symmetric(m_upper, cfg.r));
  }
  const Vector recon_target =
      recon_target_override ? *recon_target_override : vectorize_upper(x_mask);

  EncoderCache enc_cache;
  EncoderOutput enc = encoder_forward(params, x_mask, mode, rng, &enc_cache);

  ClassifierCache cls_cache;
  HeadCache head_cache;
  double l_class;
  if (ab.no_prototype) {
    l_class = loss_class(head_classify(params.head, enc.z_summary_out, &head_cache), label);
  } else {
    l_class = loss_class(
        prototype_classify(enc.z_summary_out, params.prototypes, cfg.softmax_temp, &cls_cache),
        label);
  }

  DecoderCache dec_cache;
  const Vector feature = enc.z_bar + enc.z_summary_out;
  decode(params.decoder, feature, cfg.r, &dec_cache);
  const Vector recon_err = dec_cache.upper - recon_target;
  const double l_recon = recon_err.cwiseAbs().mean();

  const bool reg_active = !ab.no_reg && !ab.no_prototype;
  ClassifierCache reg_cache;
  double l_reg = 0;
  if (reg_active) {
    reg_cache.z = enc.z_bar;
    reg_cache.sims = cosine_similarities(enc.z_bar, params.prototypes);
    l_reg = reg_cache.sims.cwiseAbs().sum();
  }

  StepLosses out;
  out.recon = l_recon;
  out.classification = l_class;
  out.reg = l_reg;
  out.total = w.recon * l_recon + w.classification * l_class + (reg_active ? w.reg * l_reg : 0.0);

  if (!grads) return out;

  // Reconstruction: d|v - t| flows to the decoder and, through the target,
  // back into the mask.
  const Vector sign_err = recon_err.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  const Vector dv = grad_scale * w.recon / ne * sign_err;
  Vector dfeature = Vector::Zero(cfg.d);
  decode_backward(params.decoder, dec_cache, dv, &grads->decoder, &dfeature);

  Vector dz_summary = dfeature;
  Vector dz_bar = dfeature;
  if (ab.no_prototype) {
    head_ce_backward(params.head, head_cache, label, grad_scale * w.classification, &grads->head,
                     &dz_summary);
  } else {
    classifier_ce_backward(cls_cache, params.prototypes, cfg.softmax_temp, label,
                           grad_scale * w.classification, &dz_summary, &grads->prototypes);
  }
  if (reg_active && w.reg != 0.0) {
    Vector dsims = reg_cache.sims.unaryExpr(
        [s = grad_scale * w.reg](double v) { return v > 0 ? s : (v < 0 ? -s : 0.0); });
    cosine_backward(enc.z_bar, params.prototypes, reg_cache.sims, dsims, &dz_bar,
                    &grads->prototypes);
  }

  EncoderGrads eg{grads};
  Matrix dx_mask = encoder_backward(params, enc_cache, dz_summary, dz_bar, eg);

  if (!ab.no_mask) {
    const Matrix dmask = dx_mask.cwiseProduct(x.values);
    attention_mask_backward(params.attn, attn_cache, gather_upper_grad(dmask), cfg.tau_gumbel,
                            &grads->attn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step 2: counter-condition learning (decoder only)
// ---------------------------------------------------------------------------

struct ShuffleResult {
  std::vector<int> donor;  // index into the batch, -1 when no opposite class
  int n_valid = 0;
};

// Each sample receives the summary feature of a uniformly chosen sample of
// the opposite class within the batch.
inline ShuffleResult shuffle_opposite(const std::vector<int>& labels, Rng& rng) {
  ShuffleResult res;
  res.donor.assign(labels.size(), -1);
  for (size_t i = 0; i < labels.size(); ++i) {
    std::vector<int> candidates;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != labels[i]) candidates.push_back(static_cast<int>(j));
    }
    if (candidates.empty()) continue;
    std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);
    res.donor[i] = candidates[pick(rng)];
    ++res.n_valid;
  }
  return res;
}

struct BatchItem {
  const FCMatrix* fc = nullptr;
  int label = 0;
};

// All networks frozen except the decoder: the simulated counter-condition FC
// is re-encoded (no re-masking) and classified against the donor's label.
inline StepLosses step2_batch(const std::vector<BatchItem>& batch, const ModelParams& params,
                              ModelParams* grads, double lambda_recon, double lambda_class,
                              Rng& rng) {
  const auto& cfg = params.config;
  const int ne = cfg.n_edges();

  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const auto& item : batch) labels.push_back(item.label);
  ShuffleResult shuffle = shuffle_opposite(labels, rng);
  if (shuffle.n_valid == 0) throw NoValidPairs("no opposite-class pair in batch");

  // Frozen eval-mode forwards for every sample.
  std::vector<Vector> z_bars(batch.size()), z_summaries(batch.size()), targets(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    Matrix x_mask;
    if (params.ablations.no_mask) {
      x_mask = batch[i].fc->values;
    } else {
      Vector m_upper = attention_mask_upper(params.attn, vectorize_upper(*batch[i].fc),
                                            cfg.tau_gumbel, Mode::eval, rng, nullptr);
      x_mask = apply_mask(batch[i].fc->values, devectorize_symmetric(m_upper, cfg.r));
    }
    EncoderOutput enc = encoder_forward(params, x_mask, Mode::eval, rng);
    z_bars[i] = std::move(enc.z_bar);
    z_summaries[i] = std::move(enc.z_summary_out);
    targets[i] = vectorize_upper(x_mask);
  }

  StepLosses out;
  const double inv_valid = 1.0 / shuffle.n_valid;
  for (size_t i = 0; i < batch.size(); ++i) {
    if (shuffle.donor[i] < 0) continue;
    const int donor = shuffle.donor[i];

    // Own reconstruction keeps the decoder anchored to real inputs.
    DecoderCache own_cache;
    decode(params.decoder, Vector(z_bars[i] + z_summaries[i]), cfg.r, &own_cache);
    const Vector err = own_cache.upper - targets[i];
    out.recon += err.cwiseAbs().mean() * inv_valid;
    if (grads) {
      const Vector dv = (lambda_recon * inv_valid / ne) *
                        err.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
      decode_backward(params.decoder, own_cache, dv, &grads->decoder, nullptr);
    }

    // Counter-condition: decode with the donor's summary, re-encode, classify
    // as the donor's class.
    DecoderCache cc_cache;
    FCMatrix x_shuffle =
        decode(params.decoder, Vector(z_bars[i] + z_summaries[donor]), cfg.r, &cc_cache);
    EncoderCache enc_cache;
    EncoderOutput enc = encoder_forward(params, x_shuffle.values, Mode::eval, rng, &enc_cache);
    double ce;
    ClassifierCache cls_cache;
    HeadCache head_cache;
    if (params.ablations.no_prototype) {
      ce = loss_class(head_classify(params.head, enc.z_summary_out, &head_cache),
                      batch[donor].label);
    } else {
      ce = loss_class(
          prototype_classify(enc.z_summary_out, params.prototypes, cfg.softmax_temp, &cls_cache),
          batch[donor].label);
    }
    out.classification += ce * inv_valid;
    if (grads) {
      Vector dz_summary = Vector::Zero(cfg.d);
      if (params.ablations.no_prototype) {
        head_ce_backward(params.head, head_cache, batch[donor].label, lambda_class * inv_valid,
                         nullptr, &dz_summary);
      } else {
        classifier_ce_backward(cls_cache, params.prototypes, cfg.softmax_temp,
                               batch[donor].label, lambda_class * inv_valid, &dz_summary, nullptr);
      }
      EncoderGrads frozen{nullptr};
      Matrix dx = encoder_backward(params, enc_cache, dz_summary, Vector::Zero(cfg.d), frozen);
      decode_backward(params.decoder, cc_cache, gather_upper_grad(dx), &grads->decoder, nullptr);
    }
  }
  out.total = lambda_recon * out.recon + lambda_class * out.classification;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  int step = 1;
  double loss_recon = 0, loss_class = 0, loss_reg = 0, loss_total = 0;
  MetricSet val;
};

struct TrainResult {
  ModelParams best_params;   // best validation AUC over step-1 epochs, later ties win
  ModelParams final_params;  // state after the last epoch
  std::vector<EpochLog> logs;
  int best_epoch = -1;
  double best_val_auc = 0;
};

inline void save_epoch_logs(const fs::path& path, const std::vector<EpochLog>& logs) {
  std::ofstream out(path);
  out << "epoch,step,loss_recon,loss_class,loss_reg,loss_total,val_auc,val_acc,val_sen,val_spc\n";
  for (const auto& l : logs) {
    out << l.epoch << ',' << l.step << ',' << format_double(l.loss_recon) << ','
        << format_double(l.loss_class) << ',' << format_double(l.loss_reg) << ','
        << format_double(l.loss_total) << ',' << format_double(l.val.auc) << ','
        << format_double(l.val.acc) << ',' << format_double(l.val.sen) << ','
        << format_double(l.val.spc) << '\n';
  }
}

// Odd epochs run Step 1 (everything), even epochs Step 2 (decoder only, with
// shuffled summaries). The best checkpoint is picked by validation AUC over
// Step-1 epochs, later epochs winning ties.
inline TrainResult train(const Dataset& train_ds, const Dataset& val_ds, ModelConfig model_cfg,
                         const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (train_ds.records.empty() || val_ds.records.empty()) {
    throw TooSmall("train and validation splits must be nonempty");
  }
  model_cfg.r = train_ds.r;
  ModelParams params = ModelParams::init(model_cfg, cfg.ablations, cfg.seed);
  ModelParams grads = ModelParams::zeros_like(params);
  AdamW opt1(cfg.lr_step1, cfg.weight_decay);
  AdamW opt2(cfg.lr_step2, cfg.weight_decay);
  const auto decoder_only = [](const TensorRef& t) { return t.decoder; };

  Rng rng(cfg.seed + 1);
  std::vector<size_t> order(train_ds.records.size());
  std::iota(order.begin(), order.end(), size_t{0});

  TrainResult result;
  result.best_val_auc = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const int step = (cfg.ablations.no_step2 || epoch % 2 == 1) ? 1 : 2;
    std::shuffle(order.begin(), order.end(), rng);

    double sum_recon = 0, sum_class = 0, sum_reg = 0, sum_total = 0;
    int n_counted = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const int bsz = static_cast<int>(end - start);
      for (auto& t : grads.tensors()) t.map().setZero();

      if (step == 1) {
        LossWeights w;
        if (cfg.ablations.no_reg || cfg.ablations.no_prototype) w.reg = 0.0;
        for (size_t k = start; k < end; ++k) {
          const auto& rec = train_ds.records[order[k]];
          StepLosses l = step1_sample(rec.fc, rec.label, params, Mode::train, rng, &grads,
                                      1.0 / bsz, w);
          sum_recon += l.recon;
          sum_class += l.classification;
          sum_reg += l.reg;
          sum_total += l.total;
          ++n_counted;
        }
        opt1.step(params, grads);
      } else {
        std::vector<BatchItem> batch;
        batch.reserve(bsz);
        for (size_t k = start; k < end; ++k) {
          batch.push_back(BatchItem{&train_ds.records[order[k]].fc,
                                    train_ds.records[order[k]].label});
        }
        try {
          StepLosses l =
              step2_batch(batch, params, &grads, cfg.lambda_recon, cfg.lambda_class, rng);
          sum_recon += l.recon * bsz;
          sum_class += l.classification * bsz;
          sum_total += l.total * bsz;
          n_counted += bsz;
          opt2.step(params, grads, decoder_only);
        } catch (const NoValidPairs&) {
          // single-class batch; skip
        }
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.step = step;
    if (n_counted > 0) {
      log.loss_recon = sum_recon / n_counted;
      log.loss_class = sum_class / n_counted;
      log.loss_reg = sum_reg / n_counted;
      log.loss_total = sum_total / n_counted;
    }
    log.val = evaluate(val_ds, params).metrics;
    result.logs.push_back(log);

    if (step == 1 && log.val.auc >= result.best_val_auc) {
      result.best_val_auc = log.val.auc;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  result.final_params = params;
  return result;
}

}  // namespace ccfcnet
