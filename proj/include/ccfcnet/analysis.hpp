#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/dataset.hpp"
#include "ccfcnet/metrics.hpp"
#include "ccfcnet/model.hpp"
#include "ccfcnet/stats.hpp"

namespace ccfcnet {

enum class ExtremeMode { exclude, keep };

inline int extreme_connection_count(int r) {
  return static_cast<int>(std::llround(0.01 * upper_edge_count(r)));
}

// Classify a simulated FC through the frozen encoder and classifier, without
// re-masking (the same path counter-condition learning uses).
struct UnmaskedClassification {
  Vector sims;
  Vector probs;
  int predicted = -1;
};

inline UnmaskedClassification classify_unmasked(const ModelParams& params, const Matrix& fc) {
  Rng rng(0);
  UnmaskedClassification res;
  EncoderOutput enc = encoder_forward(params, fc, Mode::eval, rng);
  if (params.ablations.no_prototype) {
    res.sims = linear_vec(params.head, enc.z_summary_out);
    res.probs = softmax_vec(res.sims);
  } else {
    ClassifierCache cache;
    res.probs = prototype_classify(enc.z_summary_out, params.prototypes,
                                   params.config.softmax_temp, &cache);
    res.sims = cache.sims;
  }
  Eigen::Index best = 0;
  res.sims.maxCoeff(&best);
  res.predicted = static_cast<int>(best);
  return res;
}

inline Vector norm_matched_prototype(const ModelParams& params, int target_class,
                                     double reference_norm) {
  if (params.ablations.no_prototype) {
    throw ConfigError("checkpoint was trained without a prototype classifier");
  }
  const Vector p = params.prototypes.row(target_class).transpose();
  const double pn = p.norm();
  if (pn < 1e-12) throw DegeneratePrototype("prototype " + std::to_string(target_class));
  return p * (reference_norm / pn);
}

// Prototype-guided FC: decode the subject's averaged features with a
// norm-matched class prototype in place of its own summary feature.
inline FCMatrix generate_pfc(const SubjectRecord& rec, const ModelParams& params,
                             int target_class) {
  Rng rng(0);
  ForwardTrace t = full_forward(rec.fc, params, Mode::eval, rng);
  const Vector proto = norm_matched_prototype(params, target_class, t.z_summary_out.norm());
  return decode(params.decoder, Vector(t.z_bar + proto), params.config.r);
}

// ---------------------------------------------------------------------------
// Counter-condition classification and per-subject reports
// ---------------------------------------------------------------------------

struct CounterConditionReport {
  std::string subject_id;
  int label = 0;
  bool own_correct = false;
  FCMatrix own_recon;
  std::vector<FCMatrix> pfc_per_class;
  Vector cc_probs;  // classification of the opposite-class pFC
  bool cc_correct = false;
  Matrix diff;      // own_recon - opposite pFC, extreme 1% handled per mode
  std::vector<std::pair<int, int>> excluded;
};

inline CounterConditionReport make_counter_report(const SubjectRecord& rec,
                                                  const ModelParams& params,
                                                  ExtremeMode mode = ExtremeMode::exclude) {
  const auto& cfg = params.config;
  Rng rng(0);
  ForwardTrace t = full_forward(rec.fc, params, Mode::eval, rng);

  CounterConditionReport rep;
  rep.subject_id = rec.subject_id;
  rep.label = rec.label;
  rep.own_correct = t.correct(rec.label);
  rep.own_recon = t.x_hat;
  for (int c = 0; c < cfg.n_classes; ++c) {
    const Vector proto = norm_matched_prototype(params, c, t.z_summary_out.norm());
    rep.pfc_per_class.push_back(decode(params.decoder, Vector(t.z_bar + proto), cfg.r));
  }

  const int opposite = 1 - rec.label;
  UnmaskedClassification cc = classify_unmasked(params, rep.pfc_per_class[opposite].values);
  rep.cc_probs = cc.probs;
  rep.cc_correct = cc.predicted == opposite;

  // Per-individual extreme-1% rule on |diff|, ties broken by edge index.
  Matrix diff_raw = rep.own_recon.values - rep.pfc_per_class[opposite].values;
  const Vector dv = vectorize_upper(diff_raw);
  const int n_extreme = extreme_connection_count(cfg.r);
  std::vector<int> idx(dv.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double da = std::abs(dv[a]), db = std::abs(dv[b]);
    return da != db ? da > db : a < b;
  });
  std::set<int> extreme(idx.begin(), idx.begin() + n_extreme);

  Vector kept = dv;
  for (int k = 0; k < dv.size(); ++k) {
    const bool is_extreme = extreme.count(k) > 0;
    if ((mode == ExtremeMode::exclude && is_extreme) ||
        (mode == ExtremeMode::keep && !is_extreme)) {
      kept[k] = 0.0;
    }
  }
  rep.diff = devectorize_symmetric(kept, cfg.r);
  int k = 0;
  for (int i = 0; i < cfg.r; ++i) {
    for (int j = i + 1; j < cfg.r; ++j, ++k) {
      if (extreme.count(k)) rep.excluded.emplace_back(i, j);
    }
  }
  return rep;
}

// Contract form: requires the subject to pass both classifications.
inline CounterConditionReport diff_map(const SubjectRecord& rec, const ModelParams& params,
                                       ExtremeMode mode = ExtremeMode::exclude) {
  CounterConditionReport rep = make_counter_report(rec, params, mode);
  if (!rep.own_correct) {
    throw FilterFail(rec.subject_id + ": misclassified on its own FC");
  }
  if (!rep.cc_correct) {
    throw FilterFail(rec.subject_id + ": counter-condition FC not classified as the opposite class");
  }
  return rep;
}

struct CounterClassification {
  MetricSet metrics;
  int n_considered = 0;
  std::vector<Prediction> predictions;  // labels flipped to the opposite class
};

// Only subjects correctly classified on their own FC are considered; their
// opposite-class pFC should be classified as the opposite class.
inline CounterClassification counter_condition_classify(const Dataset& ds,
                                                        const ModelParams& params) {
  CounterClassification out;
  Rng rng(0);
  for (const auto& rec : ds.records) {
    ForwardTrace t = full_forward(rec.fc, params, Mode::eval, rng);
    if (!t.correct(rec.label)) continue;
    const int opposite = 1 - rec.label;
    const Vector proto = norm_matched_prototype(params, opposite, t.z_summary_out.norm());
    FCMatrix pfc = decode(params.decoder, Vector(t.z_bar + proto), params.config.r);
    UnmaskedClassification cc = classify_unmasked(params, pfc.values);
    out.predictions.push_back(Prediction{rec.subject_id, opposite, cc.probs[1], cc.predicted});
  }
  if (out.predictions.empty()) {
    throw EmptyFilter("no subject was correctly classified; nothing to simulate");
  }
  out.n_considered = static_cast<int>(out.predictions.size());
  out.metrics = compute_metrics(out.predictions);
  return out;
}

// ---------------------------------------------------------------------------
// Mask statistics
// ---------------------------------------------------------------------------

struct MaskStats {
  std::vector<Matrix> mean_mask;          // per class
  std::vector<Matrix> std_mask;           // per class, sample std
  std::vector<Vector> degree_centrality;  // per class, group-mean DC per ROI
  Vector dc_pvalues;                      // Welch test per ROI between the two groups
};

// Eval-mode masks per subject; a connection counts as selected when its mask
// value is >= 0.5.
inline MaskStats mask_statistics(const Dataset& ds, const ModelParams& params) {
  const int r = params.config.r;
  const int n_classes = params.config.n_classes;
  Rng rng(0);

  std::vector<Matrix> sum(n_classes, Matrix::Zero(r, r));
  std::vector<Matrix> sumsq(n_classes, Matrix::Zero(r, r));
  std::vector<int> count(n_classes, 0);
  std::vector<std::vector<std::vector<double>>> dc_per_class(
      n_classes, std::vector<std::vector<double>>(r));

  for (const auto& rec : ds.records) {
    Matrix mask;
    if (params.ablations.no_mask) {
      mask = Matrix::Ones(r, r);
      mask.diagonal().setZero();
    } else {
      mask = adaptive_attention(params, vectorize_upper(rec.fc), Mode::eval, rng);
    }
    sum[rec.label] += mask;
    sumsq[rec.label] += mask.cwiseProduct(mask);
    ++count[rec.label];
    for (int i = 0; i < r; ++i) {
      int selected = 0;
      for (int j = 0; j < r; ++j) {
        if (j != i && mask(i, j) >= 0.5) ++selected;
      }
      dc_per_class[rec.label][i].push_back(static_cast<double>(selected) / (r - 1));
    }
  }

  MaskStats stats;
  stats.dc_pvalues = Vector::Constant(r, std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < n_classes; ++c) {
    const int n = count[c];
    stats.mean_mask.push_back(n > 0 ? Matrix((sum[c] / n).eval()) : Matrix::Zero(r, r));
    Matrix var = Matrix::Zero(r, r);
    if (n > 1) {
      var = (sumsq[c] - sum[c].cwiseProduct(sum[c]) / n) / (n - 1);
      var = var.cwiseMax(0.0);
    }
    stats.std_mask.push_back(var.cwiseSqrt());
    Vector dc = Vector::Zero(r);
    for (int i = 0; i < r; ++i) {
      if (n > 0) dc[i] = sample_mean(dc_per_class[c][i]);
    }
    stats.degree_centrality.push_back(dc);
  }
  for (int i = 0; i < r; ++i) {
    const auto& a = dc_per_class[0][i];
    const auto& b = dc_per_class[1][i];
    if (a.size() < 2 || b.size() < 2) continue;
    try {
      stats.dc_pvalues[i] = welch_t_test(a, b).p;
    } catch (const DegenerateSample&) {
      stats.dc_pvalues[i] = 0.0;  // zero variance, unequal means
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Ward-linkage clustering and subtype analysis
// ---------------------------------------------------------------------------

struct WardMerge {
  int a = 0, b = 0;      // clusters named by their smallest original index
  double delta = 0;      // within-cluster variance increase
};

struct WardResult {
  std::vector<int> assignments;  // 1..k
  std::vector<WardMerge> merges;
};

// Exact minimum-variance agglomeration: each step merges the pair with the
// smallest increase in within-cluster sum of squares. Ties break on the
// lowest (a, b) pair of smallest original member indices.
inline WardResult ward_cluster(const std::vector<Vector>& points, int k) {
  const int n = static_cast<int>(points.size());
  if (k < 1) throw ConfigError("cluster count must be >= 1");
  if (n < k) throw TooFewPatients("need at least " + std::to_string(k) + " points");

  struct Cluster {
    std::vector<int> members;
    Vector mean;
    int min_member;
  };
  std::vector<Cluster> clusters;
  for (int i = 0; i < n; ++i) clusters.push_back(Cluster{{i}, points[i], i});

  WardResult res;
  while (static_cast<int>(clusters.size()) > k) {
    double best_delta = std::numeric_limits<double>::infinity();
    size_t best_a = 0, best_b = 0;
    for (size_t a = 0; a < clusters.size(); ++a) {
      for (size_t b = a + 1; b < clusters.size(); ++b) {
        const double na = clusters[a].members.size(), nb = clusters[b].members.size();
        const double delta =
            na * nb / (na + nb) * (clusters[a].mean - clusters[b].mean).squaredNorm();
        if (delta < best_delta) {
          best_delta = delta;
          best_a = a;
          best_b = b;
        }
      }
    }
    Cluster& ca = clusters[best_a];
    Cluster& cb = clusters[best_b];
    res.merges.push_back(WardMerge{std::min(ca.min_member, cb.min_member),
                                   std::max(ca.min_member, cb.min_member), best_delta});
    const double na = ca.members.size(), nb = cb.members.size();
    ca.mean = (na * ca.mean + nb * cb.mean) / (na + nb);
    ca.members.insert(ca.members.end(), cb.members.begin(), cb.members.end());
    ca.min_member = std::min(ca.min_member, cb.min_member);
    clusters.erase(clusters.begin() + best_b);
  }

  std::sort(clusters.begin(), clusters.end(),
            [](const Cluster& x, const Cluster& y) { return x.min_member < y.min_member; });
  res.assignments.assign(n, 0);
  for (size_t c = 0; c < clusters.size(); ++c) {
    for (int m : clusters[c].members) res.assignments[m] = static_cast<int>(c) + 1;
  }
  return res;
}

inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("label vectors must match");
  auto relabel = [](const std::vector<int>& v) {
    std::vector<int> out(v.size());
    std::vector<int> seen;
    for (size_t i = 0; i < v.size(); ++i) {
      auto it = std::find(seen.begin(), seen.end(), v[i]);
      if (it == seen.end()) {
        seen.push_back(v[i]);
        out[i] = static_cast<int>(seen.size()) - 1;
      } else {
        out[i] = static_cast<int>(it - seen.begin());
      }
    }
    return std::make_pair(out, seen.size());
  };
  auto [la, ka] = relabel(a);
  auto [lb, kb] = relabel(b);
  Eigen::MatrixXi table = Eigen::MatrixXi::Zero(ka, kb);
  for (size_t i = 0; i < la.size(); ++i) ++table(la[i], lb[i]);
  auto comb2 = [](double x) { return x * (x - 1) / 2.0; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (int i = 0; i < table.rows(); ++i) {
    for (int j = 0; j < table.cols(); ++j) sum_ij += comb2(table(i, j));
  }
  for (int i = 0; i < table.rows(); ++i) sum_a += comb2(table.row(i).sum());
  for (int j = 0; j < table.cols(); ++j) sum_b += comb2(table.col(j).sum());
  const double total = comb2(static_cast<double>(la.size()));
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // single cluster on both sides
  return (sum_ij - expected) / (max_index - expected);
}

struct SubtypeResult {
  std::vector<int> assignments;  // parallel to the input reports, 1..k
  int k = 1;
  Vector roi_anova_pvalues;            // Bonferroni-corrected
  Vector roi_anova_pvalues_raw;
  double score_anova_pvalue = std::numeric_limits<double>::quiet_NaN();
};

// Per-patient degree centrality over "changed" connections: edges whose
// |diff| exceeds the subject's own 90th percentile.
inline Vector changed_connection_dc(const Matrix& diff) {
  const int r = static_cast<int>(diff.rows());
  Vector av = vectorize_upper(diff).cwiseAbs();
  std::vector<double> sorted(av.data(), av.data() + av.size());
  std::sort(sorted.begin(), sorted.end());
  const double thr = sorted[static_cast<size_t>(0.9 * (sorted.size() - 1))];
  Vector dc = Vector::Zero(r);
  int k = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = i + 1; j < r; ++j, ++k) {
      if (av[k] > thr) {
        dc[i] += 1.0;
        dc[j] += 1.0;
      }
    }
  }
  return dc / (r - 1);
}

// Mean change into the counter-condition (pFC minus own reconstruction) over
// the given reports; exclusion is already applied per individual.
inline Matrix group_mean_change(const std::vector<CounterConditionReport>& reports) {
  if (reports.empty()) throw EmptyFilter("no reports to average");
  Matrix mean = Matrix::Zero(reports.front().diff.rows(), reports.front().diff.cols());
  for (const auto& rep : reports) mean -= rep.diff;
  return mean / static_cast<double>(reports.size());
}

inline SubtypeResult subtype_cluster(const std::vector<CounterConditionReport>& reports, int k,
                                     const std::vector<std::optional<double>>& scores) {
  if (static_cast<int>(reports.size()) < k) {
    throw TooFewPatients("need at least " + std::to_string(k) + " patients with diff maps");
  }
  std::vector<Vector> points;
  points.reserve(reports.size());
  for (const auto& rep : reports) points.push_back(vectorize_upper(rep.diff));
  WardResult ward = ward_cluster(points, k);

  SubtypeResult res;
  res.assignments = ward.assignments;
  res.k = k;
  const int r = static_cast<int>(reports.front().diff.rows());
  res.roi_anova_pvalues = Vector::Constant(r, std::numeric_limits<double>::quiet_NaN());
  res.roi_anova_pvalues_raw = res.roi_anova_pvalues;
  if (k < 2) return res;  // ANOVA not applicable with a single cluster

  std::vector<Vector> dcs;
  dcs.reserve(reports.size());
  for (const auto& rep : reports) dcs.push_back(changed_connection_dc(rep.diff));
  for (int roi = 0; roi < r; ++roi) {
    std::vector<std::vector<double>> groups;
    for (int c = 1; c <= k; ++c) {
      std::vector<double> g;
      for (size_t i = 0; i < reports.size(); ++i) {
        if (ward.assignments[i] == c) g.push_back(dcs[i][roi]);
      }
      if (g.size() >= 2) groups.push_back(std::move(g));
    }
    if (groups.size() < 2) continue;
    const double p = anova_oneway(groups).p;
    res.roi_anova_pvalues_raw[roi] = p;
    res.roi_anova_pvalues[roi] = std::min(1.0, p * r);
  }

  std::vector<std::vector<double>> score_groups;
  for (int c = 1; c <= k; ++c) {
    std::vector<double> g;
    for (size_t i = 0; i < reports.size(); ++i) {
      if (ward.assignments[i] == c && scores[i].has_value()) g.push_back(*scores[i]);
    }
    if (g.size() >= 2) score_groups.push_back(std::move(g));
  }
  if (score_groups.size() >= 2) res.score_anova_pvalue = anova_oneway(score_groups).p;
  return res;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline void write_counter_metrics_csv(const fs::path& path, const CounterClassification& cc) {
  std::ofstream out(path);
  out << "auc,acc,sen,spc,n_considered\n";
  out << format_double(cc.metrics.auc) << ',' << format_double(cc.metrics.acc) << ','
      << format_double(cc.metrics.sen) << ',' << format_double(cc.metrics.spc) << ','
      << cc.n_considered << '\n';
}

inline void write_diff_edges_csv(const fs::path& path,
                                 const std::vector<CounterConditionReport>& reports) {
  std::ofstream out(path);
  out << "subject,i,j,diff\n";
  for (const auto& rep : reports) {
    const int r = static_cast<int>(rep.diff.rows());
    for (int i = 0; i < r; ++i) {
      for (int j = i + 1; j < r; ++j) {
        if (rep.diff(i, j) != 0.0) {
          out << rep.subject_id << ',' << i << ',' << j << ',' << format_double(rep.diff(i, j))
              << '\n';
        }
      }
    }
  }
}

inline void write_mask_stats_csv(const fs::path& path, const MaskStats& stats,
                                 const std::vector<std::string>& class_names) {
  std::ofstream out(path);
  const int r = static_cast<int>(stats.dc_pvalues.size());
  out << "roi";
  for (const auto& name : class_names) out << ",mask_mean_" << name;
  for (const auto& name : class_names) out << ",dc_" << name;
  out << ",dc_p_value\n";
  for (int i = 0; i < r; ++i) {
    out << i;
    for (size_t c = 0; c < class_names.size(); ++c) {
      // row mean over the other ROIs
      out << ',' << format_double(stats.mean_mask[c].row(i).sum() / (r - 1));
    }
    for (size_t c = 0; c < class_names.size(); ++c) {
      out << ',' << format_double(stats.degree_centrality[c][i]);
    }
    out << ',' << format_double(stats.dc_pvalues[i]) << '\n';
  }
}

inline void write_subtypes_csv(const fs::path& path,
                               const std::vector<CounterConditionReport>& reports,
                               const SubtypeResult& subtypes) {
  std::ofstream out(path);
  out << "subject,cluster\n";
  for (size_t i = 0; i < reports.size(); ++i) {
    out << reports[i].subject_id << ',' << subtypes.assignments[i] << '\n';
  }
}

// Long-format CSVs sufficient to replot mask statistics, group-mean changes
// and subtype profiles externally.
inline void write_plotdata(const fs::path& dir, const MaskStats& mask_stats,
                           const std::vector<std::string>& class_names, const Dataset& ds,
                           const std::vector<CounterConditionReport>& reports) {
  fs::create_directories(dir);
  const int r = ds.r;
  {
    std::ofstream out(dir / "mask_mean.csv");
    out << "class,i,j,mean,std\n";
    for (size_t c = 0; c < class_names.size(); ++c) {
      for (int i = 0; i < r; ++i) {
        for (int j = i + 1; j < r; ++j) {
          out << class_names[c] << ',' << i << ',' << j << ','
              << format_double(mask_stats.mean_mask[c](i, j)) << ','
              << format_double(mask_stats.std_mask[c](i, j)) << '\n';
        }
      }
    }
  }
  {
    // Actual group difference and simulated group-mean changes, long format.
    std::vector<Matrix> class_mean(class_names.size(), Matrix::Zero(r, r));
    std::vector<int> n(class_names.size(), 0);
    for (const auto& rec : ds.records) {
      class_mean[rec.label] += rec.fc.values;
      ++n[rec.label];
    }
    for (size_t c = 0; c < class_names.size(); ++c) {
      if (n[c] > 0) class_mean[c] /= n[c];
    }
    std::ofstream out(dir / "group_change.csv");
    out << "source,i,j,value\n";
    auto emit = [&](const std::string& source, const Matrix& m) {
      for (int i = 0; i < r; ++i)
        for (int j = i + 1; j < r; ++j)
          out << source << ',' << i << ',' << j << ',' << format_double(m(i, j)) << '\n';
    };
    emit("actual_" + class_names[0] + "_minus_" + class_names[1], class_mean[0] - class_mean[1]);
    for (size_t c = 0; c < class_names.size(); ++c) {
      std::vector<CounterConditionReport> group;
      for (const auto& rep : reports) {
        if (rep.label == static_cast<int>(c)) group.push_back(rep);
      }
      if (group.empty()) continue;
      emit("simulated_change_" + class_names[c] + "_to_" + class_names[1 - c],
           group_mean_change(group));
    }
  }
}

inline void write_subtype_plotdata(const fs::path& dir,
                                   const std::vector<CounterConditionReport>& reports,
                                   const SubtypeResult& subtypes,
                                   const std::vector<std::optional<double>>& scores) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "subtype_dc.csv");
    out << "cluster,roi,mean_dc,anova_p_corrected\n";
    const int r = static_cast<int>(subtypes.roi_anova_pvalues.size());
    std::vector<Vector> dcs;
    for (const auto& rep : reports) dcs.push_back(changed_connection_dc(rep.diff));
    for (int c = 1; c <= subtypes.k; ++c) {
      Vector mean = Vector::Zero(r);
      int n = 0;
      for (size_t i = 0; i < reports.size(); ++i) {
        if (subtypes.assignments[i] == c) {
          mean += dcs[i];
          ++n;
        }
      }
      if (n > 0) mean /= n;
      for (int roi = 0; roi < r; ++roi) {
        out << c << ',' << roi << ',' << format_double(mean[roi]) << ','
            << format_double(subtypes.roi_anova_pvalues[roi]) << '\n';
      }
    }
  }
  {
    std::ofstream out(dir / "subtype_scores.csv");
    out << "cluster,subject,score\n";
    for (size_t i = 0; i < reports.size(); ++i) {
      if (scores[i].has_value()) {
        out << subtypes.assignments[i] << ',' << reports[i].subject_id << ','
            << format_double(*scores[i]) << '\n';
      }
    }
  }
}

}  // namespace ccfcnet
