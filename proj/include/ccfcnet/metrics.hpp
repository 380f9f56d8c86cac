#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/dataset.hpp"
#include "ccfcnet/model.hpp"

namespace ccfcnet {

struct MetricSet {
  double auc = 0, acc = 0, sen = 0, spc = 0;
};

struct Prediction {
  std::string subject_id;
  int label = 0;
  double prob_patient = 0;
  int predicted = 0;
};

// Rank-statistic AUC of the patient-class score (label 1 positive), with
// tie-averaged ranks. NaN when only one class is present.
inline double compute_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  const size_t n = labels.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double sum_pos = 0;
  size_t n1 = 0;
  for (size_t k = 0; k < n; ++k) {
    if (labels[k] == 1) {
      sum_pos += rank[k];
      ++n1;
    }
  }
  const size_t n0 = n - n1;
  if (n0 == 0 || n1 == 0) return std::numeric_limits<double>::quiet_NaN();
  return (sum_pos - n1 * (n1 + 1) / 2.0) / (static_cast<double>(n0) * n1);
}

inline MetricSet compute_metrics(const std::vector<Prediction>& preds) {
  MetricSet m;
  std::vector<int> labels;
  std::vector<double> scores;
  int tp = 0, tn = 0, fp = 0, fn = 0;
  for (const auto& p : preds) {
    labels.push_back(p.label);
    scores.push_back(p.prob_patient);
    if (p.label == 1) {
      p.predicted == 1 ? ++tp : ++fn;
    } else {
      p.predicted == 0 ? ++tn : ++fp;
    }
  }
  const double n = static_cast<double>(preds.size());
  m.auc = compute_auc(labels, scores);
  m.acc = n > 0 ? (tp + tn) / n : std::numeric_limits<double>::quiet_NaN();
  m.sen = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn)
                        : std::numeric_limits<double>::quiet_NaN();
  m.spc = (tn + fp) > 0 ? static_cast<double>(tn) / (tn + fp)
                        : std::numeric_limits<double>::quiet_NaN();
  return m;
}

struct EvalResult {
  MetricSet metrics;
  std::vector<Prediction> predictions;
};

inline EvalResult evaluate(const Dataset& ds, const ModelParams& params) {
  EvalResult res;
  Rng rng(0);  // eval mode draws nothing
  for (const auto& rec : ds.records) {
    ForwardTrace t = full_forward(rec.fc, params, Mode::eval, rng);
    res.predictions.push_back(
        Prediction{rec.subject_id, rec.label, t.probs[1], t.predicted});
  }
  res.metrics = compute_metrics(res.predictions);
  return res;
}

}  // namespace ccfcnet
