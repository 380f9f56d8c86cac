#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "ccfcnet/common.hpp"

namespace ccfcnet {

struct TTestResult {
  double t = 0;
  double p = 1;
  double df = 0;
};

struct AnovaResult {
  double f = 0;
  double p = 1;
  double df_between = 0;
  double df_within = 0;
};

inline double sample_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / v.size();
}

inline double sample_var(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

// Welch's two-sample t-test with Satterthwaite degrees of freedom, two-sided.
inline TTestResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DegenerateSample("each sample needs n >= 2");
  const double va = sample_var(a), vb = sample_var(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  TTestResult res;
  if (se2 <= 0) {
    // both samples constant: equal means are a non-result, unequal a certainty
    const double diff = sample_mean(a) - sample_mean(b);
    if (diff == 0) {
      res.t = 0;
      res.p = 1;
      return res;
    }
    throw DegenerateSample("zero variance in both samples with unequal means");
  }
  res.t = (sample_mean(a) - sample_mean(b)) / std::sqrt(se2);
  res.df = se2 * se2 / (va * va / (na * na * (na - 1)) + vb * vb / (nb * nb * (nb - 1)));
  boost::math::students_t dist(res.df);
  res.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(res.t)));
  return res;
}

inline AnovaResult anova_oneway(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw DegenerateSample("ANOVA needs at least 2 groups");
  size_t n_total = 0;
  double grand_sum = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw DegenerateSample("each ANOVA group needs n >= 2");
    for (double x : g) grand_sum += x;
    n_total += g.size();
  }
  const double grand_mean = grand_sum / n_total;
  double ss_between = 0, ss_within = 0;
  for (const auto& g : groups) {
    const double gm = sample_mean(g);
    ss_between += g.size() * (gm - grand_mean) * (gm - grand_mean);
    for (double x : g) ss_within += (x - gm) * (x - gm);
  }
  AnovaResult res;
  res.df_between = static_cast<double>(groups.size()) - 1.0;
  res.df_within = static_cast<double>(n_total) - static_cast<double>(groups.size());
  if (ss_within <= 0) {
    if (ss_between <= 0) {
      res.f = 0;
      res.p = 1;
      return res;
    }
    res.f = std::numeric_limits<double>::infinity();
    res.p = 0;
    return res;
  }
  res.f = (ss_between / res.df_between) / (ss_within / res.df_within);
  boost::math::fisher_f dist(res.df_between, res.df_within);
  res.p = boost::math::cdf(boost::math::complement(dist, res.f));
  return res;
}

inline double pearson_correlation(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("correlation needs equal n >= 2");
  const double ma = a.mean(), mb = b.mean();
  const Vector ca = a.array() - ma;
  const Vector cb = b.array() - mb;
  const double denom = ca.norm() * cb.norm();
  if (denom == 0) throw DegenerateSample("constant vector in correlation");
  return ca.dot(cb) / denom;
}

}  // namespace ccfcnet
