#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "ccfcnet/analysis.hpp"
#include "ccfcnet/stats.hpp"
#include "ccfcnet/synthetic.hpp"
#include "ccfcnet/training.hpp"

using namespace ccfcnet;

namespace {

ModelParams small_model(int r = 8, uint64_t seed = 3, Ablations ab = {}) {
  ModelConfig cfg;
  cfg.r = r;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.hidden_enc = 16;
  return ModelParams::init(cfg, ab, seed);
}

SyntheticResult small_data(int r = 8, int n = 10, uint64_t seed = 5) {
  SyntheticSpec spec;
  spec.r = r;
  spec.n_per_class = n;
  spec.effect_size = 0.5;
  spec.noise_std = 0.05;
  spec.seed = seed;
  Rng rng(seed);
  spec.planted_edges = random_upper_edges(r, r, rng);
  return generate_synthetic(spec);
}

// brute-force Ward oracle: recompute the SSE increase of every candidate merge
// from scratch and replay the greedy sequence
std::vector<WardMerge> brute_force_ward_merges(const std::vector<Vector>& pts, int k) {
  std::vector<std::vector<int>> clusters;
  for (size_t i = 0; i < pts.size(); ++i) clusters.push_back({static_cast<int>(i)});
  auto sse = [&](const std::vector<int>& members) {
    Vector mean = Vector::Zero(pts[0].size());
    for (int m : members) mean += pts[m];
    mean /= static_cast<double>(members.size());
    double s = 0;
    for (int m : members) s += (pts[m] - mean).squaredNorm();
    return s;
  };
  std::vector<WardMerge> merges;
  while (static_cast<int>(clusters.size()) > k) {
    double best = std::numeric_limits<double>::infinity();
    size_t ba = 0, bb = 0;
    for (size_t a = 0; a < clusters.size(); ++a) {
      for (size_t b = a + 1; b < clusters.size(); ++b) {
        std::vector<int> merged = clusters[a];
        merged.insert(merged.end(), clusters[b].begin(), clusters[b].end());
        const double delta = sse(merged) - sse(clusters[a]) - sse(clusters[b]);
        if (delta < best) {
          best = delta;
          ba = a;
          bb = b;
        }
      }
    }
    const int ra = *std::min_element(clusters[ba].begin(), clusters[ba].end());
    const int rb = *std::min_element(clusters[bb].begin(), clusters[bb].end());
    merges.push_back(WardMerge{std::min(ra, rb), std::max(ra, rb), best});
    clusters[ba].insert(clusters[ba].end(), clusters[bb].begin(), clusters[bb].end());
    clusters.erase(clusters.begin() + bb);
  }
  return merges;
}

}  // namespace

TEST_CASE("welch t-test matches the frozen reference computation", "[analysis]") {
  TTestResult same = welch_t_test({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0});
  CHECK(same.t == 0.0);
  CHECK(same.p == Catch::Approx(1.0));

  TTestResult res = welch_t_test({1, 2, 3}, {4, 5, 6});
  CHECK(res.t == Catch::Approx(-3.6742346141747673).epsilon(1e-9));
  CHECK(res.df == Catch::Approx(4.0).epsilon(1e-9));
  CHECK(std::abs(res.p - 0.021311641128756727) < 1e-6);

  CHECK_THROWS_AS(welch_t_test({1.0}, {2.0, 3.0}), DegenerateSample);
  CHECK_THROWS_AS(welch_t_test({1, 1, 1}, {2, 2, 2}), DegenerateSample);
  CHECK(welch_t_test({1, 1, 1}, {1, 1, 1}).p == 1.0);
}

TEST_CASE("two-group ANOVA equals the squared pooled t statistic", "[analysis]") {
  AnovaResult res = anova_oneway({{1, 2, 3}, {4, 5, 6}});
  CHECK(res.f == Catch::Approx(13.5).epsilon(1e-9));
  CHECK(std::abs(res.p - 0.02131164112875672) < 1e-6);

  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> a, b;
    const int na = 3 + static_cast<int>(uniform01(rng) * 8);
    const int nb = 3 + static_cast<int>(uniform01(rng) * 8);
    for (int i = 0; i < na; ++i) a.push_back(normal01(rng));
    for (int i = 0; i < nb; ++i) b.push_back(normal01(rng) + 0.4);
    // pooled-variance two-sample t, the classical identity F = t^2
    const double sp2 = ((na - 1) * sample_var(a) + (nb - 1) * sample_var(b)) / (na + nb - 2);
    const double t = (sample_mean(a) - sample_mean(b)) /
                     std::sqrt(sp2 * (1.0 / na + 1.0 / nb));
    CHECK(std::abs(anova_oneway({a, b}).f - t * t) < 1e-9);
  }
}

TEST_CASE("ward merges match a brute-force minimum-variance oracle", "[analysis]") {
  std::vector<Vector> pts;
  auto add = [&](double x, double y) {
    Vector v(2);
    v << x, y;
    pts.push_back(v);
  };
  add(0.0, 0.0);
  add(0.4, 0.1);
  add(5.0, 5.0);
  add(5.3, 4.9);
  add(0.2, 2.9);
  WardResult res = ward_cluster(pts, 1);
  auto oracle = brute_force_ward_merges(pts, 1);
  REQUIRE(res.merges.size() == oracle.size());
  for (size_t i = 0; i < res.merges.size(); ++i) {
    CHECK(res.merges[i].a == oracle[i].a);
    CHECK(res.merges[i].b == oracle[i].b);
    CHECK(res.merges[i].delta == Catch::Approx(oracle[i].delta).epsilon(1e-9));
  }

  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vector> rp;
    for (int i = 0; i < 8; ++i) {
      Vector v(3);
      for (int j = 0; j < 3; ++j) v[j] = normal01(rng);
      rp.push_back(v);
    }
    auto mine = ward_cluster(rp, 1).merges;
    auto ref = brute_force_ward_merges(rp, 1);
    for (size_t i = 0; i < mine.size(); ++i) {
      CHECK(mine[i].a == ref[i].a);
      CHECK(mine[i].b == ref[i].b);
    }
  }
}

TEST_CASE("ward clustering is deterministic and labels by first appearance", "[analysis]") {
  std::vector<Vector> pts;
  Rng rng(3);
  for (int i = 0; i < 9; ++i) {
    Vector v(2);
    v << normal01(rng) + 4.0 * (i % 3), normal01(rng);
    pts.push_back(v);
  }
  WardResult a = ward_cluster(pts, 3);
  WardResult b = ward_cluster(pts, 3);
  CHECK(a.assignments == b.assignments);
  CHECK(a.assignments[0] == 1);  // the cluster containing point 0 is labelled 1
  CHECK_THROWS_AS(ward_cluster(pts, 10), TooFewPatients);
}

TEST_CASE("adjusted Rand index basics", "[analysis]") {
  std::vector<int> truth{1, 1, 2, 2, 3, 3};
  CHECK(adjusted_rand_index(truth, truth) == Catch::Approx(1.0));
  std::vector<int> relabeled{7, 7, 5, 5, 9, 9};
  CHECK(adjusted_rand_index(truth, relabeled) == Catch::Approx(1.0));
  std::vector<int> off{1, 1, 2, 2, 3, 1};
  CHECK(adjusted_rand_index(truth, off) < 1.0);
  CHECK_THROWS_AS(adjusted_rand_index(truth, {1, 2}), ShapeError);
}

TEST_CASE("prototype-guided FC is symmetric, deterministic and guarded", "[analysis]") {
  ModelParams p = small_model();
  SyntheticResult syn = small_data();
  const SubjectRecord& rec = syn.dataset.records[0];

  FCMatrix a = generate_pfc(rec, p, 0);
  FCMatrix b = generate_pfc(rec, p, 0);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.values.isApprox(a.values.transpose()));
  CHECK(a.values.diagonal().isZero());

  ModelParams degenerate = small_model();
  degenerate.prototypes.setZero();
  CHECK_THROWS_AS(generate_pfc(rec, degenerate, 0), DegenerateVector);

  Ablations ab;
  ab.no_prototype = true;
  ModelParams headed = small_model(8, 3, ab);
  CHECK_THROWS_AS(generate_pfc(rec, headed, 0), ConfigError);
}

TEST_CASE("pFC depends on the target prototype through a fixed z_bar", "[analysis]") {
  ModelParams p = small_model();
  SyntheticResult syn = small_data();
  const SubjectRecord& rec = syn.dataset.records[1];
  FCMatrix own_class = generate_pfc(rec, p, 0);
  FCMatrix other_class = generate_pfc(rec, p, 1);
  CHECK((own_class.values - other_class.values).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("extreme-connection count follows the one-percent rule", "[analysis]") {
  CHECK(extreme_connection_count(200) == 199);
  CHECK(extreme_connection_count(20) == 2);
  CHECK(extreme_connection_count(8) == 0);
}

TEST_CASE("counter reports exclude exactly the extreme connections", "[analysis]") {
  ModelParams p = small_model(20, 7);
  SyntheticResult syn = small_data(20, 6, 9);
  for (int i = 0; i < 5; ++i) {
    CounterConditionReport rep = make_counter_report(syn.dataset.records[i], p);
    CHECK(static_cast<int>(rep.excluded.size()) == extreme_connection_count(20));
    for (auto [a, b] : rep.excluded) {
      CHECK(rep.diff(a, b) == 0.0);
      CHECK(rep.diff(b, a) == 0.0);
    }
    CHECK(rep.diff.isApprox(rep.diff.transpose()));
    // keep-mode inverts the rule: everything except the extremes is zeroed
    CounterConditionReport keep = make_counter_report(syn.dataset.records[i], p,
                                                      ExtremeMode::keep);
    int nonzero = 0;
    for (int a = 0; a < 20; ++a)
      for (int b = a + 1; b < 20; ++b)
        if (keep.diff(a, b) != 0.0) ++nonzero;
    CHECK(nonzero <= extreme_connection_count(20));
  }
}

TEST_CASE("degenerate decoder yields a zero diff map", "[analysis]") {
  ModelParams p = small_model(20, 7);
  p.decoder.fc1.W.setZero();
  p.decoder.fc1.b.setZero();
  p.decoder.fc2.W.setZero();
  p.decoder.fc2.b.setZero();
  SyntheticResult syn = small_data(20, 4, 11);
  CounterConditionReport rep = make_counter_report(syn.dataset.records[0], p);
  CHECK(rep.diff.isZero());
}

TEST_CASE("diff_map enforces the double filter", "[analysis]") {
  ModelParams p = small_model(8, 13);
  SyntheticResult syn = small_data(8, 8, 13);
  bool found_fail = false;
  for (const auto& rec : syn.dataset.records) {
    CounterConditionReport rep = make_counter_report(rec, p);
    if (!rep.own_correct || !rep.cc_correct) {
      CHECK_THROWS_AS(diff_map(rec, p), FilterFail);
      found_fail = true;
      break;
    }
  }
  // an untrained model misclassifies someone
  CHECK(found_fail);
}

TEST_CASE("counter-condition filter equals the conventional correct set", "[analysis]") {
  ModelParams p = small_model(8, 17);
  SyntheticResult syn = small_data(8, 10, 17);
  EvalResult ev = evaluate(syn.dataset, p);
  std::set<std::string> correct;
  for (const auto& pred : ev.predictions) {
    if (pred.predicted == pred.label) correct.insert(pred.subject_id);
  }
  if (correct.empty()) {
    CHECK_THROWS_AS(counter_condition_classify(syn.dataset, p), EmptyFilter);
  } else {
    CounterClassification cc = counter_condition_classify(syn.dataset, p);
    std::set<std::string> considered;
    for (const auto& pred : cc.predictions) considered.insert(pred.subject_id);
    CHECK(considered == correct);
  }
}

TEST_CASE("mask statistics on the all-ones ablation", "[analysis]") {
  Ablations ab;
  ab.no_mask = true;
  ModelParams p = small_model(8, 19, ab);
  SyntheticResult syn = small_data(8, 6, 19);
  MaskStats stats = mask_statistics(syn.dataset, p);
  for (int c = 0; c < 2; ++c) {
    CHECK(stats.std_mask[c].cwiseAbs().maxCoeff() == 0.0);
    for (int i = 0; i < 8; ++i) CHECK(stats.degree_centrality[c][i] == Catch::Approx(1.0));
  }
  // all DC identical across groups: equal means with zero variance
  for (int i = 0; i < 8; ++i) CHECK(stats.dc_pvalues[i] == 1.0);
}

TEST_CASE("mask statistics show no systematic effect on label-free data", "[analysis]") {
  ModelParams p = small_model(10, 23);
  // both "classes" drawn from the same distribution: no planted effect
  SyntheticSpec spec;
  spec.r = 10;
  spec.n_per_class = 30;
  spec.effect_size = 0.0;
  spec.noise_std = 0.1;
  spec.seed = 23;
  Rng rng(23);
  spec.planted_edges = random_upper_edges(10, 5, rng);
  Dataset ds = generate_synthetic(spec).dataset;
  MaskStats stats = mask_statistics(ds, p);
  int significant = 0;
  for (int i = 0; i < 10; ++i) {
    if (stats.dc_pvalues[i] < 0.05) ++significant;
  }
  CHECK(significant <= 2);  // null calibration, no systematic significance
}

TEST_CASE("subtype clustering recovers well-separated planted groups", "[analysis]") {
  // synthesize reports directly: three diff-map blobs plus noise
  Rng rng(29);
  const int r = 10;
  std::vector<CounterConditionReport> reports;
  std::vector<std::optional<double>> scores;
  std::vector<int> truth;
  std::vector<Matrix> centers;
  for (int c = 0; c < 3; ++c) {
    Matrix m = Matrix::Zero(r, r);
    for (int e = 0; e < 6; ++e) {
      int i = (c * 3 + e) % (r - 1);
      int j = i + 1 + (e % (r - i - 1));
      m(i, j) = 1.0;
      m(j, i) = 1.0;
    }
    centers.push_back(m);
  }
  for (int s = 0; s < 45; ++s) {
    const int c = s % 3;
    Matrix noise = Matrix::Zero(r, r);
    for (int i = 0; i < r; ++i)
      for (int j = i + 1; j < r; ++j) {
        double v = 0.05 * normal01(rng);
        noise(i, j) = v;
        noise(j, i) = v;
      }
    CounterConditionReport rep;
    rep.subject_id = "s" + std::to_string(s);
    rep.diff = centers[c] + noise;
    reports.push_back(rep);
    truth.push_back(c + 1);
    scores.push_back(10.0 + 3.0 * c + 0.3 * normal01(rng));
  }
  SubtypeResult res = subtype_cluster(reports, 3, scores);
  CHECK(adjusted_rand_index(res.assignments, truth) >= 0.9);
  CHECK(res.score_anova_pvalue < 0.05);
  int flagged = 0;
  for (int i = 0; i < r; ++i) {
    if (res.roi_anova_pvalues[i] < 0.05) ++flagged;
  }
  CHECK(flagged > 0);

  // k = 1 is reported as not applicable
  SubtypeResult one = subtype_cluster(reports, 1, scores);
  CHECK(std::isnan(one.score_anova_pvalue));
  for (int i = 0; i < r; ++i) CHECK(std::isnan(one.roi_anova_pvalues[i]));

  CHECK_THROWS_AS(subtype_cluster({reports[0], reports[1]}, 3, scores), TooFewPatients);
}

TEST_CASE("group mean change averages the negated diff maps", "[analysis]") {
  CounterConditionReport a, b;
  a.diff = Matrix::Constant(3, 3, 1.0);
  b.diff = Matrix::Constant(3, 3, 3.0);
  Matrix mean = group_mean_change({a, b});
  CHECK(mean(0, 1) == Catch::Approx(-2.0));
  CHECK_THROWS_AS(group_mean_change({}), EmptyFilter);
}
