#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/dataset.hpp"
#include "ccfcnet/fc_matrix.hpp"

namespace ccfcnet {

using EdgeList = std::vector<std::pair<int, int>>;

struct SyntheticSpec {
  int r = 20;
  int n_per_class = 100;
  EdgeList planted_edges;
  double effect_size = 0.6;
  int n_subtypes = 1;
  double subtype_edge_overlap = 0.5;
  double noise_std = 0.05;
  uint64_t seed = 7;
};

struct SyntheticResult {
  Dataset dataset;
  EdgeList planted_union;
  std::vector<EdgeList> subtype_edges;  // per subtype, shared prefix + own chunk
};

inline EdgeList random_upper_edges(int r, int count, Rng& rng) {
  const int total = upper_edge_count(r);
  if (count > total) throw SpecError("requested more planted edges than upper-triangle pairs");
  std::vector<int> all(total);
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  EdgeList edges;
  edges.reserve(count);
  for (int k = 0; k < count; ++k) {
    int flat = all[k], i = 0;
    while (flat >= r - 1 - i) flat -= r - 1 - i, ++i;
    edges.emplace_back(i, i + 1 + flat);
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

// Controls are drawn around a shared base correlation structure; patients get
// their subtype's planted edge subset shifted by effect_size. Per-subject
// Gaussian jitter is added, the matrix symmetrized, clamped and zero-diagonal.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
  if (spec.r < 3) throw SpecError("need at least 3 ROIs");
  if (spec.n_per_class < 1) throw SpecError("n_per_class must be positive");
  if (spec.n_subtypes < 1) throw SpecError("n_subtypes must be >= 1");
  if (spec.subtype_edge_overlap < 0 || spec.subtype_edge_overlap > 1) {
    throw SpecError("subtype_edge_overlap must lie in [0,1]");
  }
  if (spec.noise_std < 0) throw SpecError("noise_std must be >= 0");
  for (auto [i, j] : spec.planted_edges) {
    if (i < 0 || j <= i || j >= spec.r) {
      throw SpecError("planted edge (" + std::to_string(i) + "," + std::to_string(j) +
                      ") is not an upper-triangle pair for R=" + std::to_string(spec.r));
    }
  }

  Rng rng(spec.seed);
  const int r = spec.r;

  // Shared base structure, kept well inside [-1,1] so shifted edges survive clamping.
  Matrix base = Matrix::Zero(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = i + 1; j < r; ++j) {
      double b = 0.1 + 0.2 * normal01(rng);
      b = std::clamp(b, -0.3, 0.3);
      base(i, j) = b;
      base(j, i) = b;
    }
  }

  // Subtype edge sets: a shared prefix plus one chunk of the remainder each.
  const int n_planted = static_cast<int>(spec.planted_edges.size());
  const int n_shared = static_cast<int>(std::llround(spec.subtype_edge_overlap * n_planted));
  std::vector<EdgeList> subtype_edges(spec.n_subtypes);
  for (int s = 0; s < spec.n_subtypes; ++s) {
    subtype_edges[s].assign(spec.planted_edges.begin(), spec.planted_edges.begin() + n_shared);
  }
  const int n_rest = n_planted - n_shared;
  for (int k = 0; k < n_rest; ++k) {
    const int s = spec.n_subtypes > 1 ? k * spec.n_subtypes / n_rest : 0;
    subtype_edges[std::min(s, spec.n_subtypes - 1)].push_back(spec.planted_edges[n_shared + k]);
  }

  SyntheticResult result;
  result.planted_union = spec.planted_edges;
  std::sort(result.planted_union.begin(), result.planted_union.end());
  result.subtype_edges = subtype_edges;

  Dataset& ds = result.dataset;
  ds.r = r;
  ds.class_names = {"control", "patient"};

  auto make_subject = [&](const std::string& id, int label, const EdgeList& shift_edges) {
    Matrix x = base;
    for (auto [i, j] : shift_edges) {
      x(i, j) += spec.effect_size;
      x(j, i) += spec.effect_size;
    }
    for (int i = 0; i < r; ++i) {
      for (int j = i + 1; j < r; ++j) {
        const double n = spec.noise_std * normal01(rng);
        x(i, j) += n;
        x(j, i) += n;
      }
    }
    SubjectRecord rec;
    rec.subject_id = id;
    rec.label = label;
    rec.fc = FCMatrix::ingest(std::move(x));
    return rec;
  };

  char buf[32];
  for (int i = 0; i < spec.n_per_class; ++i) {
    std::snprintf(buf, sizeof(buf), "ctrl%04d", i);
    ds.records.push_back(make_subject(buf, 0, {}));
  }
  for (int i = 0; i < spec.n_per_class; ++i) {
    const int s = i % spec.n_subtypes;
    std::snprintf(buf, sizeof(buf), "pat%04d", i);
    auto rec = make_subject(buf, 1, subtype_edges[s]);
    if (spec.n_subtypes > 1) rec.subtype = s + 1;
    rec.clinical_score = 10.0 + 5.0 * s + normal01(rng);
    ds.records.push_back(std::move(rec));
  }
  return result;
}

inline void save_synthetic(const SyntheticResult& result, const fs::path& dir) {
  save_dataset(result.dataset, dir);
  std::ofstream out(dir / "planted_edges.csv");
  if (!out) throw ParseError("cannot write planted_edges.csv in " + dir.string());
  for (auto [i, j] : result.planted_union) out << i << ',' << j << '\n';
}

inline EdgeList load_planted_edges(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  EdgeList edges;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2) throw ParseError(path.string() + " line " + std::to_string(line_no));
    edges.emplace_back(static_cast<int>(detail::parse_double(f[0], path.string(), line_no)),
                       static_cast<int>(detail::parse_double(f[1], path.string(), line_no)));
  }
  return edges;
}

}  // namespace ccfcnet
