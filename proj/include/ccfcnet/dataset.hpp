#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/fc_matrix.hpp"

namespace ccfcnet {

struct SubjectRecord {
  std::string subject_id;
  int label = 0;  // index into Dataset::class_names
  FCMatrix fc;
  std::optional<std::string> site;
  std::optional<double> clinical_score;
  std::optional<int> subtype;  // synthetic ground truth, when present
};

struct Dataset {
  std::vector<SubjectRecord> records;
  int r = 0;
  std::vector<std::string> class_names;  // index 0 = control, 1 = patient

  size_t size() const { return records.size(); }

  std::vector<int> label_counts() const {
    std::vector<int> counts(class_names.size(), 0);
    for (const auto& rec : records) ++counts[rec.label];
    return counts;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, const std::string& context, int line_no) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw ParseError(context + " line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline Matrix load_fc_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open FC file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) row.push_back(detail::parse_double(f, path.string(), line_no));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(path.string() + ": empty FC file");
  if (rows.size() != rows.front().size()) {
    throw DimensionMismatch(path.string() + ": FC matrix is " + std::to_string(rows.size()) + "x" +
                            std::to_string(rows.front().size()));
  }
  Matrix m(rows.size(), rows.front().size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows.front().size(); ++j) m(i, j) = rows[i][j];
  return m;
}

inline void save_fc_csv(const fs::path& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write FC file " + path.string());
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

// Manifest CSV: subject_id,label,site,clinical_score,fc_path[,subtype].
// Labels are literal class names; "control"/"patient" map to indices 0/1.
inline Dataset load_dataset(const fs::path& manifest_path, int* clamp_count = nullptr) {
  std::ifstream in(manifest_path);
  if (!in) throw ParseError("cannot open manifest " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw ParseError(manifest_path.string() + ": empty manifest");
  auto header = detail::split_csv_line(line);
  if (header.size() < 5 || header[0] != "subject_id" || header[1] != "label" ||
      header[2] != "site" || header[3] != "clinical_score" || header[4] != "fc_path") {
    throw ParseError(manifest_path.string() + " line 1: unexpected header");
  }
  const bool has_subtype = header.size() >= 6 && header[5] == "subtype";

  Dataset ds;
  std::vector<std::string> raw_labels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw ParseError(manifest_path.string() + " line " + std::to_string(line_no) +
                       ": expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(f.size()));
    }
    SubjectRecord rec;
    rec.subject_id = f[0];
    for (const auto& other : ds.records) {
      if (other.subject_id == rec.subject_id) {
        throw ParseError(manifest_path.string() + " line " + std::to_string(line_no) +
                         ": duplicate subject_id " + rec.subject_id);
      }
    }
    if (!f[2].empty()) rec.site = f[2];
    if (!f[3].empty()) {
      rec.clinical_score = detail::parse_double(f[3], manifest_path.string(), line_no);
    }
    fs::path fc_path = f[4];
    if (fc_path.is_relative()) fc_path = base / fc_path;
    Matrix raw = load_fc_csv(fc_path);
    if (ds.r == 0) ds.r = static_cast<int>(raw.rows());
    if (raw.rows() != ds.r) {
      throw DimensionMismatch(manifest_path.string() + " line " + std::to_string(line_no) + ": " +
                              rec.subject_id + " has R=" + std::to_string(raw.rows()) +
                              ", expected " + std::to_string(ds.r));
    }
    rec.fc = FCMatrix::ingest(std::move(raw), /*clamp=*/true, clamp_count);
    if (has_subtype && !f[5].empty()) {
      rec.subtype = static_cast<int>(detail::parse_double(f[5], manifest_path.string(), line_no));
    }
    ds.records.push_back(std::move(rec));
    raw_labels.push_back(f[1]);
  }

  // Resolve class names: control/patient keep their conventional 0/1 order,
  // anything else in first-seen order.
  std::vector<std::string> names;
  for (const auto& s : raw_labels) {
    if (std::find(names.begin(), names.end(), s) == names.end()) names.push_back(s);
  }
  if (names.size() == 2 &&
      std::find(names.begin(), names.end(), "control") != names.end() &&
      std::find(names.begin(), names.end(), "patient") != names.end()) {
    names = {"control", "patient"};
  }
  ds.class_names = names;
  for (size_t i = 0; i < ds.records.size(); ++i) {
    auto it = std::find(names.begin(), names.end(), raw_labels[i]);
    ds.records[i].label = static_cast<int>(it - names.begin());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "fc");
  std::ofstream out(dir / "manifest.csv");
  if (!out) throw ParseError("cannot write manifest in " + dir.string());
  const bool any_subtype =
      std::any_of(ds.records.begin(), ds.records.end(),
                  [](const SubjectRecord& r) { return r.subtype.has_value(); });
  out << "subject_id,label,site,clinical_score,fc_path";
  if (any_subtype) out << ",subtype";
  out << '\n';
  for (const auto& rec : ds.records) {
    const std::string fc_rel = "fc/" + rec.subject_id + ".csv";
    out << rec.subject_id << ',' << ds.class_names[rec.label] << ','
        << (rec.site ? *rec.site : "") << ','
        << (rec.clinical_score ? format_double(*rec.clinical_score) : "") << ',' << fc_rel;
    if (any_subtype) {
      out << ',';
      if (rec.subtype) out << *rec.subtype;
    }
    out << '\n';
    save_fc_csv(dir / fc_rel, rec.fc.values);
  }
}

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct DatasetSplits {
  Dataset train, val, test;
};

// Stratified split, deterministic for a given seed; disjoint and exhaustive.
inline DatasetSplits split(const Dataset& ds, const SplitFractions& fractions, uint64_t seed) {
  if (fractions.train <= 0 || fractions.val <= 0 || fractions.test <= 0 ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be positive and sum to 1");
  }
  DatasetSplits out;
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    part->r = ds.r;
    part->class_names = ds.class_names;
  }
  Rng rng(seed);
  for (size_t cls = 0; cls < ds.class_names.size(); ++cls) {
    std::vector<int> idx;
    for (size_t i = 0; i < ds.records.size(); ++i) {
      if (ds.records[i].label == static_cast<int>(cls)) idx.push_back(static_cast<int>(i));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const int n = static_cast<int>(idx.size());
    const int n_train = static_cast<int>(std::llround(fractions.train * n));
    const int n_val = static_cast<int>(std::llround(fractions.val * n));
    const int n_test = n - n_train - n_val;
    if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
      throw TooSmall("class '" + ds.class_names[cls] + "' has " + std::to_string(n) +
                     " subjects; a split would be empty");
    }
    for (int i = 0; i < n; ++i) {
      Dataset* dst = i < n_train ? &out.train : (i < n_train + n_val ? &out.val : &out.test);
      dst->records.push_back(ds.records[idx[i]]);
    }
  }
  // Stable order within each split for reproducible batch construction.
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    std::sort(part->records.begin(), part->records.end(),
              [](const SubjectRecord& a, const SubjectRecord& b) {
                return a.subject_id < b.subject_id;
              });
  }
  return out;
}

}  // namespace ccfcnet
