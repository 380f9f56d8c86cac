#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "ccfcnet/common.hpp"

namespace ccfcnet {

constexpr double kSymmetryTol = 1e-9;

inline int upper_edge_count(int r) { return r * (r - 1) / 2; }

// Row-major index of pair (i, j), i < j, in the upper-triangle vector.
inline int upper_index(int i, int j, int r) {
  return i * r - i * (i + 1) / 2 + (j - i - 1);
}

// Symmetric R x R correlation matrix with zero diagonal.
struct FCMatrix {
  Matrix values;

  FCMatrix() = default;
  explicit FCMatrix(Matrix m) : values(std::move(m)) {}

  int r() const { return static_cast<int>(values.rows()); }

  // Validates square/symmetric/zero-diagonal; clamps |v| > 1 when requested
  // (ingested files may carry simulated FCs outside [-1, 1]).
  static FCMatrix ingest(Matrix m, bool clamp = true, int* clamp_count = nullptr) {
    if (m.rows() != m.cols()) {
      throw ShapeError("FC matrix must be square, got " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()));
    }
    const int r = static_cast<int>(m.rows());
    for (int i = 0; i < r; ++i) {
      for (int j = i + 1; j < r; ++j) {
        if (std::abs(m(i, j) - m(j, i)) > kSymmetryTol) {
          throw ShapeError("FC matrix asymmetric at (" + std::to_string(i) + "," +
                           std::to_string(j) + ")");
        }
        double v = 0.5 * (m(i, j) + m(j, i));
        if (clamp && std::abs(v) > 1.0) {
          v = v > 0 ? 1.0 : -1.0;
          if (clamp_count) ++*clamp_count;
        }
        m(i, j) = v;
        m(j, i) = v;
      }
      m(i, i) = 0.0;
    }
    return FCMatrix(std::move(m));
  }
};

inline Vector vectorize_upper(const Matrix& m) {
  const int r = static_cast<int>(m.rows());
  Vector v(upper_edge_count(r));
  int k = 0;
  for (int i = 0; i < r; ++i)
    for (int j = i + 1; j < r; ++j) v[k++] = m(i, j);
  return v;
}

inline Vector vectorize_upper(const FCMatrix& fc) { return vectorize_upper(fc.values); }

inline Matrix devectorize_symmetric(const Vector& v, int r) {
  if (v.size() != upper_edge_count(r)) {
    throw ShapeError("upper vector length " + std::to_string(v.size()) + " does not match R=" +
                     std::to_string(r));
  }
  Matrix m = Matrix::Zero(r, r);
  int k = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = i + 1; j < r; ++j) {
      m(i, j) = v[k];
      m(j, i) = v[k];
      ++k;
    }
  }
  return m;
}

// Pairwise Pearson correlation of the T x R time-series columns, diagonal zeroed.
inline FCMatrix pearson_fc(const Matrix& timeseries) {
  const int t = static_cast<int>(timeseries.rows());
  const int r = static_cast<int>(timeseries.cols());
  if (t < 3) throw ShapeError("need at least 3 time points, got " + std::to_string(t));

  Matrix centered = timeseries.rowwise() - timeseries.colwise().mean();
  Vector norms(r);
  for (int j = 0; j < r; ++j) {
    norms[j] = centered.col(j).norm();
    if (norms[j] == 0.0) throw ConstantSeries("ROI column " + std::to_string(j) + " is constant");
  }
  Matrix fc = Matrix::Zero(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = i + 1; j < r; ++j) {
      double c = centered.col(i).dot(centered.col(j)) / (norms[i] * norms[j]);
      c = std::min(1.0, std::max(-1.0, c));
      fc(i, j) = c;
      fc(j, i) = c;
    }
  }
  return FCMatrix(std::move(fc));
}

}  // namespace ccfcnet
