#pragma once

#include <cmath>

#include "ccfcnet/common.hpp"

namespace ccfcnet {

constexpr double kLayerNormEps = 1e-5;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

struct LinearParams {
  Matrix W;  // out x in
  Vector b;  // out

  void resize(int out, int in) {
    W = Matrix::Zero(out, in);
    b = Vector::Zero(out);
  }

  void init_uniform_fanin(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(W.cols()));
    for (int i = 0; i < W.rows(); ++i)
      for (int j = 0; j < W.cols(); ++j) W(i, j) = bound * (2.0 * uniform01(rng) - 1.0);
    for (int i = 0; i < b.size(); ++i) b[i] = bound * (2.0 * uniform01(rng) - 1.0);
  }
};

inline Vector linear_vec(const LinearParams& p, const Vector& x) { return p.W * x + p.b; }

// All backward helpers accumulate (+=) into their outputs; pass nullptr to skip.
inline void linear_vec_backward(const LinearParams& p, const Vector& x, const Vector& dy,
                                LinearParams* grad, Vector* dx) {
  if (grad) {
    grad->W += dy * x.transpose();
    grad->b += dy;
  }
  if (dx) *dx += p.W.transpose() * dy;
}

// Rows of X are samples: Y = X W^T + 1 b^T.
inline Matrix linear_rows(const LinearParams& p, const Matrix& x) {
  return (x * p.W.transpose()).rowwise() + p.b.transpose();
}

inline void linear_rows_backward(const LinearParams& p, const Matrix& x, const Matrix& dy,
                                 LinearParams* grad, Matrix* dx) {
  if (grad) {
    grad->W += dy.transpose() * x;
    grad->b += dy.colwise().sum().transpose();
  }
  if (dx) *dx += dy * p.W;
}

struct LayerNormParams {
  Vector gamma, beta;

  void resize(int width) {
    gamma = Vector::Ones(width);
    beta = Vector::Zero(width);
  }
};

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

// Normalizes each row over the feature axis (biased variance).
inline Matrix layer_norm(const LayerNormParams& p, const Matrix& x, LayerNormCache* cache) {
  const int n = static_cast<int>(x.rows());
  const int w = static_cast<int>(x.cols());
  Matrix xhat(n, w);
  Vector inv_std(n);
  for (int i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std[i];
  }
  Matrix y = ((xhat.array().rowwise() * p.gamma.transpose().array()).rowwise() +
              p.beta.transpose().array())
                 .matrix();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

inline void layer_norm_backward(const LayerNormParams& p, const LayerNormCache& cache,
                                const Matrix& dy, LayerNormParams* grad, Matrix* dx) {
  const int n = static_cast<int>(dy.rows());
  const int w = static_cast<int>(dy.cols());
  if (grad) {
    grad->gamma += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
    grad->beta += dy.colwise().sum().transpose();
  }
  if (dx) {
    for (int i = 0; i < n; ++i) {
      Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(p.gamma.transpose());
      const double mean_dxhat = dxhat.mean();
      const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
      dx->row(i) += cache.inv_std[i] *
                    (dxhat.array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat)
                        .matrix();
    }
  }
  (void)w;
}

inline Matrix softmax_rows(const Matrix& s) {
  Matrix a(s.rows(), s.cols());
  for (int i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    a.row(i) = (s.row(i).array() - mx).exp();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

inline Vector softmax_vec(const Vector& s) {
  const double mx = s.maxCoeff();
  Vector a = (s.array() - mx).exp();
  return a / a.sum();
}

// dS = A .* (dA - rowsum(dA .* A))
inline Matrix softmax_rows_backward(const Matrix& a, const Matrix& da) {
  Matrix ds(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    const double dot = da.row(i).dot(a.row(i));
    ds.row(i) = (a.row(i).array() * (da.row(i).array() - dot)).matrix();
  }
  return ds;
}

// Inverted dropout; returns the scale mask used so backward can reuse it.
inline Matrix dropout_mask(int rows, int cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double keep = 1.0 - p;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) mask(i, j) = uniform01(rng) < keep ? 1.0 / keep : 0.0;
  return mask;
}

}  // namespace ccfcnet
