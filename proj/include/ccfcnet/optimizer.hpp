#pragma once

#include <functional>
#include <vector>

#include "ccfcnet/common.hpp"
#include "ccfcnet/model.hpp"

namespace ccfcnet {

// Adaptive moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // include(ref) selects which tensors this optimizer owns (step 2 trains the
  // decoder only; untouched tensors receive neither update nor decay).
  void step(ModelParams& params, ModelParams& grads,
            const std::function<bool(const TensorRef&)>& include = {}) {
    auto prefs = params.tensors();
    auto grefs = grads.tensors();
    if (m_.empty()) {
      m_.resize(prefs.size());
      v_.resize(prefs.size());
      for (size_t i = 0; i < prefs.size(); ++i) {
        m_[i] = Vector::Zero(prefs[i].size());
        v_[i] = Vector::Zero(prefs[i].size());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < prefs.size(); ++i) {
      if (include && !include(prefs[i])) continue;
      Eigen::Map<Vector> p(prefs[i].data, prefs[i].size());
      Eigen::Map<const Vector> g(grefs[i].data, grefs[i].size());
      Eigen::Map<Vector> m(m_[i].data(), m_[i].size());
      Eigen::Map<Vector> v(v_[i].data(), v_[i].size());
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v.array().matrix() + (1.0 - beta2_) * g.cwiseProduct(g);
      const Vector mhat = m / bc1;
      const Vector vhat = v / bc2;
      p -= lr_ * (mhat.array() / (vhat.array().sqrt() + eps_) + wd_ * p.array()).matrix();
    }
  }

  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Vector> m_, v_;
};

}  // namespace ccfcnet
