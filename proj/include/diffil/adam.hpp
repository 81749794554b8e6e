#pragma once

#include <cmath>
#include <vector>

#include "diffil/errors.hpp"
#include "diffil/nn.hpp"
#include "diffil/tensor.hpp"

namespace diffil::nn {

// Adam over a fixed, ordered parameter list (one instance per network).
// Moment buffers are part of the serialized run state so training resumes
// exactly.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor<T>*> params, T lr, T beta1 = static_cast<T>(0.9),
       T beta2 = static_cast<T>(0.999), T eps = static_cast<T>(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Tensor<T>* p : params_) {
      m_.emplace_back(p->shape);
      v_.emplace_back(p->shape);
    }
  }

  const std::vector<Tensor<T>*>& params() const { return params_; }
  int64_t steps() const { return t_; }
  T lr() const { return lr_; }

  // Applies one update. Parameters without a gradient this step (grads[i]
  // empty) keep their moments untouched.
  void step(const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params_.size()) throw shape_error("Adam::step: gradient count mismatch");
    ++t_;
    const T bc1 = T{1} - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
    const T bc2 = T{1} - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
    for (size_t i = 0; i < params_.size(); ++i) {
      if (grads[i].size() == 0) continue;
      Tensor<T>& p = *params_[i];
      const Tensor<T>& g = grads[i];
      if (g.shape != p.shape) throw shape_error("Adam::step: gradient shape mismatch");
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (int64_t j = 0; j < p.size(); ++j) {
        m[j] = beta1_ * m[j] + (T{1} - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T{1} - beta2_) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        p[j] -= lr_ * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + eps_);
      }
    }
  }

  // Serialization access.
  std::vector<Tensor<T>>& moment1() { return m_; }
  std::vector<Tensor<T>>& moment2() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
  T lr_{}, beta1_{}, beta2_{}, eps_{};
};

// Polyak averaging: target <- (1 - tau) * target + tau * online.
template <typename T>
void ema_update(const std::vector<Tensor<T>*>& online, const std::vector<Tensor<T>*>& target, T tau) {
  if (tau <= T{0} || tau > T{1}) throw config_error("ema_update: tau must be in (0, 1]");
  if (online.size() != target.size()) throw shape_error("ema_update: parameter list mismatch");
  for (size_t i = 0; i < online.size(); ++i) {
    if (online[i]->shape != target[i]->shape) throw shape_error("ema_update: shape mismatch");
    for (int64_t j = 0; j < online[i]->size(); ++j)
      (*target[i])[j] = (T{1} - tau) * (*target[i])[j] + tau * (*online[i])[j];
  }
}

}  // namespace diffil::nn
