#pragma once

#include <cmath>
#include <vector>

#include "cruseg/tensor.hpp"

namespace cruseg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moment estimates.
template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.learning_rate / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  long t_ = 0;
};

}  // namespace cruseg
