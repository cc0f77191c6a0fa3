// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dermaudit/nn/layers.hpp"
#include "dermaudit/tensor.hpp"

namespace dermaudit::nn {

// Adam with bias correction. No weight decay, no schedule.
template <typename T>
class Adam {
 public:
  explicit Adam(ParamRegistry<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.value->shape());
      v_.emplace_back(e.value->shape());
    }
  }

  void zero_grad() { params_->zero_grad(); }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& entries = params_->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor<T>& w = *entries[p].value;
      const Tensor<T>& g = *entries[p].grad;
      Tensor<T>& m = m_[p];
      Tensor<T>& v = v_[p];
      for (std::int64_t i = 0; i < w.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  ParamRegistry<T>* params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace dermaudit::nn
