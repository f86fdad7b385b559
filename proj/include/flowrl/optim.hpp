// Copyright 2026 The flowrl-lab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FLOWRL_OPTIM_HPP_
#define FLOWRL_OPTIM_HPP_

#include <cmath>
#include <span>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/grad.hpp"

namespace flowrl {

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

// Plain SGD or Adam over a fixed list of parameter arrays. Moments are
// allocated on the first step and keyed by position in the list.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<grad::Parameter* const> params) {
    if (kind_ == OptimizerKind::sgd) {
      for (auto* p : params) {
        for (std::size_t i = 0; i < p->size(); ++i) p->value[i] -= lr_ * p->grad[i];
      }
      return;
    }
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("optimizer parameter list changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }
  long steps() const { return t_; }

 private:
  OptimizerKind kind_ = OptimizerKind::adam;
  double lr_ = 1e-2;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace flowrl

#endif  // FLOWRL_OPTIM_HPP_
