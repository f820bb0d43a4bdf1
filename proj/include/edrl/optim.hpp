// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "edrl/config.hpp"
#include "edrl/nn.hpp"

namespace edrl {

class Optimizer {
 public:
  explicit Optimizer(ParameterList params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;

  virtual void step() = 0;

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const ParameterList& parameters() const { return params_; }

 protected:
  ParameterList params_;
};

class Sgd : public Optimizer {
 public:
  Sgd(ParameterList params, const OptimizerConfig& cfg) : Optimizer(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }

  void step() override {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& t = params_[k].tensor;
      if (!t.has_grad()) continue;
      auto w = t.mutable_values();
      const auto g = t.grad();
      auto& vel = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = g[i] + cfg_.weight_decay * w[i];
        vel[i] = cfg_.momentum * vel[i] + d;
        w[i] -= cfg_.lr * vel[i];
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

/// Adam with bias correction; weight decay is added to the gradient.
class Adam : public Optimizer {
 public:
  Adam(ParameterList params, const OptimizerConfig& cfg) : Optimizer(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step() override {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& t = params_[k].tensor;
      if (!t.has_grad()) continue;
      auto w = t.mutable_values();
      const auto g = t.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = g[i] + cfg_.weight_decay * w[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * d;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * d * d;
        w[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

inline std::unique_ptr<Optimizer> make_optimizer(ParameterList params, const OptimizerConfig& cfg) {
  if (cfg.kind == "sgd") return std::make_unique<Sgd>(std::move(params), cfg);
  return std::make_unique<Adam>(std::move(params), cfg);
}

}  // namespace edrl
