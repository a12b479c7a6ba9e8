#pragma once

// Adam over a flat list of leaf tensors. With maximize=true the update
// ascends the objective. beta1=0 gives a momentum-free rule whose direction
// is sign-aligned with the gradient, which is what the monotonicity tests
// rely on.

#include "caps/tensor.hpp"

#include <cmath>
#include <vector>

namespace caps {

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool maximize = false;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& grad = params_[k].grad();
      auto& value = params_[k].mutable_values();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = cfg_.maximize ? -grad[i] : grad[i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        value[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Momentum SGD with one RMS normalizer per parameter tensor. Unlike
// per-coordinate Adam, relative gradient magnitudes inside a tensor are
// preserved, so responsibility-weighted mixture statistics keep their
// weighting; the group scalar only fixes the step scale across
// heterogeneous parameter groups.
class GroupRmsOptimizer {
 public:
  GroupRmsOptimizer(std::vector<Tensor> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg), v_(params_.size(), 0.0) {
    for (const auto& p : params_) m_.emplace_back(p.size(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& grad = params_[k].grad();
      auto& value = params_[k].mutable_values();
      if (value.empty()) continue;
      double g2 = 0.0;
      for (double g : grad) g2 += g * g;
      g2 /= static_cast<double>(grad.size());
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g2;
      const double scale = std::sqrt(v_[k] / bc2) + cfg_.eps;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = cfg_.maximize ? -grad[i] : grad[i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        value[i] -= cfg_.learning_rate * (m_[k][i] / bc1) / scale;
      }
    }
  }

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace caps
