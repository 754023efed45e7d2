#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "diffprune/autodiff.hpp"

namespace diffprune {

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (not to biases, layernorm gains or other vectors).
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<ad::Param*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      ad::Param& p = *params_[k];
      if (!p.trainable) continue;
      const bool decay = p.value.rank() == 2;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * g;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * g * g;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        if (decay) p.value[i] -= lr * opt_.weight_decay * p.value[i];
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<ad::Param*> params_;
  Options opt_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

inline void zero_grads(std::span<ad::Param* const> params) {
  for (auto* p : params) p->zero_grad();
}

inline double global_grad_norm(std::span<ad::Param* const> params) {
  double acc = 0.0;
  for (auto* p : params) {
    if (p->trainable) acc += p->grad.squared_norm();
  }
  return std::sqrt(acc);
}

/// Rescales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
inline double clip_grad_norm(std::span<ad::Param* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto* p : params) {
      for (auto& v : p->grad.data()) v *= s;
    }
  }
  return norm;
}

/// Cosine decay from base_lr at step 0 to zero at total_steps.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace diffprune
