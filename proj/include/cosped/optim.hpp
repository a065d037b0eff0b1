#pragma once

// AdamW with decoupled weight decay, plus the warmup-then-cosine learning
// rate schedule and a global-norm gradient clipper. One optimizer instance
// per training run; parameters are registered once and updated in place.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "cosped/tensor.hpp"

namespace cosped {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Linear warmup to peak_lr over warmup_steps, then cosine decay to
// floor_frac * peak_lr at total_steps. Steps are zero-based.
inline double lr_at_step(int step, int total_steps, int warmup_steps, double peak_lr,
                         double floor_frac = 0.1) {
  if (total_steps < 1) throw std::invalid_argument("lr_at_step: total_steps must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("lr_at_step: warmup_steps must be non-negative");
  if (warmup_steps > 0 && step < warmup_steps)
    return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const int decay_steps = std::max(1, total_steps - warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) /
                                     static_cast<double>(decay_steps));
  const double floor_lr = floor_frac * peak_lr;
  return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Scale gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<std::vector<double>*> grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads)
    for (double v : *g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto* g : grads)
      for (double& v : *g) v *= s;
  }
  return norm;
}

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Parameters must be leaves; registration order defines state layout.
  void register_param(const Tensor& t) {
    if (!t.requires_grad())
      throw std::invalid_argument("AdamW::register_param: tensor does not require gradients");
    params_.push_back(t);
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }

  std::size_t size() const { return params_.size(); }
  const std::vector<Tensor>& params() const { return params_; }

  // One update with the given gradients (parallel to registration order)
  // at learning rate lr. Moment bias correction uses the internal step
  // counter, which advances once per call.
  void step(const std::vector<const std::vector<double>*>& grads, double lr) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("AdamW::step: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto vals = params_[p].mutable_values();
      const auto& g = *grads[p];
      if (g.size() != vals.size())
        throw std::invalid_argument("AdamW::step: gradient size mismatch");
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        vals[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * vals[i]);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

}  // namespace cosped
