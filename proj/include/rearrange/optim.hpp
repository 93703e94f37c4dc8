#pragma once

#include "rearrange/tensor.hpp"

namespace rearrange {

// Warmup + cosine decay, stepped once per epoch. lr_min -> lr_max linearly on
// [0, warmup_epochs], then lr_max * 0.5*(1+cos(pi * progress)) down to zero at
// total_epochs.
struct ScheduleCfg {
  double lr_min = 1e-8;
  double lr_max = 6e-5;
  int warmup_epochs = 200;
  int total_epochs = 750;
};

inline double lr_at(int epoch, const ScheduleCfg& cfg) {
  if (cfg.warmup_epochs <= 0 || cfg.total_epochs <= cfg.warmup_epochs)
    fail("lr schedule: need 0 < warmup_epochs < total_epochs");
  if (!(cfg.lr_min >= 0.0 && cfg.lr_min < cfg.lr_max))
    fail("lr schedule: need 0 <= lr_min < lr_max");
  if (epoch < 0 || epoch > cfg.total_epochs)
    fail("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
         std::to_string(cfg.total_epochs) + "]");
  if (epoch <= cfg.warmup_epochs) {
    double t = double(epoch) / double(cfg.warmup_epochs);
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * t;
  }
  double t = double(epoch - cfg.warmup_epochs) / double(cfg.total_epochs - cfg.warmup_epochs);
  return cfg.lr_max * 0.5 * (1.0 + std::cos(M_PI * t));
}

// AdamW with bias-corrected moments and decoupled weight decay.
template <typename Real>
struct OptimStateT {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  long step_count = 0;
  std::vector<std::vector<Real>> m;  // first moments, aligned with the param list
  std::vector<std::vector<Real>> v;  // second moments

  void init(const std::vector<TensorT<Real>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(size_t(p.numel()), Real(0));
      v.emplace_back(size_t(p.numel()), Real(0));
    }
    step_count = 0;
  }
};

using OptimState = OptimStateT<float>;

// One update over an ordered parameter list. Gradients are read from each
// tensor's grad buffer; a missing buffer counts as zero. Non-finite gradients
// abort with the parameter's name.
template <typename Real>
void adamw_step(std::vector<TensorT<Real>>& params, OptimStateT<Real>& state, double lr,
                const std::vector<std::string>* names = nullptr) {
  if (lr < 0.0) fail("adamw_step: negative learning rate");
  if (state.m.size() != params.size()) fail("adamw_step: state not initialized for params");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const bool has_grad = p.grad().size() == p.values().size();
    auto& vals = p.values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double g = has_grad ? double(p.grad()[i]) : 0.0;
      if (!std::isfinite(g)) {
        std::string who = names && pi < names->size() ? (*names)[pi]
                                                      : "param#" + std::to_string(pi);
        fail("adamw_step: non-finite gradient in " + who);
      }
      const double mn = state.beta1 * double(m[i]) + (1.0 - state.beta1) * g;
      const double vn = state.beta2 * double(v[i]) + (1.0 - state.beta2) * g * g;
      m[i] = Real(mn);
      v[i] = Real(vn);
      const double mhat = mn / bc1;
      const double vhat = vn / bc2;
      double x = double(vals[i]);
      x -= lr * (mhat / (std::sqrt(vhat) + state.epsilon) + state.weight_decay * x);
      vals[i] = Real(x);
    }
  }
}

// Scales gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename Real>
double clip_global_norm(std::vector<TensorT<Real>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (p.grad().size() != p.values().size()) continue;
    for (Real g : p.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const Real s = Real(max_norm / norm);
    for (auto& p : params) {
      if (p.grad().size() != p.values().size()) continue;
      for (auto& g : p.grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace rearrange
