#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msf/tensor.hpp"

namespace msf {

// lr(step) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi step / total)).
// Endpoints are returned exactly as configured.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                        double lr_min) {
  if (total_steps < 1) throw value_error("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw value_error("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  }
  if (step == 0) return lr_max;
  if (step == total_steps) return lr_min;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(t * 3.14159265358979323846));
}

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  static AdamState init(const std::vector<Tensor<T>>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

// One Adam update with bias correction. Weight decay is decoupled: applied
// directly to the parameters before the moment-based step. A non-finite
// gradient aborts before any parameter is touched.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr,
               double weight_decay) {
  if (params.size() != state.m.size()) {
    throw value_error("adam_step: state tracks " + std::to_string(state.m.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (params[pi].numel() != static_cast<std::int64_t>(state.m[pi].size())) {
      throw value_error("adam_step: parameter " + std::to_string(pi) + " shape changed");
    }
    for (const T g : params[pi].grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw value_error("adam_step: non-finite gradient in parameter " + std::to_string(pi) +
                          "; step aborted");
      }
    }
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].data();
    auto grad = params[pi].grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::int64_t i = 0; i < params[pi].numel(); ++i) {
      const double g = static_cast<double>(grad[i]);
      double th = static_cast<double>(data[i]);
      th -= lr * weight_decay * th;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      th -= lr * mhat / (std::sqrt(vhat) + state.eps_adam);
      data[i] = static_cast<T>(th);
    }
  }
}

}  // namespace msf
