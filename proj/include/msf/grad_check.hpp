#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "msf/tensor.hpp"

namespace msf {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::int64_t worst_param = -1;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;

  bool ok(double tol) const { return max_rel_err <= tol; }
};

// Compares analytic gradients against central differences. `loss_fn` must
// rebuild the graph from scratch on every call (the perturbed parameter data
// is read at forward time). Relative error uses |a - n| / max(1, |a|, |n|),
// so tiny gradients are compared absolutely.
template <typename T>
GradCheckResult grad_check(const std::function<T()>& loss_fn,
                           const std::function<void()>& backward_fn,
                           std::vector<Tensor<T>> params, T h = T(1e-5)) {
  for (auto& p : params) p.zero_grad();
  backward_fn();

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const T saved = p.data()[i];
      p.data()[i] = saved + h;
      const double up = static_cast<double>(loss_fn());
      p.data()[i] = saved - h;
      const double down = static_cast<double>(loss_fn());
      p.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = static_cast<std::int64_t>(pi);
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace msf
