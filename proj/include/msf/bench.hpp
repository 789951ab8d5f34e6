#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include "msf/model.hpp"

namespace msf {

struct LatencyReport {
  double mean_ms = 0;
  double median_ms = 0;
  double p95_ms = 0;
  double fps = 0;  // 1000 / mean_ms
  std::int64_t runs = 0;
  std::vector<double> samples_ms;  // raw per-run samples, stats recomputable
};

namespace detail {

inline double percentile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1 - frac) + sorted[hi] * frac;
}

}  // namespace detail

inline LatencyReport latency_stats(std::vector<double> samples_ms) {
  if (samples_ms.empty()) throw value_error("latency_stats: no samples");
  LatencyReport r;
  r.runs = static_cast<std::int64_t>(samples_ms.size());
  double sum = 0;
  for (double s : samples_ms) sum += s;
  r.mean_ms = sum / static_cast<double>(samples_ms.size());
  r.fps = 1000.0 / r.mean_ms;
  r.samples_ms = samples_ms;
  std::sort(samples_ms.begin(), samples_ms.end());
  r.median_ms = detail::percentile(samples_ms, 0.5);
  r.p95_ms = detail::percentile(samples_ms, 0.95);
  return r;
}

// Wall-clock benchmark of eval-mode forwards, single-threaded, one seeded
// input reused across runs. The model must have its batch norms folded first
// so the timed path matches deployment inference.
template <typename T>
LatencyReport bench_latency(Model<T>& model, std::int64_t height, std::int64_t width,
                            std::int64_t runs = 500, std::int64_t warmup = 5,
                            std::uint64_t seed = 1) {
  if (!model.folded) {
    throw config_error("bench_latency: fold the model's batch norms first (fold_all_bn)");
  }
  if (runs < 1) throw config_error("bench_latency: runs must be >= 1");

  Rng rng(mix_seed(seed));
  Tensor<T> input = randn<T>({1, model.config.input_channels, height, width}, rng);

  for (std::int64_t i = 0; i < warmup; ++i) model_forward(model, input, false);

  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(runs));
  for (std::int64_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    ForwardOut<T> out = model_forward(model, input, false);
    const auto t1 = std::chrono::steady_clock::now();
    ensure_finite<T>(out.seg_logits.data(), "bench_latency");
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return latency_stats(std::move(samples));
}

}  // namespace msf
