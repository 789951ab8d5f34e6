#pragma once

#include <vector>

#include "msf/dataset.hpp"
#include "msf/metrics.hpp"
#include "msf/model.hpp"

namespace msf {

struct EvalResult {
  ConfusionMatrix cm;
  IouReport iou;
  std::int64_t samples = 0;
};

// Deterministic eval pass: mean subtraction only (no random augmentation),
// eval-mode forward one sample at a time, argmax, confusion accumulate.
template <typename T>
EvalResult evaluate_dataset(Model<T>& model, const DatasetIndex& data,
                            const std::vector<double>& channel_means,
                            int ignore_index = kIgnoreIndex) {
  if (data.samples.empty()) throw value_error("evaluate_dataset: dataset is empty");
  const std::int64_t k = model.config.num_classes;
  EvalResult result;
  result.cm = ConfusionMatrix::zeros(k);
  for (const SampleRef& ref : data.samples) {
    auto [image, labels] = load_sample<T>(ref);
    const auto& s = image.shape();
    if (static_cast<std::int64_t>(channel_means.size()) != s[0]) {
      throw config_error("evaluate_dataset: " + std::to_string(channel_means.size()) +
                         " channel means for " + std::to_string(s[0]) + " channels");
    }
    Tensor<T> batch = Tensor<T>::zeros({1, s[0], s[1], s[2]});
    const std::int64_t plane = s[1] * s[2];
    for (std::int64_t c = 0; c < s[0]; ++c) {
      const T mean = static_cast<T>(channel_means[static_cast<std::size_t>(c)]);
      for (std::int64_t p = 0; p < plane; ++p) {
        batch.data()[c * plane + p] = image.data()[c * plane + p] - mean;
      }
    }
    ForwardOut<T> out;
    try {
      out = model_forward(model, batch, false);
    } catch (const error& e) {
      throw error("evaluate_dataset: sample '" + ref.id + "': " + e.what());
    }
    std::vector<LabelMap> pred = argmax_labels(out.seg_logits);
    result.cm.accumulate(confusion(pred[0], labels, k, ignore_index));
    ++result.samples;
  }
  result.iou = miou(result.cm);
  return result;
}

}  // namespace msf
