#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msf/labels.hpp"
#include "msf/tensor.hpp"

namespace msf {

// Square count table indexed [ground truth][prediction]. Pixels whose ground
// truth equals the ignore index are never counted.
struct ConfusionMatrix {
  std::int64_t num_classes = 0;
  std::vector<std::int64_t> counts;  // row-major, num_classes * num_classes

  static ConfusionMatrix zeros(std::int64_t k) {
    if (k < 2) throw value_error("confusion matrix needs at least 2 classes");
    ConfusionMatrix cm;
    cm.num_classes = k;
    cm.counts.assign(static_cast<std::size_t>(k * k), 0);
    return cm;
  }

  std::int64_t& at(std::int64_t gt, std::int64_t pred) {
    return counts[static_cast<std::size_t>(gt * num_classes + pred)];
  }
  std::int64_t at(std::int64_t gt, std::int64_t pred) const {
    return counts[static_cast<std::size_t>(gt * num_classes + pred)];
  }

  void accumulate(const ConfusionMatrix& other) {
    if (other.num_classes != num_classes) {
      throw shape_error("confusion matrix accumulate: class counts differ (" +
                        std::to_string(num_classes) + " vs " +
                        std::to_string(other.num_classes) + ")");
    }
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

inline ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt,
                                 std::int64_t num_classes, int ignore_index = 255) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw shape_error("confusion: prediction " + std::to_string(pred.height) + "x" +
                      std::to_string(pred.width) + " vs ground truth " +
                      std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  ConfusionMatrix cm = ConfusionMatrix::zeros(num_classes);
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const int g = gt.ids[i];
    if (g == ignore_index) continue;
    if (g >= num_classes) {
      throw value_error("confusion: ground truth label " + std::to_string(g) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
    const int p = pred.ids[i];
    if (p >= num_classes) {
      throw value_error("confusion: predicted label " + std::to_string(p) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
    ++cm.at(g, p);
  }
  return cm;
}

struct IouReport {
  // nullopt when the class never appears in ground truth or prediction
  // (zero-denominator classes are excluded from the mean).
  std::vector<std::optional<double>> per_class;
  double mean_iou = 0;
};

inline IouReport miou(const ConfusionMatrix& cm) {
  IouReport report;
  report.per_class.resize(static_cast<std::size_t>(cm.num_classes));
  double sum = 0;
  std::int64_t scored = 0;
  for (std::int64_t c = 0; c < cm.num_classes; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t denom = -tp;  // union = row + col - diagonal
    for (std::int64_t j = 0; j < cm.num_classes; ++j) denom += cm.at(c, j) + cm.at(j, c);
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    report.per_class[static_cast<std::size_t>(c)] = iou;
    sum += iou;
    ++scored;
  }
  if (scored == 0) throw value_error("miou: no scored classes (all denominators are zero)");
  report.mean_iou = sum / static_cast<double>(scored);
  return report;
}

// Per-pixel argmax over the class axis of one sample's logits. Ties resolve
// to the lowest class index.
template <typename T>
std::vector<LabelMap> argmax_labels(const Tensor<T>& logits) {
  if (logits.shape().rank != 4) throw shape_error("argmax_labels: expected rank-4 logits");
  const auto& s = logits.shape();
  const std::int64_t n = s[0], k = s[1], h = s[2], w = s[3];
  std::vector<LabelMap> out;
  out.reserve(static_cast<std::size_t>(n));
  if (k > 255) throw value_error("argmax_labels: more than 255 classes cannot map to u8 ids");
  const T* base = logits.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    LabelMap m(h, w, 0);
    const T* sample = base + i * k * h * w;
    for (std::int64_t p = 0; p < h * w; ++p) {
      int best = 0;
      T best_v = sample[p];
      for (std::int64_t c = 1; c < k; ++c) {
        const T v = sample[c * h * w + p];
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(c);
        }
      }
      m.ids[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace msf
