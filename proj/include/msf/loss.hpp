#pragma once

#include <optional>
#include <vector>

#include "msf/config.hpp"
#include "msf/ops.hpp"

namespace msf {

// Cross entropy between full-resolution class logits and label maps,
// averaged over non-ignored pixels.
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& seg_logits, const std::vector<LabelMap>& labels,
                   const LossConfig& config, Tape<T>* tape = nullptr) {
  config.validate();
  return softmax_cross_entropy(seg_logits, labels, config.ignore_index, tape);
}

template <typename T>
struct LossTerms {
  Tensor<T> total;   // scalar, differentiable
  T seg = T(0);      // detached values for logging
  T boundary = T(0);
};

// total = seg CE + lambda * boundary CE. The boundary term is zero when no
// boundary logits are supplied (boundary head off).
template <typename T>
LossTerms<T> combined_loss(const Tensor<T>& seg_logits,
                           const std::optional<Tensor<T>>& boundary_logits,
                           const std::vector<LabelMap>& labels,
                           const std::optional<std::vector<BoundaryMap>>& boundary_gt,
                           const LossConfig& config, Tape<T>* tape = nullptr) {
  LossTerms<T> out;
  Tensor<T> seg = seg_loss(seg_logits, labels, config, tape);
  out.seg = seg.item();
  if (!boundary_logits) {
    out.total = seg;
    return out;
  }
  if (!boundary_gt) {
    throw shape_error("combined_loss: boundary logits supplied without boundary ground truth");
  }
  Tensor<T> boundary =
      softmax_cross_entropy(*boundary_logits, *boundary_gt, config.ignore_index, tape);
  out.boundary = boundary.item();
  out.total = add(seg, scale(boundary, static_cast<T>(config.lambda), tape), tape);
  return out;
}

}  // namespace msf
