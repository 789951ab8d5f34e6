#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "msf/config.hpp"
#include "msf/labels.hpp"
#include "msf/ops.hpp"

namespace msf {

namespace detail {

// Nearest-neighbor label resize with half-pixel centers (matches the
// bilinear sampling grid used for the image).
inline LabelMap resize_labels_nearest(const LabelMap& in, std::int64_t out_h, std::int64_t out_w) {
  LabelMap out;
  out.height = out_h;
  out.width = out_w;
  out.ids.resize(static_cast<std::size_t>(out_h * out_w));
  const double sy = static_cast<double>(in.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in.width) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const auto iy = std::min<std::int64_t>(
        in.height - 1,
        std::max<std::int64_t>(0, static_cast<std::int64_t>((static_cast<double>(y) + 0.5) * sy)));
    for (std::int64_t x = 0; x < out_w; ++x) {
      const auto ix = std::min<std::int64_t>(
          in.width - 1, std::max<std::int64_t>(
                            0, static_cast<std::int64_t>((static_cast<double>(x) + 0.5) * sx)));
      out.ids[y * out_w + x] = in.ids[iy * in.width + ix];
    }
  }
  return out;
}

template <typename T>
Tensor<T> flip_image(const Tensor<T>& img) {
  const std::int64_t c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  Tensor<T> out = Tensor<T>::zeros(img.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      const T* src = img.data().data() + (ch * h + y) * w;
      T* dst = out.data().data() + (ch * h + y) * w;
      for (std::int64_t x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
struct AugmentedSample {
  Tensor<T> image;  // C x crop_h x crop_w, mean-subtracted
  LabelMap labels;
};

// Pipeline: random scale -> random horizontal flip -> random crop -> mean
// subtraction. When the scaled image is smaller than the crop, the shortfall
// is padded with channel means (image) and the ignore id (labels) so padded
// pixels never contribute loss. Draw order from `rng` is fixed: scale factor,
// flip coin, crop y offset, crop x offset.
template <typename T>
AugmentedSample<T> augment_sample(const Tensor<T>& image, const LabelMap& labels,
                                  const AugmentConfig& aug, Rng& rng) {
  if (image.shape().rank != 3) {
    throw shape_error("augment_sample: expected C x H x W image, got " + image.shape().str());
  }
  const std::int64_t channels = image.shape()[0];
  const std::int64_t in_h = image.shape()[1], in_w = image.shape()[2];
  if (labels.height != in_h || labels.width != in_w) {
    throw shape_error("augment_sample: labels " + std::to_string(labels.height) + "x" +
                      std::to_string(labels.width) + " do not match image " + image.shape().str());
  }
  if (static_cast<std::int64_t>(aug.channel_means.size()) != channels) {
    throw config_error("augment_sample: " + std::to_string(aug.channel_means.size()) +
                       " channel means for " + std::to_string(channels) + " channels");
  }
  const std::int64_t crop_h = aug.crop_h > 0 ? aug.crop_h : in_h;
  const std::int64_t crop_w = aug.crop_w > 0 ? aug.crop_w : in_w;
  if (crop_h < 1 || crop_w < 1) throw config_error("augment_sample: degenerate crop size");

  std::uniform_real_distribution<double> scale_dist(aug.scale_min, aug.scale_max);
  const double factor = scale_dist(rng);
  const auto scaled_h = std::max<std::int64_t>(1, std::llround(in_h * factor));
  const auto scaled_w = std::max<std::int64_t>(1, std::llround(in_w * factor));

  Tensor<T> img = image;
  LabelMap lab = labels;
  if (scaled_h != in_h || scaled_w != in_w) {
    Tensor<T> batched = image.reshape({1, channels, in_h, in_w});
    img = bilinear_resize(batched, scaled_h, scaled_w).reshape({channels, scaled_h, scaled_w});
    lab = detail::resize_labels_nearest(labels, scaled_h, scaled_w);
  }

  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < aug.flip_prob) {
    img = detail::flip_image(img);
    lab = flip_horizontal(lab);
  }

  const std::int64_t cur_h = img.shape()[1], cur_w = img.shape()[2];
  std::int64_t off_y = 0, off_x = 0;
  if (cur_h > crop_h) {
    std::uniform_int_distribution<std::int64_t> d(0, cur_h - crop_h);
    off_y = d(rng);
  }
  if (cur_w > crop_w) {
    std::uniform_int_distribution<std::int64_t> d(0, cur_w - crop_w);
    off_x = d(rng);
  }

  AugmentedSample<T> out;
  out.image = Tensor<T>::zeros({channels, crop_h, crop_w});
  out.labels.height = crop_h;
  out.labels.width = crop_w;
  out.labels.ids.assign(static_cast<std::size_t>(crop_h * crop_w), kIgnoreIndex);
  const std::int64_t copy_h = std::min(crop_h, cur_h);
  const std::int64_t copy_w = std::min(crop_w, cur_w);
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    const T mean = static_cast<T>(aug.channel_means[ch]);
    T* dst_plane = out.image.data().data() + ch * crop_h * crop_w;
    const T* src_plane = img.data().data() + ch * cur_h * cur_w;
    for (std::int64_t y = 0; y < crop_h; ++y) {
      T* dst = dst_plane + y * crop_w;
      if (y < copy_h) {
        const T* src = src_plane + (off_y + y) * cur_w + off_x;
        for (std::int64_t x = 0; x < copy_w; ++x) dst[x] = src[x] - mean;
        for (std::int64_t x = copy_w; x < crop_w; ++x) dst[x] = T(0);
      } else {
        std::fill(dst, dst + crop_w, T(0));
      }
    }
  }
  for (std::int64_t y = 0; y < copy_h; ++y) {
    for (std::int64_t x = 0; x < copy_w; ++x) {
      out.labels.ids[y * crop_w + x] = lab.ids[(off_y + y) * cur_w + off_x + x];
    }
  }
  return out;
}

}  // namespace msf
