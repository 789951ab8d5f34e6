#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msf/labels.hpp"
#include "msf/tape.hpp"
#include "msf/tensor.hpp"

namespace msf {

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                    std::int64_t padding, std::int64_t dilation = 1) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
  std::int64_t groups = 1;
  bool has_bias = false;

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 || stride < 1 ||
        padding < 0 || dilation < 1 || groups < 1) {
      throw config_error("ConvSpec: all extents must be positive (padding >= 0)");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw config_error("ConvSpec: in_channels and out_channels must be divisible by groups");
    }
  }

  std::int64_t out_h(std::int64_t in_h) const {
    return conv_out_extent(in_h, kernel_h, stride, padding, dilation);
  }
  std::int64_t out_w(std::int64_t in_w) const {
    return conv_out_extent(in_w, kernel_w, stride, padding, dilation);
  }
};

namespace detail {

// ceil(a / b) for b > 0 and any sign of a.
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : a / b;
}

inline void require_rank4(const Shape& s, const char* op_name) {
  if (s.rank != 4) {
    throw shape_error(std::string(op_name) + ": expected rank-4 N x C x H x W input, got " +
                      s.str());
  }
}

// Output-column range [lo, hi] for which iw = ow*stride - padding + kw*dilation
// stays inside [0, in_w).
inline void valid_ow_range(std::int64_t kw, std::int64_t stride, std::int64_t padding,
                           std::int64_t dilation, std::int64_t in_w, std::int64_t out_w,
                           std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = kw * dilation - padding;
  lo = std::max<std::int64_t>(0, ceil_div(-off, stride));
  hi = std::min(out_w - 1, (in_w - 1 - off) / stride);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights,
                 const std::optional<Tensor<T>>& bias, const ConvSpec& spec,
                 Tape<T>* tape = nullptr) {
  spec.validate();
  detail::require_rank4(input.shape(), "conv2d");
  const std::int64_t batch = input.shape()[0];
  const std::int64_t in_c = input.shape()[1];
  const std::int64_t in_h = input.shape()[2];
  const std::int64_t in_w = input.shape()[3];
  if (in_c != spec.in_channels) {
    throw shape_error("conv2d: input has " + std::to_string(in_c) + " channels, spec expects " +
                      std::to_string(spec.in_channels));
  }
  const std::int64_t icpg = spec.in_channels / spec.groups;
  const Shape expected_w{spec.out_channels, icpg, spec.kernel_h, spec.kernel_w};
  if (weights.shape() != expected_w) {
    throw shape_error("conv2d: weight shape " + weights.shape().str() + " does not match spec " +
                      expected_w.str());
  }
  if (bias && bias->shape() != Shape{spec.out_channels}) {
    throw shape_error("conv2d: bias length must equal out_channels");
  }
  const std::int64_t out_h = spec.out_h(in_h);
  const std::int64_t out_w = spec.out_w(in_w);
  if (out_h < 1 || out_w < 1) {
    throw shape_error("conv2d: zero-size output for input " + input.shape().str());
  }

  Tensor<T> out = Tensor<T>::zeros({batch, spec.out_channels, out_h, out_w});
  const std::int64_t ocpg = spec.out_channels / spec.groups;
  const T* in_ptr = input.data().data();
  const T* w_ptr = weights.data().data();
  T* out_ptr = out.data().data();

  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t oc = 0; oc < spec.out_channels; ++oc) {
      const std::int64_t g = oc / ocpg;
      T* out_plane = out_ptr + (n * spec.out_channels + oc) * out_h * out_w;
      if (bias) {
        const T b = bias->data()[oc];
        std::fill(out_plane, out_plane + out_h * out_w, b);
      }
      for (std::int64_t icg = 0; icg < icpg; ++icg) {
        const std::int64_t ic = g * icpg + icg;
        const T* in_plane = in_ptr + (n * in_c + ic) * in_h * in_w;
        const T* w_base = w_ptr + ((oc * icpg + icg) * spec.kernel_h) * spec.kernel_w;
        for (std::int64_t kh = 0; kh < spec.kernel_h; ++kh) {
          for (std::int64_t kw = 0; kw < spec.kernel_w; ++kw) {
            const T w = w_base[kh * spec.kernel_w + kw];
            std::int64_t ow_lo, ow_hi;
            detail::valid_ow_range(kw, spec.stride, spec.padding, spec.dilation, in_w, out_w,
                                   ow_lo, ow_hi);
            if (ow_lo > ow_hi) continue;
            for (std::int64_t oh = 0; oh < out_h; ++oh) {
              const std::int64_t ih = oh * spec.stride - spec.padding + kh * spec.dilation;
              if (ih < 0 || ih >= in_h) continue;
              const T* in_row = in_plane + ih * in_w + ow_lo * spec.stride - spec.padding +
                                kw * spec.dilation;
              T* out_row = out_plane + oh * out_w + ow_lo;
              const std::int64_t count = ow_hi - ow_lo + 1;
              if (spec.stride == 1) {
                for (std::int64_t i = 0; i < count; ++i) out_row[i] += w * in_row[i];
              } else {
                for (std::int64_t i = 0; i < count; ++i) out_row[i] += w * in_row[i * spec.stride];
              }
            }
          }
        }
      }
    }
  }
  ensure_finite<T>(out.data(), "conv2d");

  if (tape) {
    if (input.requires_grad() || weights.requires_grad() || (bias && bias->requires_grad())) {
      out.set_requires_grad(true);
    }
    const std::uint64_t macs = static_cast<std::uint64_t>(batch) * spec.out_channels * out_h *
                               out_w * icpg * spec.kernel_h * spec.kernel_w;
    Tensor<T> in_t = input;
    Tensor<T> w_t = weights;
    std::optional<Tensor<T>> b_t = bias;
    ConvSpec sp = spec;
    tape->record(OpKind::Conv2d, macs, 0, [in_t, w_t, b_t, sp, out]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t n_b = in_t.shape()[0], n_ic = in_t.shape()[1];
      const std::int64_t ih_n = in_t.shape()[2], iw_n = in_t.shape()[3];
      const std::int64_t oh_n = out.shape()[2], ow_n = out.shape()[3];
      const std::int64_t icpg2 = sp.in_channels / sp.groups;
      const std::int64_t ocpg2 = sp.out_channels / sp.groups;
      const T* gout = out.grad().data();
      const T* in_p = in_t.data().data();
      const T* w_p = w_t.data().data();

      if (b_t && b_t->requires_grad()) {
        T* gb = b_t->grad().data();
        for (std::int64_t n = 0; n < n_b; ++n) {
          for (std::int64_t oc = 0; oc < sp.out_channels; ++oc) {
            const T* go = gout + (n * sp.out_channels + oc) * oh_n * ow_n;
            T acc = 0;
            for (std::int64_t i = 0; i < oh_n * ow_n; ++i) acc += go[i];
            gb[oc] += acc;
          }
        }
      }
      if (w_t.requires_grad()) {
        T* gw = w_t.grad().data();
        for (std::int64_t n = 0; n < n_b; ++n) {
          for (std::int64_t oc = 0; oc < sp.out_channels; ++oc) {
            const std::int64_t g = oc / ocpg2;
            const T* go_plane = gout + (n * sp.out_channels + oc) * oh_n * ow_n;
            for (std::int64_t icg = 0; icg < icpg2; ++icg) {
              const std::int64_t ic = g * icpg2 + icg;
              const T* in_plane = in_p + (n * n_ic + ic) * ih_n * iw_n;
              for (std::int64_t kh = 0; kh < sp.kernel_h; ++kh) {
                for (std::int64_t kw = 0; kw < sp.kernel_w; ++kw) {
                  std::int64_t ow_lo, ow_hi;
                  detail::valid_ow_range(kw, sp.stride, sp.padding, sp.dilation, iw_n, ow_n,
                                         ow_lo, ow_hi);
                  if (ow_lo > ow_hi) continue;
                  T acc = 0;
                  for (std::int64_t oh = 0; oh < oh_n; ++oh) {
                    const std::int64_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
                    if (ih < 0 || ih >= ih_n) continue;
                    const T* in_row =
                        in_plane + ih * iw_n + ow_lo * sp.stride - sp.padding + kw * sp.dilation;
                    const T* go_row = go_plane + oh * ow_n + ow_lo;
                    const std::int64_t count = ow_hi - ow_lo + 1;
                    if (sp.stride == 1) {
                      for (std::int64_t i = 0; i < count; ++i) acc += go_row[i] * in_row[i];
                    } else {
                      for (std::int64_t i = 0; i < count; ++i)
                        acc += go_row[i] * in_row[i * sp.stride];
                    }
                  }
                  gw[((oc * icpg2 + icg) * sp.kernel_h + kh) * sp.kernel_w + kw] += acc;
                }
              }
            }
          }
        }
      }
      if (in_t.requires_grad()) {
        T* gin = in_t.grad().data();
        for (std::int64_t n = 0; n < n_b; ++n) {
          for (std::int64_t oc = 0; oc < sp.out_channels; ++oc) {
            const std::int64_t g = oc / ocpg2;
            const T* go_plane = gout + (n * sp.out_channels + oc) * oh_n * ow_n;
            for (std::int64_t icg = 0; icg < icpg2; ++icg) {
              const std::int64_t ic = g * icpg2 + icg;
              T* gin_plane = gin + (n * n_ic + ic) * ih_n * iw_n;
              const T* w_base = w_p + ((oc * icpg2 + icg) * sp.kernel_h) * sp.kernel_w;
              for (std::int64_t kh = 0; kh < sp.kernel_h; ++kh) {
                for (std::int64_t kw = 0; kw < sp.kernel_w; ++kw) {
                  const T w = w_base[kh * sp.kernel_w + kw];
                  std::int64_t ow_lo, ow_hi;
                  detail::valid_ow_range(kw, sp.stride, sp.padding, sp.dilation, iw_n, ow_n,
                                         ow_lo, ow_hi);
                  if (ow_lo > ow_hi) continue;
                  for (std::int64_t oh = 0; oh < oh_n; ++oh) {
                    const std::int64_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
                    if (ih < 0 || ih >= ih_n) continue;
                    T* gin_row =
                        gin_plane + ih * iw_n + ow_lo * sp.stride - sp.padding + kw * sp.dilation;
                    const T* go_row = go_plane + oh * ow_n + ow_lo;
                    const std::int64_t count = ow_hi - ow_lo + 1;
                    if (sp.stride == 1) {
                      for (std::int64_t i = 0; i < count; ++i) gin_row[i] += w * go_row[i];
                    } else {
                      for (std::int64_t i = 0; i < count; ++i)
                        gin_row[i * sp.stride] += w * go_row[i];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// depthwise separable convolution: per-channel k x k conv, then 1 x 1 mixing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& input, const Tensor<T>& dw_weights,
                                   const Tensor<T>& pw_weights, const std::optional<Tensor<T>>& bias,
                                   std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                                   Tape<T>* tape = nullptr) {
  detail::require_rank4(input.shape(), "depthwise_separable_conv");
  const std::int64_t channels = input.shape()[1];
  ConvSpec dw_spec;
  dw_spec.in_channels = channels;
  dw_spec.out_channels = channels;
  dw_spec.kernel_h = dw_spec.kernel_w = kernel;
  dw_spec.stride = stride;
  dw_spec.padding = padding;
  dw_spec.groups = channels;
  Tensor<T> mid = conv2d<T>(input, dw_weights, std::nullopt, dw_spec, tape);

  ConvSpec pw_spec;
  pw_spec.in_channels = channels;
  pw_spec.out_channels = pw_weights.shape()[0];
  pw_spec.has_bias = bias.has_value();
  return conv2d(mid, pw_weights, bias, pw_spec, tape);
}

// ---------------------------------------------------------------------------
// average pooling with valid-count averaging (padding positions excluded
// from the denominator, so constants are preserved exactly)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::int64_t kernel, std::int64_t stride,
                     std::int64_t padding, Tape<T>* tape = nullptr) {
  detail::require_rank4(input.shape(), "avg_pool2d");
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw config_error("avg_pool2d: kernel/stride must be >= 1, padding >= 0");
  }
  if (padding >= kernel) {
    throw config_error("avg_pool2d: padding must be < kernel so every window sees input");
  }
  const std::int64_t batch = input.shape()[0], channels = input.shape()[1];
  const std::int64_t in_h = input.shape()[2], in_w = input.shape()[3];
  const std::int64_t out_h = conv_out_extent(in_h, kernel, stride, padding);
  const std::int64_t out_w = conv_out_extent(in_w, kernel, stride, padding);
  if (out_h < 1 || out_w < 1) {
    throw shape_error("avg_pool2d: zero-size output for input " + input.shape().str());
  }

  Tensor<T> out = Tensor<T>::zeros({batch, channels, out_h, out_w});
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* in_plane = input.data().data() + (n * channels + c) * in_h * in_w;
      T* out_plane = out.data().data() + (n * channels + c) * out_h * out_w;
      for (std::int64_t oh = 0; oh < out_h; ++oh) {
        const std::int64_t ih_lo = std::max<std::int64_t>(0, oh * stride - padding);
        const std::int64_t ih_hi = std::min(in_h - 1, oh * stride - padding + kernel - 1);
        for (std::int64_t ow = 0; ow < out_w; ++ow) {
          const std::int64_t iw_lo = std::max<std::int64_t>(0, ow * stride - padding);
          const std::int64_t iw_hi = std::min(in_w - 1, ow * stride - padding + kernel - 1);
          T acc = 0;
          for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
            const T* row = in_plane + ih * in_w;
            for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) acc += row[iw];
          }
          const auto count = static_cast<T>((ih_hi - ih_lo + 1) * (iw_hi - iw_lo + 1));
          out_plane[oh * out_w + ow] = acc / count;
        }
      }
    }
  }
  ensure_finite<T>(out.data(), "avg_pool2d");

  if (tape) {
    if (input.requires_grad()) out.set_requires_grad(true);
    Tensor<T> in_t = input;
    tape->record(OpKind::AvgPool, 0, static_cast<std::uint64_t>(out.numel()),
                 [in_t, out, kernel, stride, padding]() mutable {
                   if (!out.has_grad() || !in_t.requires_grad()) return;
                   const std::int64_t batch = in_t.shape()[0], channels = in_t.shape()[1];
                   const std::int64_t in_h = in_t.shape()[2], in_w = in_t.shape()[3];
                   const std::int64_t out_h = out.shape()[2], out_w = out.shape()[3];
                   const T* gout = out.grad().data();
                   T* gin = in_t.grad().data();
                   for (std::int64_t n = 0; n < batch; ++n) {
                     for (std::int64_t c = 0; c < channels; ++c) {
                       const T* go = gout + (n * channels + c) * out_h * out_w;
                       T* gi = gin + (n * channels + c) * in_h * in_w;
                       for (std::int64_t oh = 0; oh < out_h; ++oh) {
                         const std::int64_t ih_lo = std::max<std::int64_t>(0, oh * stride - padding);
                         const std::int64_t ih_hi =
                             std::min(in_h - 1, oh * stride - padding + kernel - 1);
                         for (std::int64_t ow = 0; ow < out_w; ++ow) {
                           const std::int64_t iw_lo =
                               std::max<std::int64_t>(0, ow * stride - padding);
                           const std::int64_t iw_hi =
                               std::min(in_w - 1, ow * stride - padding + kernel - 1);
                           const auto count =
                               static_cast<T>((ih_hi - ih_lo + 1) * (iw_hi - iw_lo + 1));
                           const T g = go[oh * out_w + ow] / count;
                           for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                             T* row = gi + ih * in_w;
                             for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) row[iw] += g;
                           }
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// max pooling (used by the encoder stem); gradient routes to the argmax,
// first occurrence in row-major order on ties
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::int64_t kernel, std::int64_t stride,
                     std::int64_t padding, Tape<T>* tape = nullptr) {
  detail::require_rank4(input.shape(), "max_pool2d");
  if (padding >= kernel || kernel < 1 || stride < 1 || padding < 0) {
    throw config_error("max_pool2d: require kernel >= 1, stride >= 1, 0 <= padding < kernel");
  }
  const std::int64_t batch = input.shape()[0], channels = input.shape()[1];
  const std::int64_t in_h = input.shape()[2], in_w = input.shape()[3];
  const std::int64_t out_h = conv_out_extent(in_h, kernel, stride, padding);
  const std::int64_t out_w = conv_out_extent(in_w, kernel, stride, padding);
  if (out_h < 1 || out_w < 1) {
    throw shape_error("max_pool2d: zero-size output for input " + input.shape().str());
  }

  Tensor<T> out = Tensor<T>::zeros({batch, channels, out_h, out_w});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const std::int64_t plane = (n * channels + c);
      const T* in_plane = input.data().data() + plane * in_h * in_w;
      T* out_plane = out.data().data() + plane * out_h * out_w;
      std::int64_t* am_plane = argmax->data() + plane * out_h * out_w;
      for (std::int64_t oh = 0; oh < out_h; ++oh) {
        const std::int64_t ih_lo = std::max<std::int64_t>(0, oh * stride - padding);
        const std::int64_t ih_hi = std::min(in_h - 1, oh * stride - padding + kernel - 1);
        for (std::int64_t ow = 0; ow < out_w; ++ow) {
          const std::int64_t iw_lo = std::max<std::int64_t>(0, ow * stride - padding);
          const std::int64_t iw_hi = std::min(in_w - 1, ow * stride - padding + kernel - 1);
          T best = in_plane[ih_lo * in_w + iw_lo];
          std::int64_t best_idx = ih_lo * in_w + iw_lo;
          for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
            for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) {
              const T v = in_plane[ih * in_w + iw];
              if (v > best) {
                best = v;
                best_idx = ih * in_w + iw;
              }
            }
          }
          out_plane[oh * out_w + ow] = best;
          am_plane[oh * out_w + ow] = best_idx;
        }
      }
    }
  }
  ensure_finite<T>(out.data(), "max_pool2d");

  if (tape) {
    if (input.requires_grad()) out.set_requires_grad(true);
    Tensor<T> in_t = input;
    tape->record(OpKind::MaxPool, 0, static_cast<std::uint64_t>(out.numel()),
                 [in_t, out, argmax]() mutable {
                   if (!out.has_grad() || !in_t.requires_grad()) return;
                   const std::int64_t planes = out.shape()[0] * out.shape()[1];
                   const std::int64_t out_hw = out.shape()[2] * out.shape()[3];
                   const std::int64_t in_hw = in_t.shape()[2] * in_t.shape()[3];
                   const T* gout = out.grad().data();
                   T* gin = in_t.grad().data();
                   for (std::int64_t p = 0; p < planes; ++p) {
                     const T* go = gout + p * out_hw;
                     T* gi = gin + p * in_hw;
                     const std::int64_t* am = argmax->data() + p * out_hw;
                     for (std::int64_t i = 0; i < out_hw; ++i) gi[am[i]] += go[i];
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear resize, half-pixel-centers convention with edge clamping
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeAxis {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

inline ResizeAxis resize_axis(std::int64_t in, std::int64_t out) {
  ResizeAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(src));
    a.lo[i] = lo;
    a.hi[i] = std::min(lo + 1, in - 1);
    a.frac[i] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w,
                          Tape<T>* tape = nullptr) {
  detail::require_rank4(input.shape(), "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw shape_error("bilinear_resize: target extents must be >= 1");
  const std::int64_t batch = input.shape()[0], channels = input.shape()[1];
  const std::int64_t in_h = input.shape()[2], in_w = input.shape()[3];
  const detail::ResizeAxis ay = detail::resize_axis(in_h, out_h);
  const detail::ResizeAxis ax = detail::resize_axis(in_w, out_w);

  Tensor<T> out = Tensor<T>::zeros({batch, channels, out_h, out_w});
  for (std::int64_t p = 0; p < batch * channels; ++p) {
    const T* in_plane = input.data().data() + p * in_h * in_w;
    T* out_plane = out.data().data() + p * out_h * out_w;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      const std::int64_t h0 = ay.lo[oh], h1 = ay.hi[oh];
      const T fy = static_cast<T>(ay.frac[oh]);
      const T* r0 = in_plane + h0 * in_w;
      const T* r1 = in_plane + h1 * in_w;
      T* orow = out_plane + oh * out_w;
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        const std::int64_t w0 = ax.lo[ow], w1 = ax.hi[ow];
        const T fx = static_cast<T>(ax.frac[ow]);
        const T top = r0[w0] + fx * (r0[w1] - r0[w0]);
        const T bot = r1[w0] + fx * (r1[w1] - r1[w0]);
        orow[ow] = top + fy * (bot - top);
      }
    }
  }
  ensure_finite<T>(out.data(), "bilinear_resize");

  if (tape) {
    if (input.requires_grad()) out.set_requires_grad(true);
    Tensor<T> in_t = input;
    tape->record(OpKind::BilinearResize, static_cast<std::uint64_t>(out.numel()) * 4, 0,
                 [in_t, out]() mutable {
                   if (!out.has_grad() || !in_t.requires_grad()) return;
                   const std::int64_t planes = out.shape()[0] * out.shape()[1];
                   const std::int64_t out_h = out.shape()[2], out_w = out.shape()[3];
                   const std::int64_t in_h = in_t.shape()[2], in_w = in_t.shape()[3];
                   const detail::ResizeAxis ay = detail::resize_axis(in_h, out_h);
                   const detail::ResizeAxis ax = detail::resize_axis(in_w, out_w);
                   const T* gout = out.grad().data();
                   T* gin = in_t.grad().data();
                   for (std::int64_t p = 0; p < planes; ++p) {
                     const T* go = gout + p * out_h * out_w;
                     T* gi = gin + p * in_h * in_w;
                     for (std::int64_t oh = 0; oh < out_h; ++oh) {
                       const std::int64_t h0 = ay.lo[oh], h1 = ay.hi[oh];
                       const T fy = static_cast<T>(ay.frac[oh]);
                       for (std::int64_t ow = 0; ow < out_w; ++ow) {
                         const std::int64_t w0 = ax.lo[ow], w1 = ax.hi[ow];
                         const T fx = static_cast<T>(ax.frac[ow]);
                         const T g = go[oh * out_w + ow];
                         gi[h0 * in_w + w0] += (T(1) - fy) * (T(1) - fx) * g;
                         gi[h0 * in_w + w1] += (T(1) - fy) * fx * g;
                         gi[h1 * in_w + w0] += fy * (T(1) - fx) * g;
                         gi[h1 * in_w + w1] += fy * fx * g;
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Running statistics buffers. Updated in place in train mode; not tracked by
// the tape.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormState init(std::int64_t channels) {
    BatchNormState s;
    s.running_mean = Tensor<T>::zeros({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
  }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training, T momentum = T(0.1),
                     T eps_bn = T(1e-5), Tape<T>* tape = nullptr) {
  detail::require_rank4(input.shape(), "batch_norm");
  const std::int64_t batch = input.shape()[0], channels = input.shape()[1];
  const std::int64_t hw = input.shape()[2] * input.shape()[3];
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels} ||
      state.running_mean.shape() != Shape{channels} ||
      state.running_var.shape() != Shape{channels}) {
    throw shape_error("batch_norm: gamma/beta/state length must equal channel count " +
                      std::to_string(channels));
  }

  const std::int64_t m = batch * hw;  // samples per channel
  auto mean = std::make_shared<std::vector<T>>(channels, T(0));
  auto inv_std = std::make_shared<std::vector<T>>(channels, T(0));

  if (training) {
    for (std::int64_t c = 0; c < channels; ++c) {
      T sum = 0, sq = 0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* plane = input.data().data() + (n * channels + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          sum += plane[i];
          sq += plane[i] * plane[i];
        }
      }
      const T mu = sum / static_cast<T>(m);
      const T var = std::max<T>(sq / static_cast<T>(m) - mu * mu, T(0));
      (*mean)[c] = mu;
      (*inv_std)[c] = T(1) / std::sqrt(var + eps_bn);
      state.running_mean.data()[c] = (T(1) - momentum) * state.running_mean.data()[c] + momentum * mu;
      state.running_var.data()[c] = (T(1) - momentum) * state.running_var.data()[c] + momentum * var;
    }
  } else {
    for (std::int64_t c = 0; c < channels; ++c) {
      (*mean)[c] = state.running_mean.data()[c];
      const T var = state.running_var.data()[c];
      if (var + eps_bn <= T(0)) {
        throw value_error("batch_norm: running variance + eps is not positive");
      }
      (*inv_std)[c] = T(1) / std::sqrt(var + eps_bn);
    }
  }

  Tensor<T> out = Tensor<T>::zeros(input.shape());
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* ip = input.data().data() + (n * channels + c) * hw;
      T* op = out.data().data() + (n * channels + c) * hw;
      const T scale = gamma.data()[c] * (*inv_std)[c];
      const T shift = beta.data()[c] - (*mean)[c] * scale;
      for (std::int64_t i = 0; i < hw; ++i) op[i] = ip[i] * scale + shift;
    }
  }
  ensure_finite<T>(out.data(), "batch_norm");

  if (tape) {
    if (input.requires_grad() || gamma.requires_grad() || beta.requires_grad()) {
      out.set_requires_grad(true);
    }
    Tensor<T> in_t = input, gamma_t = gamma, beta_t = beta;
    tape->record(
        OpKind::BatchNorm, 0, static_cast<std::uint64_t>(out.numel()),
        [in_t, gamma_t, beta_t, out, mean, inv_std, training, m]() mutable {
          if (!out.has_grad()) return;
          const std::int64_t batch = in_t.shape()[0], channels = in_t.shape()[1];
          const std::int64_t hw = in_t.shape()[2] * in_t.shape()[3];
          const T* gout = out.grad().data();
          const T* in_p = in_t.data().data();

          std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
          for (std::int64_t n = 0; n < batch; ++n) {
            for (std::int64_t c = 0; c < channels; ++c) {
              const T* go = gout + (n * channels + c) * hw;
              const T* ip = in_p + (n * channels + c) * hw;
              T sg = 0, sgx = 0;
              for (std::int64_t i = 0; i < hw; ++i) {
                sg += go[i];
                sgx += go[i] * (ip[i] - (*mean)[c]) * (*inv_std)[c];
              }
              sum_g[c] += sg;
              sum_gx[c] += sgx;
            }
          }
          if (beta_t.requires_grad()) {
            for (std::int64_t c = 0; c < channels; ++c) beta_t.grad()[c] += sum_g[c];
          }
          if (gamma_t.requires_grad()) {
            for (std::int64_t c = 0; c < channels; ++c) gamma_t.grad()[c] += sum_gx[c];
          }
          if (in_t.requires_grad()) {
            T* gin = in_t.grad().data();
            for (std::int64_t n = 0; n < batch; ++n) {
              for (std::int64_t c = 0; c < channels; ++c) {
                const T* go = gout + (n * channels + c) * hw;
                const T* ip = in_p + (n * channels + c) * hw;
                T* gi = gin + (n * channels + c) * hw;
                const T scale = gamma_t.data()[c] * (*inv_std)[c];
                if (training) {
                  const T mean_g = sum_g[c] / static_cast<T>(m);
                  const T mean_gx = sum_gx[c] / static_cast<T>(m);
                  for (std::int64_t i = 0; i < hw; ++i) {
                    const T xhat = (ip[i] - (*mean)[c]) * (*inv_std)[c];
                    gi[i] += scale * (go[i] - mean_g - xhat * mean_gx);
                  }
                } else {
                  for (std::int64_t i = 0; i < hw; ++i) gi[i] += scale * go[i];
                }
              }
            }
          }
        });
  }
  return out;
}

// Folds eval-mode batch normalization into the preceding convolution:
// conv(x, W', b') == bn(conv(x, W, b)).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_batch_norm(const Tensor<T>& conv_weights,
                                                const std::optional<Tensor<T>>& conv_bias,
                                                const Tensor<T>& gamma, const Tensor<T>& beta,
                                                const BatchNormState<T>& state, T eps_bn = T(1e-5)) {
  const std::int64_t out_c = conv_weights.shape()[0];
  if (gamma.shape() != Shape{out_c}) {
    throw shape_error("fold_batch_norm: BN channel count must match conv out_channels");
  }
  Tensor<T> folded_w = conv_weights.clone();
  Tensor<T> folded_b = Tensor<T>::zeros({out_c});
  const std::int64_t per_filter = conv_weights.numel() / out_c;
  for (std::int64_t oc = 0; oc < out_c; ++oc) {
    const T var = state.running_var.data()[oc];
    if (var + eps_bn <= T(0)) {
      throw value_error("fold_batch_norm: running variance + eps is not positive");
    }
    const T scale = gamma.data()[oc] / std::sqrt(var + eps_bn);
    T* wp = folded_w.data().data() + oc * per_filter;
    for (std::int64_t i = 0; i < per_filter; ++i) wp[i] *= scale;
    const T b = conv_bias ? conv_bias->data()[oc] : T(0);
    folded_b.data()[oc] = (b - state.running_mean.data()[oc]) * scale + beta.data()[oc];
  }
  return {folded_w, folded_b};
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* ip = input.data().data();
  T* op = out.data().data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ip[i] > T(0) ? ip[i] : T(0);

  if (tape) {
    if (input.requires_grad()) out.set_requires_grad(true);
    Tensor<T> in_t = input;
    tape->record(OpKind::Relu, 0, static_cast<std::uint64_t>(n), [in_t, out]() mutable {
      if (!out.has_grad() || !in_t.requires_grad()) return;
      const T* gout = out.grad().data();
      const T* ip = in_t.data().data();
      T* gin = in_t.grad().data();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        if (ip[i] > T(0)) gin[i] += gout[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw shape_error("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  ensure_finite<T>(out.data(), "add");

  if (tape) {
    if (a.requires_grad() || b.requires_grad()) out.set_requires_grad(true);
    Tensor<T> a_t = a, b_t = b;
    tape->record(OpKind::Add, 0, static_cast<std::uint64_t>(n), [a_t, b_t, out]() mutable {
      if (!out.has_grad()) return;
      const T* gout = out.grad().data();
      const std::int64_t n = out.numel();
      if (a_t.requires_grad()) {
        T* ga = a_t.grad().data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += gout[i];
      }
      if (b_t.requires_grad()) {
        T* gb = b_t.grad().data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += gout[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor, Tape<T>* tape = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* ip = input.data().data();
  T* op = out.data().data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ip[i] * factor;
  ensure_finite<T>(out.data(), "scale");

  if (tape) {
    if (input.requires_grad()) out.set_requires_grad(true);
    Tensor<T> in_t = input;
    tape->record(OpKind::Scale, 0, static_cast<std::uint64_t>(n), [in_t, out, factor]() mutable {
      if (!out.has_grad() || !in_t.requires_grad()) return;
      const T* gout = out.grad().data();
      T* gin = in_t.grad().data();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) gin[i] += factor * gout[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs, Tape<T>* tape = nullptr) {
  if (inputs.empty()) throw shape_error("concat_channels: needs at least one input");
  const Shape& first = inputs.front().shape();
  detail::require_rank4(first, "concat_channels");
  std::int64_t total_c = 0;
  for (const auto& t : inputs) {
    detail::require_rank4(t.shape(), "concat_channels");
    if (t.shape()[0] != first[0] || t.shape()[2] != first[2] || t.shape()[3] != first[3]) {
      throw shape_error("concat_channels: spatial/batch mismatch " + t.shape().str() + " vs " +
                        first.str());
    }
    total_c += t.shape()[1];
  }
  const std::int64_t batch = first[0], hw = first[2] * first[3];
  Tensor<T> out = Tensor<T>::zeros({batch, total_c, first[2], first[3]});
  for (std::int64_t n = 0; n < batch; ++n) {
    std::int64_t c_off = 0;
    for (const auto& t : inputs) {
      const std::int64_t c = t.shape()[1];
      std::copy_n(t.data().data() + n * c * hw, c * hw,
                  out.data().data() + (n * total_c + c_off) * hw);
      c_off += c;
    }
  }

  if (tape) {
    for (const auto& t : inputs) {
      if (t.requires_grad()) {
        out.set_requires_grad(true);
        break;
      }
    }
    std::vector<Tensor<T>> ins = inputs;
    tape->record(OpKind::Concat, 0, static_cast<std::uint64_t>(out.numel()),
                 [ins, out]() mutable {
                   if (!out.has_grad()) return;
                   const std::int64_t batch = out.shape()[0];
                   const std::int64_t total_c = out.shape()[1];
                   const std::int64_t hw = out.shape()[2] * out.shape()[3];
                   const T* gout = out.grad().data();
                   for (std::int64_t n = 0; n < batch; ++n) {
                     std::int64_t c_off = 0;
                     for (auto& t : ins) {
                       const std::int64_t c = t.shape()[1];
                       if (t.requires_grad()) {
                         T* gi = t.grad().data() + n * c * hw;
                         const T* go = gout + (n * total_c + c_off) * hw;
                         for (std::int64_t i = 0; i < c * hw; ++i) gi[i] += go[i];
                       }
                       c_off += c;
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax cross entropy over class logits, mean over non-ignored pixels
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<LabelMap>& targets,
                                int ignore_index = kIgnoreIndex, Tape<T>* tape = nullptr,
                                bool* all_ignored = nullptr) {
  detail::require_rank4(logits.shape(), "softmax_cross_entropy");
  const std::int64_t batch = logits.shape()[0], num_classes = logits.shape()[1];
  const std::int64_t h = logits.shape()[2], w = logits.shape()[3];
  if (static_cast<std::int64_t>(targets.size()) != batch) {
    throw shape_error("softmax_cross_entropy: expected " + std::to_string(batch) +
                      " label maps, got " + std::to_string(targets.size()));
  }
  for (const auto& t : targets) {
    if (t.height != h || t.width != w) {
      throw shape_error("softmax_cross_entropy: label map size " + std::to_string(t.height) + "x" +
                        std::to_string(t.width) + " does not match logits " +
                        logits.shape().str());
    }
  }

  const std::int64_t hw = h * w;
  std::int64_t valid = 0;
  double loss_sum = 0;
  const T* lp = logits.data().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const T* sample = lp + n * num_classes * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      const int target = targets[n].ids[i];
      if (target == ignore_index) continue;
      if (target >= num_classes) {
        throw shape_error("softmax_cross_entropy: target id " + std::to_string(target) +
                          " >= num_classes " + std::to_string(num_classes));
      }
      T max_logit = sample[i];
      for (std::int64_t k = 1; k < num_classes; ++k) {
        max_logit = std::max(max_logit, sample[k * hw + i]);
      }
      T sum_exp = 0;
      for (std::int64_t k = 0; k < num_classes; ++k) {
        sum_exp += std::exp(sample[k * hw + i] - max_logit);
      }
      loss_sum += static_cast<double>(max_logit + std::log(sum_exp) - sample[target * hw + i]);
      ++valid;
    }
  }
  if (all_ignored) *all_ignored = (valid == 0);
  const T loss_value = valid == 0 ? T(0) : static_cast<T>(loss_sum / static_cast<double>(valid));
  Tensor<T> out = Tensor<T>::scalar(loss_value);
  ensure_finite<T>(out.data(), "softmax_cross_entropy");

  if (tape && valid > 0) {
    if (logits.requires_grad()) out.set_requires_grad(true);
    Tensor<T> logits_t = logits;
    std::vector<LabelMap> targets_c = targets;
    tape->record(OpKind::SoftmaxCrossEntropy, 0,
                 static_cast<std::uint64_t>(logits.numel()),
                 [logits_t, targets_c, out, ignore_index, valid]() mutable {
                   if (!out.has_grad() || !logits_t.requires_grad()) return;
                   const T g = out.grad()[0];
                   const std::int64_t batch = logits_t.shape()[0];
                   const std::int64_t num_classes = logits_t.shape()[1];
                   const std::int64_t hw = logits_t.shape()[2] * logits_t.shape()[3];
                   const T* lp = logits_t.data().data();
                   T* gl = logits_t.grad().data();
                   const T inv_valid = T(1) / static_cast<T>(valid);
                   for (std::int64_t n = 0; n < batch; ++n) {
                     const T* sample = lp + n * num_classes * hw;
                     T* gsample = gl + n * num_classes * hw;
                     for (std::int64_t i = 0; i < hw; ++i) {
                       const int target = targets_c[n].ids[i];
                       if (target == ignore_index) continue;
                       T max_logit = sample[i];
                       for (std::int64_t k = 1; k < num_classes; ++k) {
                         max_logit = std::max(max_logit, sample[k * hw + i]);
                       }
                       T sum_exp = 0;
                       for (std::int64_t k = 0; k < num_classes; ++k) {
                         sum_exp += std::exp(sample[k * hw + i] - max_logit);
                       }
                       for (std::int64_t k = 0; k < num_classes; ++k) {
                         const T p = std::exp(sample[k * hw + i] - max_logit) / sum_exp;
                         const T indicator = (k == target) ? T(1) : T(0);
                         gsample[k * hw + i] += g * (p - indicator) * inv_valid;
                       }
                     }
                   }
                 });
  }
  return out;
}

}  // namespace msf
