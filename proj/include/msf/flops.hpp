#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "msf/model.hpp"

namespace msf {

struct LayerCost {
  std::string name;
  std::uint64_t macs = 0;     // multiply-accumulates
  std::uint64_t aux_ops = 0;  // 1-per-element ops (pool/bn/relu/add/concat)
};

struct CostReport {
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;  // 2 * macs by convention; both reported
  std::uint64_t aux_ops = 0;
  std::int64_t params = 0;
  std::vector<LayerCost> layers;
};

namespace detail {

struct Extent {
  std::int64_t c = 0, h = 0, w = 0;
  std::int64_t numel(std::int64_t n) const { return n * c * h * w; }
};

struct CostWalk {
  std::int64_t n;
  std::vector<LayerCost>* layers;

  void row(const std::string& name, std::uint64_t macs, std::uint64_t aux) {
    layers->push_back({name, macs, aux});
  }

  // conv + BN + ReLU as emitted by ConvBnRelu::forward on an unfolded model
  Extent conv_bn(const std::string& name, const Extent& in, std::int64_t out_c, std::int64_t k,
                 std::int64_t stride, std::int64_t padding, bool bn, bool relu_after) {
    Extent out{out_c, conv_out_extent(in.h, k, stride, padding),
               conv_out_extent(in.w, k, stride, padding)};
    const std::uint64_t macs = static_cast<std::uint64_t>(out.numel(n)) * in.c * k * k;
    row(name + ".conv", macs, 0);
    if (bn) row(name + ".bn", 0, static_cast<std::uint64_t>(out.numel(n)));
    if (relu_after) row(name + ".relu", 0, static_cast<std::uint64_t>(out.numel(n)));
    return out;
  }

  // depthwise 3x3 stride 1 pad 1 + pointwise 1x1 + BN + ReLU (DwSepBlock)
  Extent dwsep(const std::string& name, const Extent& in, std::int64_t out_c) {
    Extent out{out_c, in.h, in.w};
    row(name + ".dw", static_cast<std::uint64_t>(in.numel(n)) * 9, 0);
    row(name + ".pw", static_cast<std::uint64_t>(out.numel(n)) * in.c, 0);
    row(name + ".bn", 0, static_cast<std::uint64_t>(out.numel(n)));
    row(name + ".relu", 0, static_cast<std::uint64_t>(out.numel(n)));
    return out;
  }

  Extent resize(const std::string& name, const Extent& in, std::int64_t h, std::int64_t w) {
    Extent out{in.c, h, w};
    row(name, static_cast<std::uint64_t>(out.numel(n)) * 4, 0);
    return out;
  }
};

}  // namespace detail

// Analytic cost of one inference forward (unfolded model, so batch norm
// contributes its per-element aux ops). Mirrors the runtime op sequence
// exactly; tests cross-check the totals against a tape-instrumented forward.
inline CostReport count_flops(const ModelConfig& config, std::int64_t batch, std::int64_t height,
                              std::int64_t width) {
  config.validate();
  const std::int64_t mult = config.required_multiple();
  if (batch < 1) throw config_error("count_flops: batch must be >= 1");
  if (height % mult != 0 || width % mult != 0) {
    throw shape_error("count_flops: input " + std::to_string(height) + "x" +
                      std::to_string(width) + " must have height and width divisible by " +
                      std::to_string(mult));
  }

  CostReport report;
  detail::CostWalk walk{batch, &report.layers};
  const auto& enc = config.encoder;

  // encoder
  const std::int64_t stem_div = detail::stem_divisor(enc.stage_strides[0]);
  detail::Extent x = walk.conv_bn("stem", {config.input_channels, height, width},
                                  enc.stage_channels[0], 7, stem_div >= 2 ? 2 : 1, 3, true, true);
  if (stem_div >= 4) {
    x = {x.c, conv_out_extent(x.h, 3, 2, 1), conv_out_extent(x.w, 3, 2, 1)};
    walk.row("stem.pool", 0, static_cast<std::uint64_t>(x.numel(batch)));
  }

  std::array<detail::Extent, 4> features;
  std::int64_t reached = stem_div;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t out_c = enc.stage_channels[i];
    const std::int64_t stage_stride = enc.stage_strides[i] / reached;
    reached = enc.stage_strides[i];
    for (std::int64_t k = 0; k < enc.blocks_per_stage[i]; ++k) {
      const std::int64_t stride = k == 0 ? stage_stride : 1;
      const std::string p = "stage" + std::to_string(i + 1) + ".block" + std::to_string(k + 1);
      detail::Extent y = walk.conv_bn(p + ".conv1", x, out_c, 3, stride, 1, true, true);
      y = walk.conv_bn(p + ".conv2", y, out_c, 3, 1, 1, true, false);
      if (stride != 1 || x.c != out_c) walk.conv_bn(p + ".skip", x, out_c, 1, stride, 0, true, false);
      walk.row(p + ".add", 0, static_cast<std::uint64_t>(y.numel(batch)));
      walk.row(p + ".relu", 0, static_cast<std::uint64_t>(y.numel(batch)));
      x = y;
    }
    features[i] = x;
  }

  // SAP pyramid entries grouped by divisor
  std::map<std::int64_t, std::vector<detail::Extent>> groups;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t m = enc.stage_strides[i];
    for (std::int64_t j = 0; j <= config.max_level(i); ++j) {
      const std::int64_t r = m * (std::int64_t(1) << j);
      if (config.sap.exclude_quarter_resolution && r < 8) continue;
      if (j == 0) {
        groups[r].push_back(features[i]);
        continue;
      }
      const std::int64_t s = std::int64_t(1) << j;
      const std::string p = "sap.stage" + std::to_string(i + 1) + ".level" + std::to_string(j);
      detail::Extent e = features[i];
      switch (config.sap.kernel_mode) {
        case SapKernelMode::KernelEqualsStride:
          e = {e.c, conv_out_extent(e.h, s, s, 0), conv_out_extent(e.w, s, s, 0)};
          walk.row(p, 0, static_cast<std::uint64_t>(e.numel(batch)));
          break;
        case SapKernelMode::KernelTwoSPlusOne:
          e = {e.c, conv_out_extent(e.h, 2 * s + 1, s, s), conv_out_extent(e.w, 2 * s + 1, s, s)};
          walk.row(p, 0, static_cast<std::uint64_t>(e.numel(batch)));
          break;
        case SapKernelMode::DilatedConv3x3:
          e = {e.c, conv_out_extent(e.h, 3, s, s, s), conv_out_extent(e.w, 3, s, s, s)};
          walk.row(p, static_cast<std::uint64_t>(e.numel(batch)) * 9, 0);
          break;
      }
      groups[r].push_back(e);
    }
  }

  // fusion per resolution
  std::map<std::int64_t, detail::Extent> pyramid;
  for (const auto& [r, members] : groups) {
    detail::Extent cat{0, members.front().h, members.front().w};
    for (const auto& e : members) cat.c += e.c;
    const std::string p = "fuse.r" + std::to_string(r);
    walk.row(p + ".concat", 0, static_cast<std::uint64_t>(cat.numel(batch)));
    pyramid[r] = walk.dwsep(p, cat, config.fusion_width);
  }

  // decoder branches, deepest level first
  const auto ladder = config.pyramid_resolutions();
  auto run_branch = [&](const std::string& prefix) {
    detail::Extent b = pyramid.at(ladder.back());
    std::size_t step = 0;
    for (auto it = ladder.rbegin() + 1; it != ladder.rend(); ++it, ++step) {
      const detail::Extent& skip = pyramid.at(*it);
      const std::string p = prefix + ".step" + std::to_string(step + 1);
      b = walk.resize(p + ".resize", b, skip.h, skip.w);
      detail::Extent cat{b.c + skip.c, skip.h, skip.w};
      walk.row(p + ".concat", 0, static_cast<std::uint64_t>(cat.numel(batch)));
      b = walk.dwsep(p, cat, config.fusion_width);
    }
    return b;
  };

  detail::Extent a = run_branch("branch1");
  detail::Extent seg_features = a;
  detail::Extent boundary_features = a;
  if (config.branch_count == 2) {
    boundary_features = run_branch("branch2");
    if (config.branch_fusion == BranchFusion::Concat) {
      detail::Extent cat{2 * config.fusion_width, a.h, a.w};
      walk.row("branch_fuse.concat", 0, static_cast<std::uint64_t>(cat.numel(batch)));
      seg_features = walk.dwsep("branch_fuse", cat, config.fusion_width);
    }
  }

  // heads
  detail::Extent seg =
      walk.conv_bn("seg_head", seg_features, config.num_classes, 1, 1, 0, false, false);
  walk.resize("seg_head.resize", seg, height, width);
  if (config.boundary_mode != BoundaryMode::Off) {
    const std::int64_t bc =
        config.boundary_mode == BoundaryMode::ClassBoundary ? config.num_classes + 1 : 2;
    detail::Extent bnd = walk.conv_bn("boundary_head", boundary_features, bc, 1, 1, 0, false, false);
    if (config.cbs_output_size == CbsOutputSize::FullScale) {
      walk.resize("boundary_head.resize", bnd, height, width);
    }
  }

  for (const auto& layer : report.layers) {
    report.macs += layer.macs;
    report.aux_ops += layer.aux_ops;
  }
  report.flops = 2 * report.macs;

  Model<float> skeleton = build_model<float>(config, 0);
  report.params = count_params(skeleton);
  return report;
}

}  // namespace msf
