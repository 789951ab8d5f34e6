#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msf/config.hpp"
#include "msf/ops.hpp"

namespace msf {

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBnRelu {
  ConvSpec spec;
  Tensor<T> w;
  std::optional<Tensor<T>> b;  // appears when the batch norm is folded in
  bool has_bn = true;
  Tensor<T> gamma, beta;
  BatchNormState<T> bn;
  bool relu_after = true;

  Tensor<T> forward(const Tensor<T>& x, bool training, Tape<T>* tape) {
    Tensor<T> y = conv2d(x, w, b, spec, tape);
    if (has_bn) y = batch_norm(y, gamma, beta, bn, training, T(0.1), T(1e-5), tape);
    if (relu_after) y = relu(y, tape);
    return y;
  }

  void fold() {
    if (!has_bn) throw value_error("fold: batch norm already folded");
    auto folded = fold_batch_norm(w, b, gamma, beta, bn);
    folded.first.set_requires_grad(w.requires_grad());
    folded.second.set_requires_grad(w.requires_grad());
    w = folded.first;
    b = folded.second;
    has_bn = false;
    gamma = Tensor<T>();
    beta = Tensor<T>();
    bn = BatchNormState<T>();
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn(prefix + ".w", w);
    if (b) fn(prefix + ".b", *b);
    if (has_bn) {
      fn(prefix + ".gamma", gamma);
      fn(prefix + ".beta", beta);
    }
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    if (has_bn) {
      fn(prefix + ".running_mean", bn.running_mean);
      fn(prefix + ".running_var", bn.running_var);
    }
  }
};

// Depthwise k x k followed by pointwise 1 x 1, with one BN+ReLU after the mix.
template <typename T>
struct DwSepBlock {
  std::int64_t in_channels = 0, out_channels = 0;
  std::int64_t kernel = 3, stride = 1, padding = 1;
  Tensor<T> dw_w;  // in x 1 x k x k
  Tensor<T> pw_w;  // out x in x 1 x 1
  std::optional<Tensor<T>> pw_b;
  bool has_bn = true;
  Tensor<T> gamma, beta;
  BatchNormState<T> bn;
  bool relu_after = true;

  Tensor<T> forward(const Tensor<T>& x, bool training, Tape<T>* tape) {
    Tensor<T> y = depthwise_separable_conv(x, dw_w, pw_w, pw_b, kernel, stride, padding, tape);
    if (has_bn) y = batch_norm(y, gamma, beta, bn, training, T(0.1), T(1e-5), tape);
    if (relu_after) y = relu(y, tape);
    return y;
  }

  void fold() {
    if (!has_bn) throw value_error("fold: batch norm already folded");
    auto folded = fold_batch_norm(pw_w, pw_b, gamma, beta, bn);
    folded.first.set_requires_grad(pw_w.requires_grad());
    folded.second.set_requires_grad(pw_w.requires_grad());
    pw_w = folded.first;
    pw_b = folded.second;
    has_bn = false;
    gamma = Tensor<T>();
    beta = Tensor<T>();
    bn = BatchNormState<T>();
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn(prefix + ".dw_w", dw_w);
    fn(prefix + ".pw_w", pw_w);
    if (pw_b) fn(prefix + ".pw_b", *pw_b);
    if (has_bn) {
      fn(prefix + ".gamma", gamma);
      fn(prefix + ".beta", beta);
    }
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    if (has_bn) {
      fn(prefix + ".running_mean", bn.running_mean);
      fn(prefix + ".running_var", bn.running_var);
    }
  }
};

template <typename T>
struct ResidualBlock {
  ConvBnRelu<T> conv1;  // 3x3, carries the block stride
  ConvBnRelu<T> conv2;  // 3x3 stride 1, no relu (applied after the sum)
  std::optional<ConvBnRelu<T>> skip;  // 1x1 projection when stride or width changes

  Tensor<T> forward(const Tensor<T>& x, bool training, Tape<T>* tape) {
    Tensor<T> y = conv2.forward(conv1.forward(x, training, tape), training, tape);
    Tensor<T> s = skip ? skip->forward(x, training, tape) : x;
    return relu(add(y, s, tape), tape);
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    conv1.visit_params(prefix + ".conv1", fn);
    conv2.visit_params(prefix + ".conv2", fn);
    if (skip) skip->visit_params(prefix + ".skip", fn);
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    conv1.visit_buffers(prefix + ".conv1", fn);
    conv2.visit_buffers(prefix + ".conv2", fn);
    if (skip) skip->visit_buffers(prefix + ".skip", fn);
  }
};

// ---------------------------------------------------------------------------
// model structure
// ---------------------------------------------------------------------------

template <typename T>
struct SapEntry {
  int stage;                // 0-based encoder stage
  std::int64_t level;       // pooling index j
  std::int64_t resolution;  // divisor m_i * 2^j
  Tensor<T> tensor;
};

template <typename T>
using FusedPyramid = std::map<std::int64_t, Tensor<T>>;

template <typename T>
struct DecoderOut {
  Tensor<T> seg_features;  // N x fusion_width x H/8 x W/8
  std::optional<Tensor<T>> boundary_features;
};

template <typename T>
struct ForwardOut {
  Tensor<T> seg_logits;  // N x K x H x W at input resolution
  std::optional<Tensor<T>> boundary_logits;
};

template <typename T>
struct Model {
  ModelConfig config;

  ConvBnRelu<T> stem;
  bool stem_pool = false;  // 3x3 stride-2 max pool after the stem
  std::array<std::vector<ResidualBlock<T>>, 4> stages;
  // Learned pooling substitutes (DilatedConv3x3 mode only); key = (stage, level).
  std::map<std::pair<int, std::int64_t>, Tensor<T>> sap_conv;
  // Per-resolution fusion blocks, keyed by divisor.
  std::map<std::int64_t, DwSepBlock<T>> fuse;
  // Decoder branches; each step consumes (upsampled, F_r) concatenated.
  std::vector<std::vector<DwSepBlock<T>>> branches;
  std::optional<DwSepBlock<T>> branch_fuse;
  ConvBnRelu<T> seg_head;                  // 1x1, bias, no BN/ReLU
  std::optional<ConvBnRelu<T>> boundary_head;
  bool folded = false;

  void visit_params(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    stem.visit_params("stem", fn);
    for (int i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < stages[i].size(); ++k) {
        stages[i][k].visit_params("stage" + std::to_string(i + 1) + ".block" + std::to_string(k + 1),
                                  fn);
      }
    }
    for (auto& [key, w] : sap_conv) {
      fn("sap.stage" + std::to_string(key.first + 1) + ".level" + std::to_string(key.second) + ".w",
         w);
    }
    for (auto& [r, block] : fuse) block.visit_params("fuse.r" + std::to_string(r), fn);
    for (std::size_t a = 0; a < branches.size(); ++a) {
      for (std::size_t k = 0; k < branches[a].size(); ++k) {
        branches[a][k].visit_params(
            "branch" + std::to_string(a + 1) + ".step" + std::to_string(k + 1), fn);
      }
    }
    if (branch_fuse) branch_fuse->visit_params("branch_fuse", fn);
    seg_head.visit_params("seg_head", fn);
    if (boundary_head) boundary_head->visit_params("boundary_head", fn);
  }

  void visit_buffers(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    stem.visit_buffers("stem", fn);
    for (int i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < stages[i].size(); ++k) {
        stages[i][k].visit_buffers(
            "stage" + std::to_string(i + 1) + ".block" + std::to_string(k + 1), fn);
      }
    }
    for (auto& [r, block] : fuse) block.visit_buffers("fuse.r" + std::to_string(r), fn);
    for (std::size_t a = 0; a < branches.size(); ++a) {
      for (std::size_t k = 0; k < branches[a].size(); ++k) {
        branches[a][k].visit_buffers(
            "branch" + std::to_string(a + 1) + ".step" + std::to_string(k + 1), fn);
      }
    }
    if (branch_fuse) branch_fuse->visit_buffers("branch_fuse", fn);
    seg_head.visit_buffers("seg_head", fn);
    if (boundary_head) boundary_head->visit_buffers("boundary_head", fn);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_buffers() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_buffers([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  void zero_grads() {
    visit_params([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }
};

template <typename T>
std::int64_t count_params(Model<T>& model) {
  std::int64_t n = 0;
  model.visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace detail {

// Stem covers up to a divisor of 4 (7x7 stride-2 conv, then stride-2 max
// pool); any remaining factor of m_1 lands on stage 1's first block.
inline std::int64_t stem_divisor(std::int64_t m1) { return std::min<std::int64_t>(m1, 4); }

template <typename T>
Tensor<T> kaiming_conv(const Shape& shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  Tensor<T> w = randn<T>(shape, rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
  w.set_requires_grad(true);
  return w;
}

template <typename T>
ConvBnRelu<T> make_conv_bn(std::int64_t in_c, std::int64_t out_c, std::int64_t k,
                           std::int64_t stride, std::int64_t padding, bool relu_after, Rng& rng) {
  ConvBnRelu<T> c;
  c.spec.in_channels = in_c;
  c.spec.out_channels = out_c;
  c.spec.kernel_h = c.spec.kernel_w = k;
  c.spec.stride = stride;
  c.spec.padding = padding;
  c.w = kaiming_conv<T>({out_c, in_c, k, k}, rng);
  c.gamma = Tensor<T>::full({out_c}, T(1), true);
  c.beta = Tensor<T>::zeros({out_c}, true);
  c.bn = BatchNormState<T>::init(out_c);
  c.relu_after = relu_after;
  return c;
}

template <typename T>
ConvBnRelu<T> make_head(std::int64_t in_c, std::int64_t out_c, Rng& rng) {
  ConvBnRelu<T> c;
  c.spec.in_channels = in_c;
  c.spec.out_channels = out_c;
  c.spec.has_bias = true;
  c.w = kaiming_conv<T>({out_c, in_c, 1, 1}, rng);
  c.b = Tensor<T>::zeros({out_c}, true);
  c.has_bn = false;
  c.relu_after = false;
  return c;
}

template <typename T>
DwSepBlock<T> make_dwsep(std::int64_t in_c, std::int64_t out_c, Rng& rng) {
  DwSepBlock<T> d;
  d.in_channels = in_c;
  d.out_channels = out_c;
  d.dw_w = kaiming_conv<T>({in_c, 1, 3, 3}, rng);
  d.pw_w = kaiming_conv<T>({out_c, in_c, 1, 1}, rng);
  d.gamma = Tensor<T>::full({out_c}, T(1), true);
  d.beta = Tensor<T>::zeros({out_c}, true);
  d.bn = BatchNormState<T>::init(out_c);
  return d;
}

template <typename T>
ResidualBlock<T> make_block(std::int64_t in_c, std::int64_t out_c, std::int64_t stride, Rng& rng) {
  ResidualBlock<T> b;
  b.conv1 = make_conv_bn<T>(in_c, out_c, 3, stride, 1, true, rng);
  b.conv2 = make_conv_bn<T>(out_c, out_c, 3, 1, 1, false, rng);
  if (stride != 1 || in_c != out_c) {
    b.skip = make_conv_bn<T>(in_c, out_c, 1, stride, 0, false, rng);
  }
  return b;
}

// Channel width of stage `stage` (0-based).
inline std::int64_t stage_width(const ModelConfig& cfg, int stage) {
  return cfg.encoder.stage_channels[stage];
}

// Members of the pyramid group at divisor r: (stage, level) pairs, stage
// ascending. A stage contributes at most one level per resolution.
inline std::vector<std::pair<int, std::int64_t>> group_members(const ModelConfig& cfg,
                                                               std::int64_t r) {
  std::vector<std::pair<int, std::int64_t>> out;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t m = cfg.encoder.stage_strides[i];
    if (r % m != 0 || !is_power_of_two(r / m)) continue;
    const std::int64_t j = ilog2(r / m);
    if (j <= cfg.max_level(i)) out.emplace_back(i, j);
  }
  return out;
}

// Every divisor the SAP stage can emit under the exclusion flag.
inline std::vector<std::int64_t> sap_resolutions(const ModelConfig& cfg) {
  std::set<std::int64_t> rs;
  for (int i = 0; i < 4; ++i) {
    for (std::int64_t j = 0; j <= cfg.max_level(i); ++j) {
      const std::int64_t r = cfg.encoder.stage_strides[i] * (std::int64_t(1) << j);
      if (cfg.sap.exclude_quarter_resolution && r < 8) continue;
      rs.insert(r);
    }
  }
  return {rs.begin(), rs.end()};
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> model;
  model.config = config;
  Rng rng(mix_seed(seed));

  const auto& enc = config.encoder;
  const std::int64_t stem_div = detail::stem_divisor(enc.stage_strides[0]);
  model.stem = detail::make_conv_bn<T>(config.input_channels, enc.stage_channels[0], 7,
                                       stem_div >= 2 ? 2 : 1, 3, true, rng);
  model.stem_pool = stem_div >= 4;

  std::int64_t in_c = enc.stage_channels[0];
  std::int64_t reached = stem_div;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t out_c = enc.stage_channels[i];
    const std::int64_t stride = enc.stage_strides[i] / reached;
    reached = enc.stage_strides[i];
    for (std::int64_t k = 0; k < enc.blocks_per_stage[i]; ++k) {
      model.stages[i].push_back(detail::make_block<T>(in_c, out_c, k == 0 ? stride : 1, rng));
      in_c = out_c;
    }
  }

  if (config.sap.kernel_mode == SapKernelMode::DilatedConv3x3) {
    for (int i = 0; i < 4; ++i) {
      const std::int64_t c = enc.stage_channels[i];
      for (std::int64_t j = 1; j <= config.max_level(i); ++j) {
        // Initialized near an averaging kernel so the layer starts out
        // pooling-like; noise breaks symmetry.
        Tensor<T> w = randn<T>({c, 1, 3, 3}, rng, T(0.05), T(1) / T(9));
        w.set_requires_grad(true);
        model.sap_conv[{i, j}] = w;
      }
    }
  }

  for (std::int64_t r : detail::sap_resolutions(config)) {
    std::int64_t group_c = 0;
    for (const auto& [stage, j] : detail::group_members(config, r)) {
      group_c += detail::stage_width(config, stage);
    }
    if (group_c == 0) {
      throw config_error("build_model: resolution group 1/" + std::to_string(r) + " is empty");
    }
    model.fuse.emplace(r, detail::make_dwsep<T>(group_c, config.fusion_width, rng));
  }

  const auto ladder = config.pyramid_resolutions();  // ascending, starts at 8
  const std::size_t steps = ladder.size() - 1;
  for (int a = 0; a < config.branch_count; ++a) {
    std::vector<DwSepBlock<T>> branch;
    for (std::size_t k = 0; k < steps; ++k) {
      branch.push_back(detail::make_dwsep<T>(2 * config.fusion_width, config.fusion_width, rng));
    }
    model.branches.push_back(std::move(branch));
  }
  if (config.branch_count == 2 && config.branch_fusion == BranchFusion::Concat) {
    model.branch_fuse = detail::make_dwsep<T>(2 * config.fusion_width, config.fusion_width, rng);
  }

  model.seg_head = detail::make_head<T>(config.fusion_width, config.num_classes, rng);
  if (config.boundary_mode != BoundaryMode::Off) {
    const std::int64_t bc =
        config.boundary_mode == BoundaryMode::ClassBoundary ? config.num_classes + 1 : 2;
    model.boundary_head = detail::make_head<T>(config.fusion_width, bc, rng);
  }
  return model;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

template <typename T>
std::array<Tensor<T>, 4> encoder_forward(Model<T>& model, const Tensor<T>& input, bool training,
                                         Tape<T>* tape = nullptr) {
  if (input.shape().rank != 4) {
    throw shape_error("encoder_forward: expected N x C x H x W input, got " + input.shape().str());
  }
  if (input.shape()[1] != model.config.input_channels) {
    throw shape_error("encoder_forward: input has " + std::to_string(input.shape()[1]) +
                      " channels, model expects " + std::to_string(model.config.input_channels));
  }
  const std::int64_t mult = model.config.required_multiple();
  if (input.shape()[2] % mult != 0 || input.shape()[3] % mult != 0) {
    throw shape_error("encoder_forward: input " + std::to_string(input.shape()[2]) + "x" +
                      std::to_string(input.shape()[3]) +
                      " must have height and width divisible by " + std::to_string(mult));
  }

  Tensor<T> x = model.stem.forward(input, training, tape);
  if (model.stem_pool) x = max_pool2d(x, 3, 2, 1, tape);

  std::array<Tensor<T>, 4> outs;
  for (int i = 0; i < 4; ++i) {
    for (auto& block : model.stages[i]) x = block.forward(x, training, tape);
    outs[i] = x;
  }
  return outs;
}

template <typename T>
std::vector<SapEntry<T>> sap_expand(Model<T>& model, const std::array<Tensor<T>, 4>& features,
                                    Tape<T>* tape = nullptr) {
  const ModelConfig& cfg = model.config;
  std::vector<SapEntry<T>> out;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t m = cfg.encoder.stage_strides[i];
    for (std::int64_t j = 0; j <= cfg.max_level(i); ++j) {
      const std::int64_t r = m * (std::int64_t(1) << j);
      if (cfg.sap.exclude_quarter_resolution && r < 8) continue;
      if (j == 0) {
        out.push_back({i, j, r, features[i]});
        continue;
      }
      const std::int64_t s = std::int64_t(1) << j;
      if (features[i].shape()[2] < s || features[i].shape()[3] < s) {
        throw shape_error("sap_expand: stage " + std::to_string(i + 1) + " map " +
                          features[i].shape().str() + " too small for stride " +
                          std::to_string(s) + " pooling (output extent would be 0)");
      }
      Tensor<T> pooled;
      switch (cfg.sap.kernel_mode) {
        case SapKernelMode::KernelEqualsStride:
          pooled = avg_pool2d(features[i], s, s, 0, tape);
          break;
        case SapKernelMode::KernelTwoSPlusOne:
          pooled = avg_pool2d(features[i], 2 * s + 1, s, s, tape);
          break;
        case SapKernelMode::DilatedConv3x3: {
          ConvSpec spec;
          spec.in_channels = spec.out_channels = features[i].shape()[1];
          spec.kernel_h = spec.kernel_w = 3;
          spec.stride = s;
          spec.padding = s;
          spec.dilation = s;
          spec.groups = features[i].shape()[1];
          pooled = conv2d<T>(features[i], model.sap_conv.at({i, j}), std::nullopt, spec, tape);
          break;
        }
      }
      out.push_back({i, j, r, pooled});
    }
  }
  return out;
}

template <typename T>
FusedPyramid<T> mfm_fuse(Model<T>& model, const std::vector<SapEntry<T>>& entries, bool training,
                         Tape<T>* tape = nullptr) {
  std::map<std::int64_t, std::vector<const SapEntry<T>*>> groups;
  for (const auto& e : entries) groups[e.resolution].push_back(&e);

  FusedPyramid<T> pyramid;
  for (auto& [r, members] : groups) {
    auto it = model.fuse.find(r);
    if (it == model.fuse.end()) {
      throw shape_error("mfm_fuse: no fusion block for resolution 1/" + std::to_string(r));
    }
    if (members.empty()) {
      throw shape_error("mfm_fuse: resolution group 1/" + std::to_string(r) + " is empty");
    }
    std::vector<Tensor<T>> tensors;
    tensors.reserve(members.size());
    for (const auto* e : members) tensors.push_back(e->tensor);
    Tensor<T> cat = concat_channels(tensors, tape);
    if (cat.shape()[1] != it->second.in_channels) {
      throw shape_error("mfm_fuse: group 1/" + std::to_string(r) + " has " +
                        std::to_string(cat.shape()[1]) + " channels, fusion block expects " +
                        std::to_string(it->second.in_channels));
    }
    pyramid.emplace(r, it->second.forward(cat, training, tape));
  }
  return pyramid;
}

namespace detail {

template <typename T>
Tensor<T> run_branch(std::vector<DwSepBlock<T>>& steps, const FusedPyramid<T>& pyramid,
                     const std::vector<std::int64_t>& ladder, bool training, Tape<T>* tape) {
  auto level = [&](std::int64_t r) -> const Tensor<T>& {
    auto it = pyramid.find(r);
    if (it == pyramid.end()) {
      throw shape_error("decoder_forward: missing pyramid level 1/" + std::to_string(r));
    }
    return it->second;
  };
  // ladder is ascending {8, ..., deepest}; walk it deepest-first
  Tensor<T> x = level(ladder.back());
  std::size_t step = 0;
  for (auto it = ladder.rbegin() + 1; it != ladder.rend(); ++it, ++step) {
    const Tensor<T>& skip = level(*it);
    Tensor<T> up = bilinear_resize(x, skip.shape()[2], skip.shape()[3], tape);
    x = steps[step].forward(concat_channels<T>({up, skip}, tape), training, tape);
  }
  return x;
}

}  // namespace detail

template <typename T>
DecoderOut<T> decoder_forward(Model<T>& model, const FusedPyramid<T>& pyramid, bool training,
                              Tape<T>* tape = nullptr) {
  const auto ladder = model.config.pyramid_resolutions();
  Tensor<T> a = detail::run_branch(model.branches[0], pyramid, ladder, training, tape);

  DecoderOut<T> out;
  if (model.config.branch_count == 2) {
    Tensor<T> b = detail::run_branch(model.branches[1], pyramid, ladder, training, tape);
    if (model.config.boundary_mode != BoundaryMode::Off) out.boundary_features = b;
    if (model.config.branch_fusion == BranchFusion::Concat) {
      out.seg_features =
          model.branch_fuse->forward(concat_channels<T>({a, b}, tape), training, tape);
    } else {
      out.seg_features = a;
    }
  } else {
    out.seg_features = a;
    if (model.config.boundary_mode != BoundaryMode::Off) out.boundary_features = a;
  }
  return out;
}

template <typename T>
ForwardOut<T> model_forward(Model<T>& model, const Tensor<T>& input, bool training,
                            Tape<T>* tape = nullptr) {
  const auto features = encoder_forward(model, input, training, tape);
  const auto entries = sap_expand(model, features, tape);
  const auto pyramid = mfm_fuse(model, entries, training, tape);
  DecoderOut<T> dec = decoder_forward(model, pyramid, training, tape);

  ForwardOut<T> out;
  Tensor<T> seg8 = model.seg_head.forward(dec.seg_features, training, tape);
  out.seg_logits = bilinear_resize(seg8, input.shape()[2], input.shape()[3], tape);
  if (dec.boundary_features && model.boundary_head) {
    Tensor<T> b8 = model.boundary_head->forward(*dec.boundary_features, training, tape);
    if (model.config.cbs_output_size == CbsOutputSize::FullScale) {
      out.boundary_logits = bilinear_resize(b8, input.shape()[2], input.shape()[3], tape);
    } else {
      out.boundary_logits = b8;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch-norm sites and folding
// ---------------------------------------------------------------------------

template <typename T>
struct BnSite {
  std::string name;
  std::int64_t in_channels;
  // Runs just this site (conv + BN [+ ReLU]) on an input.
  std::function<Tensor<T>(const Tensor<T>&, bool, Tape<T>*)> forward;
  std::function<void()> fold;
  std::function<bool()> is_folded;
  // Direct access to the BN parameters for tests that want to randomize them.
  std::function<void(const std::function<void(Tensor<T>& gamma, Tensor<T>& beta,
                                              BatchNormState<T>& bn)>&)>
      mutate;
};

namespace detail {

template <typename T>
void add_site(std::vector<BnSite<T>>& sites, const std::string& name, ConvBnRelu<T>& c) {
  BnSite<T> s;
  s.name = name;
  s.in_channels = c.spec.in_channels;
  s.forward = [&c](const Tensor<T>& x, bool training, Tape<T>* tape) {
    return c.forward(x, training, tape);
  };
  s.fold = [&c]() { c.fold(); };
  s.is_folded = [&c]() { return !c.has_bn; };
  s.mutate = [&c](const std::function<void(Tensor<T>&, Tensor<T>&, BatchNormState<T>&)>& fn) {
    fn(c.gamma, c.beta, c.bn);
  };
  sites.push_back(std::move(s));
}

template <typename T>
void add_site(std::vector<BnSite<T>>& sites, const std::string& name, DwSepBlock<T>& d) {
  BnSite<T> s;
  s.name = name;
  s.in_channels = d.in_channels;
  s.forward = [&d](const Tensor<T>& x, bool training, Tape<T>* tape) {
    return d.forward(x, training, tape);
  };
  s.fold = [&d]() { d.fold(); };
  s.is_folded = [&d]() { return !d.has_bn; };
  s.mutate = [&d](const std::function<void(Tensor<T>&, Tensor<T>&, BatchNormState<T>&)>& fn) {
    fn(d.gamma, d.beta, d.bn);
  };
  sites.push_back(std::move(s));
}

}  // namespace detail

// Handles stay valid while the model object is alive and unmoved.
template <typename T>
std::vector<BnSite<T>> bn_sites(Model<T>& model) {
  std::vector<BnSite<T>> sites;
  detail::add_site(sites, "stem", model.stem);
  for (int i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < model.stages[i].size(); ++k) {
      const std::string p = "stage" + std::to_string(i + 1) + ".block" + std::to_string(k + 1);
      detail::add_site(sites, p + ".conv1", model.stages[i][k].conv1);
      detail::add_site(sites, p + ".conv2", model.stages[i][k].conv2);
      if (model.stages[i][k].skip) detail::add_site(sites, p + ".skip", *model.stages[i][k].skip);
    }
  }
  for (auto& [r, block] : model.fuse) {
    detail::add_site(sites, "fuse.r" + std::to_string(r), block);
  }
  for (std::size_t a = 0; a < model.branches.size(); ++a) {
    for (std::size_t k = 0; k < model.branches[a].size(); ++k) {
      detail::add_site(sites,
                       "branch" + std::to_string(a + 1) + ".step" + std::to_string(k + 1),
                       model.branches[a][k]);
    }
  }
  if (model.branch_fuse) detail::add_site(sites, "branch_fuse", *model.branch_fuse);
  return sites;
}

template <typename T>
void fold_all_bn(Model<T>& model) {
  if (model.folded) throw value_error("fold_all_bn: model already folded");
  for (auto& site : bn_sites(model)) site.fold();
  model.folded = true;
}

// Deep copy: freshly built skeleton with parameter and buffer data copied in.
template <typename T>
Model<T> clone_model(Model<T>& model) {
  Model<T> copy = build_model<T>(model.config, 0);
  auto src_p = model.named_params();
  auto dst_p = copy.named_params();
  if (model.folded) {
    fold_all_bn(copy);
    dst_p = copy.named_params();
  }
  if (src_p.size() != dst_p.size()) throw value_error("clone_model: parameter list mismatch");
  for (std::size_t i = 0; i < src_p.size(); ++i) {
    if (src_p[i].first != dst_p[i].first) throw value_error("clone_model: name mismatch");
    std::copy(src_p[i].second.data().begin(), src_p[i].second.data().end(),
              dst_p[i].second.data().begin());
  }
  auto src_b = model.named_buffers();
  auto dst_b = copy.named_buffers();
  for (std::size_t i = 0; i < src_b.size(); ++i) {
    std::copy(src_b[i].second.data().begin(), src_b[i].second.data().end(),
              dst_b[i].second.data().begin());
  }
  return copy;
}

}  // namespace msf
