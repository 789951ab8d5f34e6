#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msf/common.hpp"
#include "msf/labels.hpp"

namespace msf {

enum class SapKernelMode { KernelEqualsStride, KernelTwoSPlusOne, DilatedConv3x3 };
enum class BranchFusion { Concat, None };
enum class CbsOutputSize { EighthScale, FullScale };

namespace detail {

inline bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

inline std::int64_t ilog2(std::int64_t v) {
  std::int64_t r = 0;
  while (v > 1) {
    v >>= 1;
    ++r;
  }
  return r;
}

}  // namespace detail

struct EncoderConfig {
  std::array<std::int64_t, 4> stage_channels{64, 128, 256, 512};
  std::array<std::int64_t, 4> stage_strides{4, 8, 16, 32};  // cumulative divisors m_i
  std::array<std::int64_t, 4> blocks_per_stage{2, 2, 2, 2};

  void validate() const {
    for (int i = 0; i < 4; ++i) {
      if (stage_channels[i] < 1) throw config_error("encoder: stage_channels must be >= 1");
      if (blocks_per_stage[i] < 1) throw config_error("encoder: blocks_per_stage must be >= 1");
      if (!detail::is_power_of_two(stage_strides[i])) {
        throw config_error("encoder: stage_strides must be powers of two");
      }
      if (i > 0 && stage_strides[i] <= stage_strides[i - 1]) {
        throw config_error("encoder: stage_strides must be strictly increasing");
      }
    }
  }
};

struct SapConfig {
  std::int64_t levels = 5;  // pooling count J per stage
  bool pool_to_end = false;
  SapKernelMode kernel_mode = SapKernelMode::KernelTwoSPlusOne;
  bool exclude_quarter_resolution = true;

  void validate() const {
    if (levels < 0 || levels > 5) throw config_error("sap: levels must be in [0, 5]");
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  SapConfig sap;
  std::int64_t input_channels = 3;
  std::int64_t fusion_width = 128;
  std::int64_t num_classes = 19;
  int branch_count = 2;
  BranchFusion branch_fusion = BranchFusion::Concat;
  BoundaryMode boundary_mode = BoundaryMode::ClassBoundary;
  CbsOutputSize cbs_output_size = CbsOutputSize::EighthScale;

  void validate() const {
    encoder.validate();
    sap.validate();
    if (input_channels < 1) throw config_error("model: input_channels must be >= 1");
    if (fusion_width < 1) throw config_error("model: fusion_width must be >= 1");
    if (num_classes < 2) throw config_error("model: num_classes must be >= 2");
    if (branch_count != 1 && branch_count != 2) {
      throw config_error("model: branch_count must be 1 or 2");
    }
    if (branch_count == 1 && branch_fusion == BranchFusion::Concat) {
      throw config_error("model: branch_fusion=concat requires branch_count=2");
    }
    const auto levels = pyramid_resolutions();
    if (levels.empty() || levels.front() != 8) {
      throw config_error("model: pyramid must include the 1/8 resolution level");
    }
    for (std::size_t i = 1; i < levels.size(); ++i) {
      if (levels[i] != levels[i - 1] * 2) {
        throw config_error("model: pyramid resolutions must be contiguous powers of two; gap at " +
                           std::to_string(levels[i - 1] * 2));
      }
    }
  }

  // Deepest feature divisor; inputs must have H, W divisible by this.
  std::int64_t required_multiple() const {
    return encoder.stage_strides[3] * (std::int64_t(1) << sap.levels);
  }

  // Highest pooling index for stage i (0-based).
  std::int64_t max_level(int stage) const {
    if (!sap.pool_to_end) return sap.levels;
    return detail::ilog2(required_multiple() / encoder.stage_strides[stage]);
  }

  // Sorted set of pyramid divisors after the fine-resolution exclusion.
  std::vector<std::int64_t> pyramid_resolutions() const {
    std::set<std::int64_t> rs;
    for (int i = 0; i < 4; ++i) {
      for (std::int64_t j = 0; j <= max_level(i); ++j) {
        const std::int64_t r = encoder.stage_strides[i] * (std::int64_t(1) << j);
        if (sap.exclude_quarter_resolution && r < 8) continue;
        rs.insert(r);
      }
    }
    return {rs.begin(), rs.end()};
  }
};

struct LossConfig {
  double lambda = 1.0;
  int ignore_index = kIgnoreIndex;
  CbsOutputSize cbs_output_size = CbsOutputSize::EighthScale;

  void validate() const {
    if (lambda < 0) throw config_error("loss: lambda must be >= 0");
    if (ignore_index < 0 || ignore_index > 255) {
      throw config_error("loss: ignore_index must fit in a label byte");
    }
  }
};

struct AugmentConfig {
  double flip_prob = 0.5;
  double scale_min = 0.5;
  double scale_max = 2.0;
  std::int64_t crop_h = 0;  // 0 = full input size
  std::int64_t crop_w = 0;
  std::vector<double> channel_means{0.5, 0.5, 0.5};
};

struct TrainConfig {
  std::int64_t batch_size = 12;
  double weight_decay = 2.5e-5;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  std::int64_t epochs = 1;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  AugmentConfig aug;

  void validate() const {
    if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (weight_decay < 0) throw config_error("train: weight_decay must be >= 0");
    if (lr_min > lr_max) throw config_error("train: lr_min must be <= lr_max");
    if (epochs < 1) throw config_error("train: epochs must be >= 1");
    if (checkpoint_every < 0) throw config_error("train: checkpoint_every must be >= 0");
    if (aug.flip_prob < 0 || aug.flip_prob > 1) {
      throw config_error("train: flip_prob must be in [0, 1]");
    }
    if (aug.scale_min > aug.scale_max || aug.scale_min <= 0) {
      throw config_error("train: scale range must satisfy 0 < scale_min <= scale_max");
    }
    if (aug.crop_h < 0 || aug.crop_w < 0 || (aug.crop_h == 0) != (aug.crop_w == 0)) {
      throw config_error("train: crop_h and crop_w must both be 0 (full size) or both positive");
    }
  }
};

// ---------------------------------------------------------------------------
// enum <-> string
// ---------------------------------------------------------------------------

inline std::string to_string(SapKernelMode m) {
  switch (m) {
    case SapKernelMode::KernelEqualsStride: return "kernel_equals_stride";
    case SapKernelMode::KernelTwoSPlusOne: return "kernel_two_s_plus_one";
    case SapKernelMode::DilatedConv3x3: return "dilated_conv3x3";
  }
  throw value_error("unknown SapKernelMode");
}

inline std::string to_string(BranchFusion f) {
  return f == BranchFusion::Concat ? "concat" : "none";
}

inline std::string to_string(BoundaryMode m) {
  switch (m) {
    case BoundaryMode::ClassBoundary: return "class";
    case BoundaryMode::ZeroOneBoundary: return "zero_one";
    case BoundaryMode::Off: return "off";
  }
  throw value_error("unknown BoundaryMode");
}

inline std::string to_string(CbsOutputSize s) {
  return s == CbsOutputSize::EighthScale ? "eighth" : "full";
}

inline SapKernelMode parse_kernel_mode(const std::string& s) {
  if (s == "kernel_equals_stride") return SapKernelMode::KernelEqualsStride;
  if (s == "kernel_two_s_plus_one") return SapKernelMode::KernelTwoSPlusOne;
  if (s == "dilated_conv3x3") return SapKernelMode::DilatedConv3x3;
  throw config_error("unknown kernel mode '" + s +
                     "' (expected kernel_equals_stride, kernel_two_s_plus_one or dilated_conv3x3)");
}

inline BranchFusion parse_branch_fusion(const std::string& s) {
  if (s == "concat") return BranchFusion::Concat;
  if (s == "none") return BranchFusion::None;
  throw config_error("unknown branch fusion '" + s + "' (expected concat or none)");
}

inline BoundaryMode parse_boundary_mode(const std::string& s) {
  if (s == "class") return BoundaryMode::ClassBoundary;
  if (s == "zero_one") return BoundaryMode::ZeroOneBoundary;
  if (s == "off") return BoundaryMode::Off;
  throw config_error("unknown boundary mode '" + s + "' (expected class, zero_one or off)");
}

inline CbsOutputSize parse_cbs_output_size(const std::string& s) {
  if (s == "eighth") return CbsOutputSize::EighthScale;
  if (s == "full") return CbsOutputSize::FullScale;
  throw config_error("unknown cbs output size '" + s + "' (expected eighth or full)");
}

// ---------------------------------------------------------------------------
// flat key=value text
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::int64_t parse_i64(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw config_error(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw config_error(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw config_error(key + ": expected a real number, got '" + v + "'");
  }
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

inline std::array<std::int64_t, 4> parse_i64_quad(const std::string& key, const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() != 4) {
    throw config_error(key + ": expected 4 comma-separated integers, got '" + v + "'");
  }
  std::array<std::int64_t, 4> out{};
  for (int i = 0; i < 4; ++i) out[i] = parse_i64(key, parts[i]);
  return out;
}

inline std::vector<double> parse_f64_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& p : split_list(v)) out.push_back(parse_f64(key, p));
  return out;
}

inline std::string join_i64(const std::array<std::int64_t, 4>& a) {
  std::string s;
  for (int i = 0; i < 4; ++i) {
    if (i) s += ",";
    s += std::to_string(a[i]);
  }
  return s;
}

inline std::string fmt_f64(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string join_f64(const std::vector<double>& a) {
  std::string s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i) s += ",";
    s += fmt_f64(a[i]);
  }
  return s;
}

}  // namespace detail

// Parsed `key = value` lines in file order. '#' starts a comment; blank lines
// are skipped; duplicate keys keep the last value.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw config_error("config line " + std::to_string(line_no) + ": expected key = value, got '" +
                         line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw config_error("config line " + std::to_string(line_no) + ": empty key");
    }
    out.emplace_back(key, value);
  }
  return out;
}

// Bundle of every configurable section, round-trippable through flat text.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  BoundaryConfig boundary;
  TrainConfig train;

  void validate() const {
    model.validate();
    LossConfig l = loss;
    l.cbs_output_size = model.cbs_output_size;
    l.validate();
    boundary.validate();
    train.validate();
  }
};

// Applies one key. Unknown keys are an error (typos never pass silently).
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  auto& m = cfg.model;
  if (key == "model.stage_channels") m.encoder.stage_channels = parse_i64_quad(key, value);
  else if (key == "model.stage_strides") m.encoder.stage_strides = parse_i64_quad(key, value);
  else if (key == "model.blocks_per_stage") m.encoder.blocks_per_stage = parse_i64_quad(key, value);
  else if (key == "model.sap_levels") m.sap.levels = parse_i64(key, value);
  else if (key == "model.sap_pool_to_end") m.sap.pool_to_end = parse_flag(key, value);
  else if (key == "model.sap_kernel_mode") m.sap.kernel_mode = parse_kernel_mode(value);
  else if (key == "model.exclude_quarter_resolution")
    m.sap.exclude_quarter_resolution = parse_flag(key, value);
  else if (key == "model.input_channels") m.input_channels = parse_i64(key, value);
  else if (key == "model.fusion_width") m.fusion_width = parse_i64(key, value);
  else if (key == "model.num_classes") m.num_classes = parse_i64(key, value);
  else if (key == "model.branch_count") m.branch_count = static_cast<int>(parse_i64(key, value));
  else if (key == "model.branch_fusion") m.branch_fusion = parse_branch_fusion(value);
  else if (key == "model.boundary_mode") m.boundary_mode = parse_boundary_mode(value);
  else if (key == "model.cbs_output_size") m.cbs_output_size = parse_cbs_output_size(value);
  else if (key == "loss.lambda") cfg.loss.lambda = parse_f64(key, value);
  else if (key == "loss.ignore_index")
    cfg.loss.ignore_index = static_cast<int>(parse_i64(key, value));
  else if (key == "boundary.epsilon") cfg.boundary.epsilon = parse_i64(key, value);
  else if (key == "train.batch_size") cfg.train.batch_size = parse_i64(key, value);
  else if (key == "train.weight_decay") cfg.train.weight_decay = parse_f64(key, value);
  else if (key == "train.lr_max") cfg.train.lr_max = parse_f64(key, value);
  else if (key == "train.lr_min") cfg.train.lr_min = parse_f64(key, value);
  else if (key == "train.epochs") cfg.train.epochs = parse_i64(key, value);
  else if (key == "train.seed") cfg.train.seed = parse_u64(key, value);
  else if (key == "train.checkpoint_every") cfg.train.checkpoint_every = parse_i64(key, value);
  else if (key == "train.flip_prob") cfg.train.aug.flip_prob = parse_f64(key, value);
  else if (key == "train.scale_min") cfg.train.aug.scale_min = parse_f64(key, value);
  else if (key == "train.scale_max") cfg.train.aug.scale_max = parse_f64(key, value);
  else if (key == "train.crop_h") cfg.train.aug.crop_h = parse_i64(key, value);
  else if (key == "train.crop_w") cfg.train.aug.crop_w = parse_i64(key, value);
  else if (key == "train.channel_means") cfg.train.aug.channel_means = parse_f64_list(key, value);
  else
    throw config_error("unknown config key '" + key + "'");
}

inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  for (const auto& [k, v] : parse_kv_text(text)) apply_config_key(cfg, k, v);
}

inline std::string serialize_model_config(const ModelConfig& m) {
  using namespace detail;
  std::string s;
  s += "model.stage_channels = " + join_i64(m.encoder.stage_channels) + "\n";
  s += "model.stage_strides = " + join_i64(m.encoder.stage_strides) + "\n";
  s += "model.blocks_per_stage = " + join_i64(m.encoder.blocks_per_stage) + "\n";
  s += "model.sap_levels = " + std::to_string(m.sap.levels) + "\n";
  s += "model.sap_pool_to_end = " + std::string(m.sap.pool_to_end ? "true" : "false") + "\n";
  s += "model.sap_kernel_mode = " + to_string(m.sap.kernel_mode) + "\n";
  s += "model.exclude_quarter_resolution = " +
       std::string(m.sap.exclude_quarter_resolution ? "true" : "false") + "\n";
  s += "model.input_channels = " + std::to_string(m.input_channels) + "\n";
  s += "model.fusion_width = " + std::to_string(m.fusion_width) + "\n";
  s += "model.num_classes = " + std::to_string(m.num_classes) + "\n";
  s += "model.branch_count = " + std::to_string(m.branch_count) + "\n";
  s += "model.branch_fusion = " + to_string(m.branch_fusion) + "\n";
  s += "model.boundary_mode = " + to_string(m.boundary_mode) + "\n";
  s += "model.cbs_output_size = " + to_string(m.cbs_output_size) + "\n";
  return s;
}

inline std::string serialize_run_config(const RunConfig& cfg) {
  using namespace detail;
  std::string s = serialize_model_config(cfg.model);
  s += "loss.lambda = " + fmt_f64(cfg.loss.lambda) + "\n";
  s += "loss.ignore_index = " + std::to_string(cfg.loss.ignore_index) + "\n";
  s += "boundary.epsilon = " + std::to_string(cfg.boundary.epsilon) + "\n";
  s += "train.batch_size = " + std::to_string(cfg.train.batch_size) + "\n";
  s += "train.weight_decay = " + fmt_f64(cfg.train.weight_decay) + "\n";
  s += "train.lr_max = " + fmt_f64(cfg.train.lr_max) + "\n";
  s += "train.lr_min = " + fmt_f64(cfg.train.lr_min) + "\n";
  s += "train.epochs = " + std::to_string(cfg.train.epochs) + "\n";
  s += "train.seed = " + std::to_string(cfg.train.seed) + "\n";
  s += "train.checkpoint_every = " + std::to_string(cfg.train.checkpoint_every) + "\n";
  s += "train.flip_prob = " + fmt_f64(cfg.train.aug.flip_prob) + "\n";
  s += "train.scale_min = " + fmt_f64(cfg.train.aug.scale_min) + "\n";
  s += "train.scale_max = " + fmt_f64(cfg.train.aug.scale_max) + "\n";
  s += "train.crop_h = " + std::to_string(cfg.train.aug.crop_h) + "\n";
  s += "train.crop_w = " + std::to_string(cfg.train.aug.crop_w) + "\n";
  s += "train.channel_means = " + join_f64(cfg.train.aug.channel_means) + "\n";
  return s;
}

inline ModelConfig parse_model_config(const std::string& text) {
  RunConfig cfg;
  for (const auto& [k, v] : parse_kv_text(text)) {
    if (k.rfind("model.", 0) != 0) {
      throw config_error("model config block: unexpected key '" + k + "'");
    }
    apply_config_key(cfg, k, v);
  }
  cfg.model.validate();
  return cfg.model;
}

}  // namespace msf
