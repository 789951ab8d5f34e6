#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msf/common.hpp"

namespace msf {

inline constexpr std::uint8_t kIgnoreIndex = 255;

// H x W grid of class ids in [0, K) with 255 as the ignore sentinel.
// BoundaryMap shares the layout: 0 = non-boundary, nonzero = boundary id
// (class id + 1 in class mode, 1 in 0/1 mode), 255 preserved.
struct LabelMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> ids;

  LabelMap() = default;
  LabelMap(std::int64_t h, std::int64_t w, std::uint8_t fill = 0)
      : height(h), width(w), ids(static_cast<std::size_t>(h * w), fill) {
    if (h < 1 || w < 1) throw shape_error("LabelMap: dimensions must be >= 1");
  }

  std::uint8_t& at(std::int64_t y, std::int64_t x) { return ids[y * width + x]; }
  std::uint8_t at(std::int64_t y, std::int64_t x) const { return ids[y * width + x]; }

  bool operator==(const LabelMap& o) const {
    return height == o.height && width == o.width && ids == o.ids;
  }
};

using BoundaryMap = LabelMap;

enum class BoundaryMode { ClassBoundary, ZeroOneBoundary, Off };

struct BoundaryConfig {
  std::int64_t epsilon = 1;  // Chebyshev radius in pixels
  BoundaryMode mode = BoundaryMode::ClassBoundary;

  void validate() const {
    if (epsilon < 1) throw config_error("BoundaryConfig: epsilon must be >= 1");
    if (mode == BoundaryMode::Off) {
      throw config_error("BoundaryConfig: boundary generation requires a non-Off mode");
    }
  }
};

// A pixel is a boundary pixel iff some non-ignore pixel within Chebyshev
// distance epsilon carries a different class. Ignore pixels neither become
// boundary nor trigger boundary status in their neighbours. Class-mode ids
// are stored as class+1 so that semantic class 0 stays distinguishable from
// the non-boundary id 0.
inline BoundaryMap boundary_labels(const LabelMap& labels, const BoundaryConfig& config) {
  config.validate();
  const std::int64_t h = labels.height, w = labels.width, eps = config.epsilon;
  BoundaryMap out(h, w, 0);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::uint8_t c = labels.at(y, x);
      if (c == kIgnoreIndex) {
        out.at(y, x) = kIgnoreIndex;
        continue;
      }
      bool boundary = false;
      const std::int64_t y_lo = std::max<std::int64_t>(0, y - eps);
      const std::int64_t y_hi = std::min(h - 1, y + eps);
      const std::int64_t x_lo = std::max<std::int64_t>(0, x - eps);
      const std::int64_t x_hi = std::min(w - 1, x + eps);
      for (std::int64_t ny = y_lo; ny <= y_hi && !boundary; ++ny) {
        for (std::int64_t nx = x_lo; nx <= x_hi; ++nx) {
          const std::uint8_t nc = labels.at(ny, nx);
          if (nc != kIgnoreIndex && nc != c) {
            boundary = true;
            break;
          }
        }
      }
      if (boundary) {
        out.at(y, x) = config.mode == BoundaryMode::ClassBoundary
                           ? static_cast<std::uint8_t>(c + 1)
                           : std::uint8_t{1};
      }
    }
  }
  return out;
}

// Nearest-neighbour downsampling keeping the top-left sample of each
// factor x factor cell. Never invents ids, so it is safe for both label and
// boundary grids.
inline LabelMap downsample_labels(const LabelMap& labels, std::int64_t factor) {
  if (factor < 1) throw config_error("downsample_labels: factor must be >= 1");
  if (labels.height % factor != 0 || labels.width % factor != 0) {
    throw shape_error("downsample_labels: " + std::to_string(labels.height) + "x" +
                      std::to_string(labels.width) + " not divisible by factor " +
                      std::to_string(factor));
  }
  LabelMap out(labels.height / factor, labels.width / factor, 0);
  for (std::int64_t y = 0; y < out.height; ++y) {
    for (std::int64_t x = 0; x < out.width; ++x) {
      out.at(y, x) = labels.at(y * factor, x * factor);
    }
  }
  return out;
}

struct LabelReport {
  std::vector<std::pair<std::uint8_t, std::int64_t>> out_of_range;  // id -> pixel count
  double ignore_fraction = 0.0;
  std::vector<std::int64_t> class_counts;  // length K
  bool ok() const { return out_of_range.empty(); }
};

inline LabelReport validate_labels(const LabelMap& labels, std::int64_t num_classes) {
  LabelReport report;
  report.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  std::array<std::int64_t, 256> histogram{};
  for (std::uint8_t id : labels.ids) ++histogram[id];
  for (int id = 0; id < 256; ++id) {
    if (histogram[id] == 0) continue;
    if (id == kIgnoreIndex) continue;
    if (id < num_classes) {
      report.class_counts[id] = histogram[id];
    } else {
      report.out_of_range.emplace_back(static_cast<std::uint8_t>(id), histogram[id]);
    }
  }
  report.ignore_fraction =
      static_cast<double>(histogram[kIgnoreIndex]) / static_cast<double>(labels.ids.size());
  return report;
}

inline LabelMap flip_horizontal(const LabelMap& labels) {
  LabelMap out(labels.height, labels.width, 0);
  for (std::int64_t y = 0; y < labels.height; ++y) {
    for (std::int64_t x = 0; x < labels.width; ++x) {
      out.at(y, x) = labels.at(y, labels.width - 1 - x);
    }
  }
  return out;
}

}  // namespace msf
