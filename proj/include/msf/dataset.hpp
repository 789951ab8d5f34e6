#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msf/config.hpp"
#include "msf/t4.hpp"

namespace msf {

struct SampleRef {
  std::string id;
  std::filesystem::path image_path;   // f32, C x H x W
  std::filesystem::path labels_path;  // u8, H x W
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<SampleRef> samples;
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

struct SynthConfig {
  std::int64_t num_samples = 8;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t num_classes = 3;  // class 0 = background
  std::int64_t min_shapes = 1;
  std::int64_t max_shapes = 3;
  bool rectangles = true;
  bool ellipses = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_samples < 1) throw config_error("synth: num_samples must be >= 1");
    if (height < 4 || width < 4) throw config_error("synth: dims must be >= 4");
    if (num_classes < 2 || num_classes > 250) {
      throw config_error("synth: num_classes must be in [2, 250]");
    }
    if (min_shapes < 1 || max_shapes < min_shapes) {
      throw config_error("synth: need 1 <= min_shapes <= max_shapes");
    }
    if (!rectangles && !ellipses) throw config_error("synth: enable at least one shape kind");
  }
};

// Distinct base color per class: an axis-aligned grid over [0.1, 0.9]^3 with
// spacing wide enough that sigma=0.05 noise keeps nearest-color
// classification right almost everywhere.
inline std::array<double, 3> class_color(std::int64_t cls, std::int64_t num_classes) {
  std::int64_t levels = 2;
  while (levels * levels * levels < num_classes) ++levels;
  auto axis = [&](std::int64_t i) {
    return levels == 1 ? 0.5 : 0.1 + 0.8 * static_cast<double>(i) / static_cast<double>(levels - 1);
  };
  return {axis(cls % levels), axis((cls / levels) % levels), axis(cls / (levels * levels))};
}

namespace detail {

inline std::string sample_id(std::int64_t index) {
  std::string s = std::to_string(index);
  while (s.size() < 4) s.insert(s.begin(), '0');
  return "sample_" + s;
}

}  // namespace detail

inline DatasetIndex gen_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw io_error("gen_synthetic: cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetIndex index;
  index.root = out_dir;
  index.channels = 3;
  index.height = cfg.height;
  index.width = cfg.width;

  std::ofstream manifest(out_dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw io_error("gen_synthetic: cannot write manifest in '" + out_dir.string() + "'");

  const std::int64_t h = cfg.height, w = cfg.width;
  for (std::int64_t s = 0; s < cfg.num_samples; ++s) {
    Rng rng(derive_seed(cfg.seed, 0x5A3B17ULL, static_cast<std::uint64_t>(s)));

    LabelMap labels;
    labels.height = h;
    labels.width = w;
    labels.ids.assign(static_cast<std::size_t>(h * w), 0);

    std::uniform_int_distribution<std::int64_t> n_shapes(cfg.min_shapes, cfg.max_shapes);
    std::uniform_int_distribution<std::int64_t> cls_dist(1, cfg.num_classes - 1);
    std::uniform_real_distribution<double> cy_dist(0.2, 0.8), cx_dist(0.2, 0.8);
    std::uniform_real_distribution<double> half_dist(0.12, 0.3);
    std::uniform_int_distribution<int> kind_dist(0, 1);
    const std::int64_t shapes = n_shapes(rng);
    for (std::int64_t k = 0; k < shapes; ++k) {
      const auto cls = static_cast<std::uint8_t>(cls_dist(rng));
      const double cy = cy_dist(rng) * h;
      const double cx = cx_dist(rng) * w;
      const double ry = half_dist(rng) * h;
      const double rx = half_dist(rng) * w;
      int kind = kind_dist(rng);
      if (!cfg.rectangles) kind = 1;
      if (!cfg.ellipses) kind = 0;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double dy = (static_cast<double>(y) + 0.5 - cy);
          const double dx = (static_cast<double>(x) + 0.5 - cx);
          const bool inside = kind == 0
                                  ? (std::abs(dy) <= ry && std::abs(dx) <= rx)
                                  : ((dy * dy) / (ry * ry) + (dx * dx) / (rx * rx) <= 1.0);
          if (inside) labels.ids[y * w + x] = cls;
        }
      }
    }

    Tensor<float> image = Tensor<float>::zeros({3, h, w});
    std::normal_distribution<double> noise(0.0, 0.05);
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const auto color = class_color(labels.ids[y * w + x], cfg.num_classes);
        for (std::int64_t c = 0; c < 3; ++c) {
          image.data()[(c * h + y) * w + x] = static_cast<float>(color[c] + noise(rng));
        }
      }
    }

    const std::string id = detail::sample_id(s);
    SampleRef ref;
    ref.id = id;
    ref.image_path = out_dir / (id + "_image.t4");
    ref.labels_path = out_dir / (id + "_labels.t4");
    write_t4_tensor(ref.image_path, image);
    write_t4_labels(ref.labels_path, labels);
    manifest << id << "\n";
    index.samples.push_back(std::move(ref));
  }
  manifest.close();
  if (!manifest) throw io_error("gen_synthetic: manifest write failed");
  return index;
}

inline DatasetIndex load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest) throw io_error("load_dataset: missing manifest '" + manifest_path.string() + "'");

  DatasetIndex index;
  index.root = root;
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    SampleRef ref;
    ref.id = id;
    ref.image_path = root / (id + "_image.t4");
    ref.labels_path = root / (id + "_labels.t4");
    if (!std::filesystem::exists(ref.image_path)) {
      throw io_error("load_dataset: sample '" + id + "' is missing its image file");
    }
    if (!std::filesystem::exists(ref.labels_path)) {
      throw io_error("load_dataset: sample '" + id + "' is missing its labels file");
    }
    const T4Data img = read_t4(ref.image_path);
    const T4Data lab = read_t4(ref.labels_path);
    if (img.dtype != T4Dtype::F32 || img.dims.size() != 3) {
      throw io_error("load_dataset: sample '" + id + "': image must be a rank-3 f32 tensor");
    }
    if (lab.dtype != T4Dtype::U8 || lab.dims.size() != 2) {
      throw io_error("load_dataset: sample '" + id + "': labels must be a rank-2 u8 map");
    }
    if (img.dims[1] != lab.dims[0] || img.dims[2] != lab.dims[1]) {
      throw io_error("load_dataset: sample '" + id + "': image and labels dimensions differ");
    }
    const auto c = static_cast<std::int64_t>(img.dims[0]);
    const auto h = static_cast<std::int64_t>(img.dims[1]);
    const auto w = static_cast<std::int64_t>(img.dims[2]);
    if (index.samples.empty()) {
      index.channels = c;
      index.height = h;
      index.width = w;
    } else if (c != index.channels) {
      throw io_error("load_dataset: sample '" + id + "' has " + std::to_string(c) +
                     " channels, expected " + std::to_string(index.channels));
    }
    index.samples.push_back(std::move(ref));
  }
  if (index.samples.empty()) {
    throw io_error("load_dataset: manifest '" + manifest_path.string() + "' lists no samples");
  }
  return index;
}

template <typename T>
std::pair<Tensor<T>, LabelMap> load_sample(const SampleRef& ref) {
  const Tensor<float> img = read_t4_tensor(ref.image_path);
  LabelMap labels = read_t4_labels(ref.labels_path);
  if constexpr (std::is_same_v<T, float>) {
    return {img, std::move(labels)};
  } else {
    Tensor<T> out = Tensor<T>::zeros(img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i) out.data()[i] = static_cast<T>(img.data()[i]);
    return {out, std::move(labels)};
  }
}

}  // namespace msf
