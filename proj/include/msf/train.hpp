#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "msf/augment.hpp"
#include "msf/checkpoint.hpp"
#include "msf/dataset.hpp"
#include "msf/loss.hpp"
#include "msf/model.hpp"
#include "msf/optim.hpp"

namespace msf {

struct StepLog {
  std::int64_t step = 0;
  double lr = 0;
  double seg_loss = 0;
  double boundary_loss = 0;
  double total = 0;
  double wall_ms = 0;
};

struct FitResult {
  std::vector<StepLog> log;
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;
};

// Fields excluded when comparing logs for determinism (wall-clock noise).
inline const std::vector<std::string>& volatile_log_fields() {
  static const std::vector<std::string> fields{"wall_ms"};
  return fields;
}

inline std::string step_log_json(const StepLog& s) {
  nlohmann::json j;
  j["step"] = s.step;
  j["lr"] = s.lr;
  j["seg_loss"] = s.seg_loss;
  j["boundary_loss"] = s.boundary_loss;
  j["total"] = s.total;
  j["wall_ms"] = s.wall_ms;
  return j.dump();
}

// Drops the volatile fields from each JSONL line so two runs of the same
// seed compare equal.
inline std::string strip_volatile_fields(const std::string& jsonl) {
  std::string out;
  std::istringstream is(jsonl);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    for (const auto& f : volatile_log_fields()) j.erase(f);
    out += j.dump();
    out += "\n";
  }
  return out;
}

namespace detail {

inline int worker_threads() {
  const char* env = std::getenv("MSF_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v > 0 ? v : 1;
}

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<LabelMap> labels;
  std::optional<std::vector<BoundaryMap>> boundary_gt;
};

// Assembles one batch deterministically: every random decision derives from
// (run seed, epoch, global sample position), so prefetching cannot change
// results.
template <typename T>
Batch<T> make_batch(const DatasetIndex& data, const std::vector<std::int64_t>& order,
                    std::int64_t epoch, std::int64_t begin, std::int64_t end,
                    const RunConfig& cfg) {
  const std::int64_t n = end - begin;
  Batch<T> batch;
  batch.labels.reserve(n);
  const bool want_boundary = cfg.model.boundary_mode != BoundaryMode::Off;
  if (want_boundary) batch.boundary_gt.emplace();

  BoundaryConfig bcfg = cfg.boundary;
  bcfg.mode = cfg.model.boundary_mode;

  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t sample_idx = order[begin + i];
    auto [image, labels] = load_sample<T>(data.samples[sample_idx]);
    Rng rng(derive_seed(cfg.train.seed, 0xA46D31ULL, static_cast<std::uint64_t>(epoch),
                        static_cast<std::uint64_t>(begin + i)));
    AugmentedSample<T> aug = augment_sample(image, labels, cfg.train.aug, rng);

    if (!batch.images.defined()) {
      batch.images = Tensor<T>::zeros(
          {n, aug.image.shape()[0], aug.image.shape()[1], aug.image.shape()[2]});
    }
    if (aug.image.shape()[0] != batch.images.shape()[1] ||
        aug.image.shape()[1] != batch.images.shape()[2] ||
        aug.image.shape()[2] != batch.images.shape()[3]) {
      throw shape_error("fit: sample '" + data.samples[sample_idx].id +
                        "' does not match the batch shape; set train.crop_h/crop_w for "
                        "mixed-size datasets");
    }
    std::copy(aug.image.data().begin(), aug.image.data().end(),
              batch.images.data().begin() + i * aug.image.numel());

    if (want_boundary) {
      if (cfg.model.cbs_output_size == CbsOutputSize::EighthScale) {
        batch.boundary_gt->push_back(boundary_labels(downsample_labels(aug.labels, 8), bcfg));
      } else {
        batch.boundary_gt->push_back(boundary_labels(aug.labels, bcfg));
      }
    }
    batch.labels.push_back(std::move(aug.labels));
  }
  return batch;
}

}  // namespace detail

// Full training loop: augment -> forward -> combined loss -> backward ->
// Adam with cosine LR. Writes log.jsonl and a checkpoint directory under
// out_dir. Deterministic for a fixed seed and binary.
template <typename T>
FitResult fit(Model<T>& model, const DatasetIndex& data, const RunConfig& cfg,
              const std::filesystem::path& out_dir) {
  cfg.validate();
  if (data.samples.empty()) throw value_error("fit: dataset is empty");

  LossConfig loss_cfg = cfg.loss;
  loss_cfg.cbs_output_size = cfg.model.cbs_output_size;
  RunConfig run = cfg;
  run.loss = loss_cfg;

  const std::int64_t crop_h = cfg.train.aug.crop_h > 0 ? cfg.train.aug.crop_h : data.height;
  const std::int64_t crop_w = cfg.train.aug.crop_w > 0 ? cfg.train.aug.crop_w : data.width;
  const std::int64_t mult = model.config.required_multiple();
  if (crop_h % mult != 0 || crop_w % mult != 0) {
    throw config_error("fit: crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                       " must be divisible by " + std::to_string(mult));
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw io_error("fit: cannot create '" + out_dir.string() + "': " + ec.message());
  const auto log_path = out_dir / "log.jsonl";
  std::ofstream log_file(log_path, std::ios::trunc);
  if (!log_file) throw io_error("fit: cannot write '" + log_path.string() + "'");

  const auto n = static_cast<std::int64_t>(data.samples.size());
  const std::int64_t steps_per_epoch = (n + cfg.train.batch_size - 1) / cfg.train.batch_size;
  const std::int64_t total_steps = cfg.train.epochs * steps_per_epoch;

  std::vector<Tensor<T>> params;
  std::vector<std::string> param_names;
  model.visit_params([&](const std::string& name, Tensor<T>& t) {
    params.push_back(t);
    param_names.push_back(name);
  });
  AdamState<T> adam = AdamState<T>::init(params);

  const bool prefetch = detail::worker_threads() > 1;
  FitResult result;
  result.checkpoint_dir = out_dir / "checkpoint";
  std::int64_t step = 0;

  for (std::int64_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.train.seed, 0xE19C7ULL, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::future<detail::Batch<T>> pending;
    auto launch = [&](std::int64_t b) {
      const std::int64_t begin = b * cfg.train.batch_size;
      const std::int64_t end = std::min(n, begin + cfg.train.batch_size);
      return std::async(std::launch::async, [&, epoch, begin, end]() {
        return detail::make_batch<T>(data, order, epoch, begin, end, run);
      });
    };
    if (prefetch) pending = launch(0);

    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      detail::Batch<T> batch;
      if (prefetch) {
        batch = pending.get();
        if (b + 1 < steps_per_epoch) pending = launch(b + 1);
      } else {
        const std::int64_t begin = b * cfg.train.batch_size;
        const std::int64_t end = std::min(n, begin + cfg.train.batch_size);
        batch = detail::make_batch<T>(data, order, epoch, begin, end, run);
      }

      const double lr = cosine_lr(step, total_steps, cfg.train.lr_max, cfg.train.lr_min);
      model.zero_grads();
      Tape<T> tape;
      LossTerms<T> terms;
      try {
        ForwardOut<T> out = model_forward(model, batch.images, true, &tape);
        std::optional<std::vector<BoundaryMap>> gt;
        if (out.boundary_logits) gt = batch.boundary_gt;
        terms = combined_loss(out.seg_logits, out.boundary_logits, batch.labels, gt, run.loss,
                              &tape);
        tape.backward(terms.total);
        adam_step(params, adam, lr, cfg.train.weight_decay);
      } catch (const error& e) {
        throw error("fit: step " + std::to_string(step + 1) + ": " + e.what());
      }
      ++step;

      StepLog entry;
      entry.step = step;
      entry.lr = lr;
      entry.seg_loss = static_cast<double>(terms.seg);
      entry.boundary_loss = static_cast<double>(terms.boundary);
      entry.total = static_cast<double>(terms.total.item());
      entry.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log_file << step_log_json(entry) << "\n";
      result.log.push_back(entry);
    }

    if constexpr (std::is_same_v<T, float>) {
      const bool last = epoch + 1 == cfg.train.epochs;
      const bool cadence =
          cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0;
      if (last || cadence) save_checkpoint(model, result.checkpoint_dir);
    }
  }
  log_file.close();
  result.log_path = log_path;
  return result;
}

}  // namespace msf
