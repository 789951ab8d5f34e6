#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "msf/msf.hpp"

using namespace msf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("msf_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp_text(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<char> slurp_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

ModelConfig train_model_config() {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {2, 2, 4, 4};
  cfg.encoder.stage_strides = {1, 2, 4, 8};
  cfg.encoder.blocks_per_stage = {1, 1, 1, 1};
  cfg.sap.levels = 1;
  cfg.fusion_width = 4;
  cfg.num_classes = 3;
  return cfg;  // required multiple 16
}

RunConfig base_run_config() {
  RunConfig cfg;
  cfg.model = train_model_config();
  cfg.train.batch_size = 2;
  cfg.train.epochs = 2;
  cfg.train.seed = 5;
  cfg.train.aug.crop_h = 16;
  cfg.train.aug.crop_w = 16;
  cfg.train.aug.scale_min = 1.0;
  cfg.train.aug.scale_max = 1.0;
  cfg.train.aug.flip_prob = 0.5;
  return cfg;
}

DatasetIndex make_dataset(const fs::path& dir, std::int64_t n, std::int64_t hw,
                          std::uint64_t seed) {
  SynthConfig synth;
  synth.num_samples = n;
  synth.height = hw;
  synth.width = hw;
  synth.num_classes = 3;
  synth.seed = seed;
  return gen_synthetic(synth, dir);
}

LabelMap random_map(std::int64_t h, std::int64_t w, int num_ids, Rng& rng) {
  LabelMap m(h, w, 0);
  std::uniform_int_distribution<int> d(0, num_ids - 1);
  for (auto& id : m.ids) id = static_cast<std::uint8_t>(d(rng));
  return m;
}

}  // namespace

TEST_CASE("combined loss is linear in lambda") {
  Rng rng(3);
  Tensor<double> seg_logits = randn<double>({2, 3, 8, 8}, rng);
  Tensor<double> boundary_logits = randn<double>({2, 4, 8, 8}, rng);
  std::vector<LabelMap> labels = {random_map(8, 8, 3, rng), random_map(8, 8, 3, rng)};
  BoundaryConfig bc;
  bc.mode = BoundaryMode::ClassBoundary;
  std::vector<BoundaryMap> gts = {boundary_labels(labels[0], bc), boundary_labels(labels[1], bc)};

  auto total_at = [&](double lambda) {
    LossConfig lc;
    lc.lambda = lambda;
    LossTerms<double> t =
        combined_loss<double>(seg_logits, boundary_logits, labels, gts, lc, nullptr);
    return t;
  };

  const LossTerms<double> t0 = total_at(0.0);
  const LossTerms<double> t1 = total_at(1.0);
  const LossTerms<double> t2 = total_at(2.0);

  // three-point collinearity
  REQUIRE_THAT(t2.total.item() - t1.total.item(),
               Catch::Matchers::WithinAbs(t1.total.item() - t0.total.item(), 1e-9));

  // term-sum oracle against separately computed pieces
  LossConfig lc;
  const double seg = seg_loss<double>(seg_logits, labels, lc).item();
  const double boundary = softmax_cross_entropy<double>(boundary_logits, gts, 255).item();
  REQUIRE(t0.total.item() == seg);
  REQUIRE(t1.total.item() == seg + boundary);
  REQUIRE(t2.total.item() == seg + 2.0 * boundary);
  REQUIRE(t1.seg == seg);
  REQUIRE(t1.boundary == boundary);
}

TEST_CASE("combined loss defaults and edge handling") {
  LossConfig lc;
  REQUIRE(lc.lambda == 1.0);
  REQUIRE(lc.ignore_index == 255);

  Rng rng(7);
  Tensor<double> seg_logits = randn<double>({1, 3, 4, 4}, rng);
  std::vector<LabelMap> labels = {random_map(4, 4, 3, rng)};

  // no boundary head: total is exactly the seg term
  LossTerms<double> t = combined_loss<double>(seg_logits, std::nullopt, labels, std::nullopt, lc);
  REQUIRE(t.total.item() == t.seg);
  REQUIRE(t.boundary == 0.0);

  // boundary logits without ground truth
  Tensor<double> boundary_logits = randn<double>({1, 4, 4, 4}, rng);
  REQUIRE_THROWS_AS(
      combined_loss<double>(seg_logits, boundary_logits, labels, std::nullopt, lc),
      shape_error);

  LossConfig bad;
  bad.lambda = -0.5;
  REQUIRE_THROWS_AS(seg_loss<double>(seg_logits, labels, bad), config_error);
}

TEST_CASE("one optimizer step lowers the loss on the same batch") {
  ModelConfig mc = train_model_config();
  mc.boundary_mode = BoundaryMode::Off;
  Model<double> model = build_model<double>(mc, 11);
  Rng rng(12);
  Tensor<double> images = randn<double>({2, 3, 16, 16}, rng, 0.5);
  std::vector<LabelMap> labels = {random_map(16, 16, 3, rng), random_map(16, 16, 3, rng)};
  LossConfig lc;

  auto batch_loss = [&](Tape<double>* tape) {
    ForwardOut<double> out = model_forward(model, images, true, tape);
    return combined_loss<double>(out.seg_logits, out.boundary_logits, labels, std::nullopt, lc,
                                 tape);
  };

  std::vector<Tensor<double>> params;
  model.visit_params([&](const std::string&, Tensor<double>& t) { params.push_back(t); });
  AdamState<double> adam = AdamState<double>::init(params);

  model.zero_grads();
  Tape<double> tape;
  LossTerms<double> before = batch_loss(&tape);
  tape.backward(before.total);
  adam_step(params, adam, 1e-3, 0.0);

  LossTerms<double> after = batch_loss(nullptr);
  REQUIRE(after.total.item() < before.total.item());
}

TEST_CASE("fit writes a schedule-exact log and a loadable checkpoint") {
  const fs::path data_dir = temp_dir("fit_data");
  DatasetIndex data = make_dataset(data_dir, 4, 16, 21);

  RunConfig cfg = base_run_config();
  cfg.model.boundary_mode = BoundaryMode::ClassBoundary;
  cfg.model.cbs_output_size = CbsOutputSize::EighthScale;
  Model<float> model = build_model<float>(cfg.model, 23);

  const fs::path out = temp_dir("fit_out");
  FitResult res = fit(model, data, cfg, out);

  // 4 samples, batch 2, 2 epochs -> 4 steps
  REQUIRE(res.log.size() == 4);
  for (std::size_t i = 0; i < res.log.size(); ++i) {
    const StepLog& entry = res.log[i];
    REQUIRE(entry.step == static_cast<std::int64_t>(i + 1));
    REQUIRE(entry.lr == cosine_lr(static_cast<std::int64_t>(i), 4, cfg.train.lr_max,
                                  cfg.train.lr_min));
    REQUIRE(entry.total == Catch::Approx(entry.seg_loss + entry.boundary_loss).margin(1e-6));
    REQUIRE(entry.wall_ms >= 0.0);
  }

  // log file is one json object per line mirroring the in-memory log
  REQUIRE(res.log_path == out / "log.jsonl");
  std::istringstream lines(slurp_text(res.log_path));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    REQUIRE(j.at("step").get<std::int64_t>() == res.log[count].step);
    REQUIRE(j.at("lr").get<double>() == res.log[count].lr);
    REQUIRE(j.at("seg_loss").get<double>() == res.log[count].seg_loss);
    ++count;
  }
  REQUIRE(count == 4);

  // checkpoint holds the post-training parameters
  Model<float> restored = load_checkpoint(res.checkpoint_dir);
  std::vector<float> want, got;
  model.visit_params([&](const std::string&, Tensor<float>& t) {
    want.insert(want.end(), t.data().begin(), t.data().end());
  });
  restored.visit_params([&](const std::string&, Tensor<float>& t) {
    got.insert(got.end(), t.data().begin(), t.data().end());
  });
  REQUIRE(want == got);
}

TEST_CASE("the last partial batch is kept") {
  const fs::path data_dir = temp_dir("partial_data");
  DatasetIndex data = make_dataset(data_dir, 4, 16, 31);

  RunConfig cfg = base_run_config();
  cfg.train.batch_size = 3;
  cfg.train.epochs = 1;
  Model<float> model = build_model<float>(cfg.model, 33);
  FitResult res = fit(model, data, cfg, temp_dir("partial_out"));
  REQUIRE(res.log.size() == 2);  // ceil(4 / 3)
}

TEST_CASE("two hundred steps halve the seg loss on a toy set") {
  const fs::path data_dir = temp_dir("halve_data");
  DatasetIndex data = make_dataset(data_dir, 4, 16, 41);

  RunConfig cfg = base_run_config();
  cfg.train.batch_size = 4;
  cfg.train.epochs = 200;
  cfg.train.lr_max = 3e-3;
  cfg.train.lr_min = 1e-4;
  cfg.train.aug.flip_prob = 0.0;
  Model<float> model = build_model<float>(cfg.model, 43);
  FitResult res = fit(model, data, cfg, temp_dir("halve_out"));
  REQUIRE(res.log.size() == 200);
  REQUIRE(res.log.back().seg_loss <= 0.5 * res.log.front().seg_loss);
}

TEST_CASE("same seed gives identical logs and checkpoints") {
  const fs::path data_dir = temp_dir("det_data");
  DatasetIndex data = make_dataset(data_dir, 4, 16, 51);

  RunConfig cfg = base_run_config();
  cfg.model.boundary_mode = BoundaryMode::ClassBoundary;
  cfg.model.cbs_output_size = CbsOutputSize::EighthScale;

  const fs::path out_a = temp_dir("det_a");
  const fs::path out_b = temp_dir("det_b");
  Model<float> model_a = build_model<float>(cfg.model, 53);
  Model<float> model_b = build_model<float>(cfg.model, 53);
  FitResult res_a = fit(model_a, data, cfg, out_a);
  FitResult res_b = fit(model_b, data, cfg, out_b);

  REQUIRE(strip_volatile_fields(slurp_text(res_a.log_path)) ==
          strip_volatile_fields(slurp_text(res_b.log_path)));

  // every checkpoint file is byte-identical
  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(res_a.checkpoint_dir)) {
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), res_a.checkpoint_dir));
  }
  REQUIRE_FALSE(rel.empty());
  for (const auto& r : rel) {
    REQUIRE(slurp_bytes(res_a.checkpoint_dir / r) == slurp_bytes(res_b.checkpoint_dir / r));
  }

  // a different seed diverges
  RunConfig other = cfg;
  other.train.seed = 54;
  Model<float> model_c = build_model<float>(cfg.model, 53);
  FitResult res_c = fit(model_c, data, other, temp_dir("det_c"));
  REQUIRE(strip_volatile_fields(slurp_text(res_a.log_path)) !=
          strip_volatile_fields(slurp_text(res_c.log_path)));
}

TEST_CASE("prefetching workers do not change the results") {
  const fs::path data_dir = temp_dir("threads_data");
  DatasetIndex data = make_dataset(data_dir, 6, 16, 61);

  RunConfig cfg = base_run_config();
  cfg.train.epochs = 3;

  Model<float> model_a = build_model<float>(cfg.model, 63);
  FitResult res_a = fit(model_a, data, cfg, temp_dir("threads_a"));

  setenv("MSF_THREADS", "2", 1);
  Model<float> model_b = build_model<float>(cfg.model, 63);
  FitResult res_b = fit(model_b, data, cfg, temp_dir("threads_b"));
  unsetenv("MSF_THREADS");

  REQUIRE(strip_volatile_fields(slurp_text(res_a.log_path)) ==
          strip_volatile_fields(slurp_text(res_b.log_path)));
}

TEST_CASE("volatile fields are stripped from jsonl") {
  REQUIRE(volatile_log_fields() == std::vector<std::string>{"wall_ms"});

  StepLog s;
  s.step = 3;
  s.lr = 0.5;
  s.seg_loss = 1.25;
  s.boundary_loss = 0.25;
  s.total = 1.5;
  s.wall_ms = 17.5;
  const std::string jsonl = step_log_json(s) + "\n\n" + step_log_json(s) + "\n";
  const std::string stripped = strip_volatile_fields(jsonl);

  std::istringstream is(stripped);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    REQUIRE_FALSE(j.contains("wall_ms"));
    REQUIRE(j.at("step").get<std::int64_t>() == 3);
    REQUIRE(j.at("total").get<double>() == 1.5);
    ++n;
  }
  REQUIRE(n == 2);
}

TEST_CASE("a zero-weight boundary run matches the single-head run") {
  const fs::path data_dir = temp_dir("lambda_data");
  DatasetIndex data = make_dataset(data_dir, 4, 16, 71);

  RunConfig off = base_run_config();
  off.model.boundary_mode = BoundaryMode::Off;

  RunConfig zero = base_run_config();
  zero.model.boundary_mode = BoundaryMode::ClassBoundary;
  zero.model.cbs_output_size = CbsOutputSize::EighthScale;
  zero.loss.lambda = 0.0;

  Model<float> model_off = build_model<float>(off.model, 73);
  Model<float> model_zero = build_model<float>(zero.model, 73);
  FitResult res_off = fit(model_off, data, off, temp_dir("lambda_off"));
  FitResult res_zero = fit(model_zero, data, zero, temp_dir("lambda_zero"));

  REQUIRE(res_off.log.size() == res_zero.log.size());
  for (std::size_t i = 0; i < res_off.log.size(); ++i) {
    REQUIRE(res_off.log[i].seg_loss == res_zero.log[i].seg_loss);
    REQUIRE(res_zero.log[i].total == res_zero.log[i].seg_loss);
    REQUIRE(res_off.log[i].boundary_loss == 0.0);
  }
}

TEST_CASE("fit input validation and failure reporting") {
  const fs::path data_dir = temp_dir("err_data");
  DatasetIndex data = make_dataset(data_dir, 2, 16, 81);

  RunConfig cfg = base_run_config();
  Model<float> model = build_model<float>(cfg.model, 83);

  DatasetIndex empty;
  REQUIRE_THROWS_AS(fit(model, empty, cfg, temp_dir("err_a")), value_error);

  RunConfig bad_crop = cfg;
  bad_crop.train.aug.crop_h = 12;
  bad_crop.train.aug.crop_w = 12;
  REQUIRE_THROWS_WITH(fit(model, data, bad_crop, temp_dir("err_b")),
                      Catch::Matchers::ContainsSubstring("divisible by 16"));

  // mixed sample sizes without a crop
  const fs::path mixed_dir = temp_dir("err_mixed");
  make_dataset(mixed_dir, 2, 16, 85);
  {
    Rng rng(86);
    write_t4_tensor(mixed_dir / "sample_0001_image.t4", randn<float>({3, 32, 32}, rng));
    write_t4_labels(mixed_dir / "sample_0001_labels.t4", LabelMap(32, 32, 0));
  }
  DatasetIndex mixed = load_dataset(mixed_dir);
  RunConfig no_crop = cfg;
  no_crop.train.aug.crop_h = 0;
  no_crop.train.aug.crop_w = 0;
  no_crop.train.batch_size = 2;
  no_crop.train.epochs = 1;
  Model<float> model2 = build_model<float>(cfg.model, 87);
  REQUIRE_THROWS_WITH(fit(model2, mixed, no_crop, temp_dir("err_c")),
                      Catch::Matchers::ContainsSubstring("crop"));

  // poisoned parameters surface as a step-tagged failure
  Model<float> broken = build_model<float>(cfg.model, 89);
  broken.seg_head.w.data()[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_WITH(fit(broken, data, cfg, temp_dir("err_d")),
                      Catch::Matchers::ContainsSubstring("fit: step 1:"));
}
