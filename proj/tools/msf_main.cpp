#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msf/msf.hpp"

namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw msf::io_error("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// --config file first, then --set overrides in order.
msf::RunConfig load_run_config(const std::string& config_path,
                               const std::vector<std::string>& overrides) {
  msf::RunConfig cfg;
  if (!config_path.empty()) msf::apply_config_text(cfg, read_file(config_path));
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw msf::config_error("--set expects key=value, got '" + kv + "'");
    }
    msf::apply_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct GenDataArgs {
  std::string out;
  msf::SynthConfig synth;
  std::int64_t size = 64;
  std::string shapes = "both";
};

int run_gen_data(GenDataArgs& a) {
  if (a.synth.height == 0) a.synth.height = a.size;
  if (a.synth.width == 0) a.synth.width = a.size;
  a.synth.rectangles = a.shapes == "both" || a.shapes == "rectangles";
  a.synth.ellipses = a.shapes == "both" || a.shapes == "ellipses";
  if (!a.synth.rectangles && !a.synth.ellipses) {
    throw msf::config_error("--shapes must be rectangles, ellipses, or both");
  }
  msf::DatasetIndex idx = msf::gen_synthetic(a.synth, a.out);
  std::cout << "wrote " << idx.samples.size() << " samples (" << a.synth.height << "x"
            << a.synth.width << ", " << a.synth.num_classes << " classes) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, config;
  std::vector<std::string> overrides;
};

int run_train(TrainArgs& a) {
  msf::RunConfig cfg = load_run_config(a.config, a.overrides);
  msf::DatasetIndex data = msf::load_dataset(a.data);
  msf::Model<float> model = msf::build_model<float>(cfg.model, cfg.train.seed);
  msf::FitResult result = msf::fit(model, data, cfg, a.out);
  const msf::StepLog& last = result.log.back();
  std::cout << "trained " << last.step << " steps, final total loss " << full(last.total) << "\n";
  std::cout << "checkpoint " << result.checkpoint_dir.string() << "\n";
  std::cout << "log " << result.log_path.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out, format = "json", means = "0.5,0.5,0.5";
  std::int64_t bench_runs = 0;
};

int run_eval(EvalArgs& a) {
  msf::Model<float> model = msf::load_checkpoint(a.checkpoint);
  msf::DatasetIndex data = msf::load_dataset(a.data);
  std::vector<double> means;
  for (const std::string& m : split_csv(a.means)) means.push_back(std::stod(m));

  msf::EvalResult ev = msf::evaluate_dataset(model, data, means);
  std::cout << "miou " << full(ev.iou.mean_iou) << "\n";
  for (std::size_t c = 0; c < ev.iou.per_class.size(); ++c) {
    std::cout << "class " << c << " iou "
              << (ev.iou.per_class[c] ? full(*ev.iou.per_class[c]) : std::string("unscored"))
              << "\n";
  }

  if (!a.out.empty()) {
    msf::MetricsReport report;
    report.per_class_iou = ev.iou.per_class;
    report.miou = ev.iou.mean_iou;
    msf::CostReport cost = msf::count_flops(model.config, 1, data.height, data.width);
    report.macs = cost.macs;
    report.flops = cost.flops;
    if (a.bench_runs > 0) {
      msf::Model<float> timed = msf::clone_model(model);
      if (!timed.folded) msf::fold_all_bn(timed);
      report.latency = msf::bench_latency(timed, data.height, data.width, a.bench_runs);
    }
    report.config_echo = msf::serialize_model_config(model.config);
    msf::emit_report(report, msf::parse_report_format(a.format), a.out);
    std::cout << "report " << a.out << "\n";
  }
  return 0;
}

struct BoundaryArgs {
  std::string labels, data, out, mode = "class";
  std::int64_t epsilon = 1;
};

int run_boundary(BoundaryArgs& a) {
  msf::BoundaryConfig cfg;
  cfg.epsilon = a.epsilon;
  cfg.mode = msf::parse_boundary_mode(a.mode);
  if (a.labels.empty() == a.data.empty()) {
    throw msf::config_error("boundary: pass exactly one of --labels or --data");
  }
  if (!a.labels.empty()) {
    msf::LabelMap in = msf::read_t4_labels(a.labels);
    msf::write_t4_labels(a.out, msf::boundary_labels(in, cfg));
    std::cout << "wrote " << a.out << "\n";
    return 0;
  }
  msf::DatasetIndex data = msf::load_dataset(a.data);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw msf::io_error("cannot create '" + a.out + "': " + ec.message());
  for (const msf::SampleRef& ref : data.samples) {
    msf::LabelMap in = msf::read_t4_labels(ref.labels_path);
    const fs::path path = fs::path(a.out) / (ref.id + "_boundary.t4");
    msf::write_t4_labels(path, msf::boundary_labels(in, cfg));
  }
  std::cout << "wrote " << data.samples.size() << " boundary maps to " << a.out << "\n";
  return 0;
}

struct FlopsArgs {
  std::string config, out;
  std::vector<std::string> overrides;
  std::int64_t batch = 1, height = 1024, width = 2048;
};

int run_flops(FlopsArgs& a) {
  msf::RunConfig cfg = load_run_config(a.config, a.overrides);
  msf::CostReport r = msf::count_flops(cfg.model, a.batch, a.height, a.width);
  std::cout << "macs " << r.macs << "\n";
  std::cout << "flops " << r.flops << "\n";
  std::cout << "aux_ops " << r.aux_ops << "\n";
  std::cout << "params " << r.params << "\n";
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw msf::io_error("cannot write '" + a.out + "'");
    for (const msf::LayerCost& l : r.layers) {
      f << l.name << "," << l.macs << "," << l.aux_ops << "\n";
    }
    std::cout << "layers " << a.out << "\n";
  }
  return 0;
}

struct BenchArgs {
  std::string checkpoint, out;
  std::int64_t height = 0, width = 0, runs = 500, warmup = 5;
  std::uint64_t seed = 1;
};

int run_bench(BenchArgs& a) {
  msf::Model<float> model = msf::load_checkpoint(a.checkpoint);
  if (!model.folded) msf::fold_all_bn(model);
  msf::LatencyReport r = msf::bench_latency(model, a.height, a.width, a.runs, a.warmup, a.seed);
  std::cout << "mean_ms " << full(r.mean_ms) << "\n";
  std::cout << "median_ms " << full(r.median_ms) << "\n";
  std::cout << "p95_ms " << full(r.p95_ms) << "\n";
  std::cout << "fps " << full(r.fps) << "\n";
  std::cout << "runs " << r.runs << "\n";
  if (!a.out.empty()) {
    msf::MetricsReport report;
    report.latency = r;
    report.config_echo = msf::serialize_model_config(model.config);
    msf::emit_report(report, msf::ReportFormat::Json, a.out);
    std::cout << "report " << a.out << "\n";
  }
  return 0;
}

struct AblateArgs {
  std::string sweep, data, val_data, config, out = "ablate.csv", work = "ablate_runs";
  std::string values, seeds = "1";
  std::vector<std::string> overrides;
};

int run_ablate(AblateArgs& a) {
  msf::RunConfig base = load_run_config(a.config, a.overrides);
  std::vector<std::string> values =
      a.values.empty() ? msf::default_sweep_values(a.sweep) : split_csv(a.values);
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_csv(a.seeds)) seeds.push_back(std::stoull(s));
  msf::DatasetIndex train_data = msf::load_dataset(a.data);
  msf::DatasetIndex val_data =
      a.val_data.empty() ? train_data : msf::load_dataset(a.val_data);

  msf::AblateResult result = msf::ablate(base, a.sweep, values, train_data, val_data, seeds, a.work);
  std::ofstream f(a.out, std::ios::trunc);
  if (!f) throw msf::io_error("cannot write '" + a.out + "'");
  f << result.csv;
  std::cout << result.csv;
  std::cout << "csv " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiply Spatial Fusion segmentation network construction kit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  gen.synth.height = 0;  // 0 = take --size
  gen.synth.width = 0;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.synth.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--samples", gen.synth.num_samples, "Number of samples")
      ->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Square image size")->capture_default_str();
  gen_cmd->add_option("--height", gen.synth.height, "Image height (0 = use --size)")
      ->capture_default_str();
  gen_cmd->add_option("--width", gen.synth.width, "Image width (0 = use --size)")
      ->capture_default_str();
  gen_cmd->add_option("--classes", gen.synth.num_classes, "Class count including background")
      ->capture_default_str();
  gen_cmd->add_option("--min-shapes", gen.synth.min_shapes, "Min shapes per sample")
      ->capture_default_str();
  gen_cmd->add_option("--max-shapes", gen.synth.max_shapes, "Max shapes per sample")
      ->capture_default_str();
  gen_cmd->add_option("--shapes", gen.shapes, "Shape kinds: rectangles, ellipses, or both")
      ->capture_default_str();

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--out", train.out, "Run output directory")->required();
  train_cmd->add_option("--config", train.config, "Config file (key = value lines)");
  train_cmd->add_option("--set", train.overrides, "Config override key=value (repeatable)");

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--out", eval.out, "Report file to write");
  eval_cmd->add_option("--format", eval.format, "Report format: json, csv, or svg")
      ->capture_default_str();
  eval_cmd->add_option("--means", eval.means, "Channel means to subtract")->capture_default_str();
  eval_cmd->add_option("--bench-runs", eval.bench_runs, "Also time this many forwards (0 = skip)")
      ->capture_default_str();

  BoundaryArgs boundary;
  CLI::App* boundary_cmd = app.add_subcommand("boundary", "Extract boundary maps from labels");
  boundary_cmd->add_option("--labels", boundary.labels, "Single label .t4 file");
  boundary_cmd->add_option("--data", boundary.data, "Dataset directory (all samples)");
  boundary_cmd->add_option("--out", boundary.out, "Output file (with --labels) or directory")
      ->required();
  boundary_cmd->add_option("--epsilon", boundary.epsilon, "Boundary width in pixels")
      ->capture_default_str();
  boundary_cmd->add_option("--mode", boundary.mode, "Boundary ids: class or zero_one")
      ->capture_default_str();

  FlopsArgs flops;
  CLI::App* flops_cmd = app.add_subcommand("flops", "Analytic cost of one forward");
  flops_cmd->add_option("--config", flops.config, "Config file");
  flops_cmd->add_option("--set", flops.overrides, "Config override key=value (repeatable)");
  flops_cmd->add_option("--batch", flops.batch, "Batch size")->capture_default_str();
  flops_cmd->add_option("--height", flops.height, "Input height")->capture_default_str();
  flops_cmd->add_option("--width", flops.width, "Input width")->capture_default_str();
  flops_cmd->add_option("--out", flops.out, "Per-layer CSV to write");

  BenchArgs bench;
  CLI::App* bench_cmd = app.add_subcommand("bench", "Latency of a folded checkpoint");
  bench_cmd->add_option("--checkpoint", bench.checkpoint, "Checkpoint directory")->required();
  bench_cmd->add_option("--height", bench.height, "Input height")->required();
  bench_cmd->add_option("--width", bench.width, "Input width")->required();
  bench_cmd->add_option("--runs", bench.runs, "Timed forwards")->capture_default_str();
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed warmup forwards")
      ->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed, "Input seed")->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "JSON report to write");

  AblateArgs ablate;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Run a named configuration sweep");
  ablate_cmd
      ->add_option("sweep", ablate.sweep,
                   "One of: pooling-count, kernel-mode, boundary-width, branch-fusion, "
                   "boundary-mode, modules")
      ->required();
  ablate_cmd->add_option("--values", ablate.values, "Comma-separated sweep values");
  ablate_cmd->add_option("--seeds", ablate.seeds, "Comma-separated seeds")->capture_default_str();
  ablate_cmd->add_option("--data", ablate.data, "Training dataset directory")->required();
  ablate_cmd->add_option("--val-data", ablate.val_data, "Validation dataset (default: --data)");
  ablate_cmd->add_option("--config", ablate.config, "Base config file");
  ablate_cmd->add_option("--set", ablate.overrides, "Config override key=value (repeatable)");
  ablate_cmd->add_option("--out", ablate.out, "Comparison CSV path")->capture_default_str();
  ablate_cmd->add_option("--work", ablate.work, "Directory for per-run outputs")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*boundary_cmd) return run_boundary(boundary);
    if (*flops_cmd) return run_flops(flops);
    if (*bench_cmd) return run_bench(bench);
    if (*ablate_cmd) return run_ablate(ablate);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
