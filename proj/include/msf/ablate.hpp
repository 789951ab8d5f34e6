#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "msf/eval.hpp"
#include "msf/report.hpp"
#include "msf/train.hpp"

namespace msf {

struct AblateRow {
  std::string sweep;
  std::string value;
  std::uint64_t seed = 0;
  std::optional<double> miou;  // absent when the run failed
  std::string note;            // error message for failed runs
};

struct AblateResult {
  std::vector<AblateRow> rows;
  std::string csv;
};

inline const std::vector<std::string>& ablate_sweeps() {
  static const std::vector<std::string> sweeps{"pooling-count", "kernel-mode",  "boundary-width",
                                               "branch-fusion", "boundary-mode", "modules"};
  return sweeps;
}

inline std::vector<std::string> default_sweep_values(const std::string& sweep) {
  if (sweep == "pooling-count") return {"0", "1", "2", "3", "4", "5", "end"};
  if (sweep == "kernel-mode") {
    return {"kernel_equals_stride", "kernel_two_s_plus_one", "dilated_conv3x3"};
  }
  if (sweep == "boundary-width") return {"1", "2", "5"};
  if (sweep == "branch-fusion") return {"2_concat", "2_none", "1_none"};
  if (sweep == "boundary-mode") return {"class", "zero_one", "off"};
  if (sweep == "modules") return {"baseline", "mfm", "mfm_cbs"};
  throw config_error("unknown ablation sweep '" + sweep +
                     "' (expected pooling-count, kernel-mode, boundary-width, branch-fusion, "
                     "boundary-mode, or modules)");
}

// Derives the configuration for one sweep point from the base run config.
inline RunConfig apply_sweep_value(RunConfig cfg, const std::string& sweep,
                                   const std::string& value) {
  if (sweep == "pooling-count") {
    if (value == "end") {
      cfg.model.sap.pool_to_end = true;
    } else {
      cfg.model.sap.pool_to_end = false;
      cfg.model.sap.levels = std::stoll(value);
    }
  } else if (sweep == "kernel-mode") {
    cfg.model.sap.kernel_mode = parse_kernel_mode(value);
  } else if (sweep == "boundary-width") {
    if (cfg.model.boundary_mode == BoundaryMode::Off) {
      throw config_error("boundary-width sweep requires model.boundary_mode != off");
    }
    cfg.boundary.epsilon = std::stoll(value);
  } else if (sweep == "branch-fusion") {
    if (value == "2_concat") {
      cfg.model.branch_count = 2;
      cfg.model.branch_fusion = BranchFusion::Concat;
    } else if (value == "2_none") {
      cfg.model.branch_count = 2;
      cfg.model.branch_fusion = BranchFusion::None;
    } else if (value == "1_none") {
      cfg.model.branch_count = 1;
      cfg.model.branch_fusion = BranchFusion::None;
    } else {
      throw config_error("branch-fusion value '" + value +
                         "' (expected 2_concat, 2_none, or 1_none)");
    }
  } else if (sweep == "boundary-mode") {
    cfg.model.boundary_mode = parse_boundary_mode(value);
  } else if (sweep == "modules") {
    if (value == "baseline") {
      // plain U-shape decoder from 1/8: single copy per resolution, no
      // boundary branch
      cfg.model.sap.levels = 0;
      cfg.model.sap.pool_to_end = false;
      cfg.model.branch_count = 1;
      cfg.model.branch_fusion = BranchFusion::None;
      cfg.model.boundary_mode = BoundaryMode::Off;
    } else if (value == "mfm") {
      cfg.model.branch_count = 1;
      cfg.model.branch_fusion = BranchFusion::None;
      cfg.model.boundary_mode = BoundaryMode::Off;
    } else if (value == "mfm_cbs") {
      cfg.model.branch_count = 2;
      cfg.model.branch_fusion = BranchFusion::Concat;
      cfg.model.boundary_mode = BoundaryMode::ClassBoundary;
    } else {
      throw config_error("modules value '" + value + "' (expected baseline, mfm, or mfm_cbs)");
    }
  } else {
    default_sweep_values(sweep);  // throws the unknown-sweep error
  }
  return cfg;
}

// Trains and evaluates one configuration per (value, seed) pair and collects
// a comparison CSV (columns: sweep,value,seed,miou,note; no header). A sweep
// point that cannot run records an error note row instead of aborting the
// sweep.
inline AblateResult ablate(const RunConfig& base, const std::string& sweep,
                           const std::vector<std::string>& values,
                           const DatasetIndex& train_data, const DatasetIndex& val_data,
                           const std::vector<std::uint64_t>& seeds,
                           const std::filesystem::path& work_dir) {
  if (values.empty()) throw config_error("ablate: no sweep values given");
  if (seeds.empty()) throw config_error("ablate: no seeds given");

  AblateResult result;
  for (const std::string& value : values) {
    for (std::uint64_t seed : seeds) {
      AblateRow row;
      row.sweep = sweep;
      row.value = value;
      row.seed = seed;
      try {
        RunConfig cfg = apply_sweep_value(base, sweep, value);
        cfg.train.seed = seed;
        cfg.validate();
        Model<float> model = build_model<float>(cfg.model, seed);
        const auto run_dir = work_dir / (sweep + "_" + value + "_s" + std::to_string(seed));
        fit(model, train_data, cfg, run_dir);
        EvalResult ev = evaluate_dataset(model, val_data, cfg.train.aug.channel_means);
        row.miou = ev.iou.mean_iou;
      } catch (const std::exception& e) {
        std::string msg = e.what();
        for (char& c : msg) {
          if (c == ',' || c == '\n') c = ';';
        }
        row.note = msg;
      }
      result.rows.push_back(std::move(row));
    }
  }

  for (const AblateRow& row : result.rows) {
    result.csv += row.sweep + "," + row.value + "," + std::to_string(row.seed) + ",";
    result.csv += row.miou ? detail::fmt_full(*row.miou) : std::string();
    result.csv += "," + row.note + "\n";
  }
  return result;
}

}  // namespace msf
