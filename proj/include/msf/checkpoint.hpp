#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "msf/model.hpp"
#include "msf/t4.hpp"

namespace msf {

// Checkpoint layout: a directory with
//   config.txt      key = value model description
//   manifest.txt    "param <name> <file>" / "buffer <name> <file>" lines
//   params/NNNN.t4  one tensor per file, f32
// Round-trips bit-exactly: parameters are written as their raw IEEE bytes.
inline void save_checkpoint(Model<float>& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) throw io_error("save_checkpoint: cannot create '" + dir.string() + "': " + ec.message());

  {
    std::ofstream cfg(dir / "config.txt", std::ios::trunc);
    if (!cfg) throw io_error("save_checkpoint: cannot write config.txt");
    cfg << serialize_model_config(model.config);
  }

  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw io_error("save_checkpoint: cannot write manifest.txt");
  manifest << "folded " << (model.folded ? "true" : "false") << "\n";
  int file_index = 0;
  auto dump = [&](const char* kind, const std::string& name, Tensor<float>& t) {
    std::string file = std::to_string(file_index++);
    while (file.size() < 4) file.insert(file.begin(), '0');
    file = "params/" + file + ".t4";
    write_t4_tensor(dir / file, t);
    manifest << kind << " " << name << " " << file << "\n";
  };
  model.visit_params([&](const std::string& n, Tensor<float>& t) { dump("param", n, t); });
  model.visit_buffers([&](const std::string& n, Tensor<float>& t) { dump("buffer", n, t); });
  manifest.close();
  if (!manifest) throw io_error("save_checkpoint: manifest write failed");
}

inline Model<float> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream cfg_file(dir / "config.txt");
  if (!cfg_file) throw io_error("load_checkpoint: missing '" + (dir / "config.txt").string() + "'");
  std::string cfg_text((std::istreambuf_iterator<char>(cfg_file)), std::istreambuf_iterator<char>());
  const ModelConfig config = parse_model_config(cfg_text);

  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw io_error("load_checkpoint: missing '" + (dir / "manifest.txt").string() + "'");
  std::string folded_kw, folded_val;
  if (!(manifest >> folded_kw >> folded_val) || folded_kw != "folded") {
    throw io_error("load_checkpoint: manifest must start with a 'folded' line");
  }

  Model<float> model = build_model<float>(config, 0);
  if (folded_val == "true") fold_all_bn(model);

  std::map<std::string, std::string> param_files, buffer_files;
  std::string kind, name, file;
  while (manifest >> kind >> name >> file) {
    if (kind == "param") param_files[name] = file;
    else if (kind == "buffer") buffer_files[name] = file;
    else throw io_error("load_checkpoint: unknown manifest entry kind '" + kind + "'");
  }

  auto restore = [&](std::map<std::string, std::string>& files, const std::string& name,
                     Tensor<float>& t) {
    auto it = files.find(name);
    if (it == files.end()) {
      throw io_error("load_checkpoint: checkpoint has no tensor named '" + name + "'");
    }
    const Tensor<float> loaded = read_t4_tensor(dir / it->second);
    if (loaded.shape() != t.shape()) {
      throw io_error("load_checkpoint: tensor '" + name + "' has shape " + loaded.shape().str() +
                     ", model expects " + t.shape().str());
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
    files.erase(it);
  };
  model.visit_params([&](const std::string& n, Tensor<float>& t) { restore(param_files, n, t); });
  model.visit_buffers([&](const std::string& n, Tensor<float>& t) { restore(buffer_files, n, t); });
  if (!param_files.empty()) {
    throw io_error("load_checkpoint: checkpoint tensor '" + param_files.begin()->first +
                   "' does not exist in the model");
  }
  if (!buffer_files.empty()) {
    throw io_error("load_checkpoint: checkpoint buffer '" + buffer_files.begin()->first +
                   "' does not exist in the model");
  }
  return model;
}

}  // namespace msf
