#pragma once

// On-disk artifacts: datasets (tensor files plus a JSON annotation index),
// checkpoints (parameter tensors plus a JSON manifest), trajectory CSVs and
// 8-bit PGM saliency images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnet/config.hpp"
#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/scene.hpp"
#include "rcnet/harness/train.hpp"
#include "rcnet/serialize.hpp"

namespace rcnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

inline json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

inline Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error("annotation box must be [x, y, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i << ".tensor";
  return os.str();
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

}  // namespace detail

struct Dataset {
  std::vector<Scene> train, test;
};

inline void save_dataset(const fs::path& dir, const Dataset& data, const ExperimentConfig& cfg) {
  json index;
  index["config_hash"] = config_hash(cfg);
  for (const auto* split : {"train", "test"}) {
    const auto& scenes = std::string(split) == "train" ? data.train : data.test;
    fs::create_directories(dir / split);
    json entries = json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto file = detail::image_name(i);
      save_tensor(dir / split / file, std::string(split) + "/" + file, scenes[i].image);
      json objects = json::array(), distractors = json::array();
      for (const auto& o : scenes[i].objects) {
        objects.push_back({{"box", detail::box_json(o.box)}, {"class_id", o.class_id}});
      }
      for (const auto& d : scenes[i].distractors) distractors.push_back(detail::box_json(d));
      entries.push_back({{"image", std::string(split) + "/" + file},
                         {"objects", objects},
                         {"distractors", distractors}});
    }
    index[split] = entries;
  }
  detail::write_text(dir / "annotations.json", index.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& dir) {
  const json index = detail::read_json(dir / "annotations.json");
  Dataset data;
  for (const auto* split : {"train", "test"}) {
    auto& scenes = std::string(split) == "train" ? data.train : data.test;
    if (!index.contains(split)) throw std::runtime_error("annotations.json: missing '" + std::string(split) + "'");
    for (const auto& e : index.at(split)) {
      Scene s;
      s.image = load_tensor(dir / e.at("image").get<std::string>()).tensor;
      for (const auto& o : e.at("objects")) {
        s.objects.push_back({detail::box_from_json(o.at("box")), o.at("class_id").get<int>()});
      }
      for (const auto& d : e.at("distractors")) s.distractors.push_back(detail::box_from_json(d));
      scenes.push_back(std::move(s));
    }
  }
  return data;
}

inline Dataset generate_experiment_dataset(const ExperimentConfig& cfg) {
  return {generate_dataset(cfg.scene, cfg.dataset.train_images, 0),
          generate_dataset(cfg.scene, cfg.dataset.test_images, 1)};
}

struct CheckpointInfo {
  std::uint64_t config_hash = 0;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
};

inline void save_checkpoint(const fs::path& dir, const ToyDetector& det, const ExperimentConfig& cfg,
                            const CheckpointInfo& info) {
  fs::create_directories(dir / "params");
  json manifest;
  manifest["config_hash"] = info.config_hash;
  manifest["epoch"] = info.epoch;
  manifest["seed"] = info.seed;
  manifest["config"] = dump_config(cfg);
  json params = json::array();
  for (const auto& p : det.parameters()) {
    const auto file = "params/" + p.name + ".tensor";
    save_tensor(dir / file, p.name, p.tensor);
    params.push_back({{"name", p.name}, {"file", file}, {"shape", p.tensor.shape()}});
  }
  manifest["parameters"] = params;
  if (det.config().connection.form == ConnectionForm::kdn) {
    json kdn;
    kdn["stack_sums"] = std::vector<double>(det.stack().sums().begin(), det.stack().sums().end());
    kdn["stack_count"] = det.stack().count();
    if (const auto& f = det.factor_set()) {
      kdn["factor_set"] = {{"lambda_infer", f->lambda_infer.values},
                           {"relevant", f->relevant},
                           {"images", f->images}};
    } else {
      kdn["factor_set"] = nullptr;
    }
    manifest["kdn"] = kdn;
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedCheckpoint {
  ExperimentConfig config;
  CheckpointInfo info;
  ToyDetector detector;
};

/// Rebuilds the detector from the embedded config and copies every stored
/// parameter into it.
inline LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const json manifest = detail::read_json(dir / "manifest.json");
  ExperimentConfig cfg =
      parse_config(manifest.at("config").get<std::string>(), (dir / "manifest.json").string());
  CheckpointInfo info{manifest.at("config_hash").get<std::uint64_t>(),
                      manifest.at("epoch").get<std::size_t>(), manifest.at("seed").get<std::uint64_t>()};
  if (info.config_hash != config_hash(cfg)) {
    throw std::runtime_error(dir.string() + ": config hash does not match the embedded config");
  }
  ToyDetector det(cfg.detector, info.seed);
  const auto& entries = manifest.at("parameters");
  if (entries.size() != det.parameters().size()) {
    throw std::runtime_error(dir.string() + ": parameter count mismatch");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = det.parameters()[i];
    const auto loaded = load_tensor(dir / entries[i].at("file").get<std::string>());
    if (loaded.name != p.name || loaded.tensor.shape() != p.tensor.shape()) {
      throw std::runtime_error(dir.string() + ": parameter '" + p.name + "' does not match");
    }
    std::ranges::copy(loaded.tensor.data(), p.tensor.mutable_data().begin());
  }
  if (manifest.contains("kdn")) {
    const auto& kdn = manifest.at("kdn");
    det.stack() = SalientStack::restore(kdn.at("stack_sums").get<std::vector<double>>(),
                                        kdn.at("stack_count").get<std::size_t>());
    if (!kdn.at("factor_set").is_null()) {
      const auto& f = kdn.at("factor_set");
      FactorSet fs_;
      fs_.lambda_infer.values = f.at("lambda_infer").get<std::vector<double>>();
      fs_.relevant = f.at("relevant").get<std::vector<bool>>();
      fs_.images = f.at("images").get<std::size_t>();
      det.set_factor_set(std::move(fs_));
    }
  }
  return {std::move(cfg), info, std::move(det)};
}

inline std::string csv_number(std::optional<double> v) {
  return v ? detail::format_double(*v) : std::string();
}

inline std::string trajectory_csv(const std::vector<TrajectoryRow>& rows, std::size_t levels) {
  std::ostringstream os;
  os << "epoch,lr,loss_total,loss_cls,loss_box,ap50,ap_small";
  for (std::size_t l = 0; l < levels; ++l) os << ",interference_p" << l + 3;
  os << "\n";
  for (const auto& r : rows) {
    os << r.epoch << ',' << csv_number(r.lr) << ',' << csv_number(r.loss_total) << ','
       << csv_number(r.loss_cls) << ',' << csv_number(r.loss_box) << ',' << csv_number(r.ap50)
       << ',' << csv_number(r.ap_small);
    for (std::size_t l = 0; l < levels; ++l) {
      os << ',' << (l < r.interference.size() ? csv_number(r.interference[l]) : std::string());
    }
    os << "\n";
  }
  return os.str();
}

/// Binary PGM of a single-plane map with values in [0, 1].
inline void write_pgm(const fs::path& path, const Tensor& map) {
  const auto p = detail::planes_of(map.shape(), "write_pgm");
  if (p.c != 1 || p.n != 1) throw std::invalid_argument("write_pgm: expected a single plane");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << p.w << ' ' << p.h << "\n255\n";
  for (double v : map.data()) {
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace rcnet
