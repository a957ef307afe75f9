#pragma once

// Experiment configuration in YAML. Every key is required (the connection
// matrix only for the complete form), unknown keys are rejected, and errors
// carry the line and column of the offending node.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/eval.hpp"
#include "rcnet/harness/scene.hpp"
#include "rcnet/harness/train.hpp"

namespace rcnet {

struct DatasetSizes {
  std::size_t train_images = 200;
  std::size_t test_images = 50;
  bool operator==(const DatasetSizes&) const = default;
};

struct ExperimentConfig {
  SceneSpec scene;
  DatasetSizes dataset;
  DetectorConfig detector;
  TrainConfig training;
  std::vector<std::uint64_t> seeds{1};
  DecodeConfig decode;
  double iou_threshold = 0.5;
  std::string output_dir = "out";

  bool operator==(const ExperimentConfig&) const = default;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, int line, int column, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ":" + std::to_string(column) +
                           ": " + what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<ConnectionForm> kForms[] = {
    {ConnectionForm::none, "none"},
    {ConnectionForm::single_branch, "single_branch"},
    {ConnectionForm::kdn, "kdn"},
    {ConnectionForm::economical, "economical"},
    {ConnectionForm::complete, "complete"},
    {ConnectionForm::variant_sm, "variant_sm"},
    {ConnectionForm::variant_sl, "variant_sl"},
};
inline constexpr EnumName<AttachPoint> kAttach[] = {{AttachPoint::topdown_out, "topdown_out"},
                                                    {AttachPoint::bottomup_out, "bottomup_out"}};
inline constexpr EnumName<NeckType> kNecks[] = {{NeckType::fpn, "fpn"}, {NeckType::pafpn, "pafpn"}};
inline constexpr EnumName<SceneMode> kModes[] = {{SceneMode::tiny, "tiny"},
                                                 {SceneMode::diversified, "diversified"}};
inline constexpr EnumName<VariantStrengths> kVariantStrengths[] = {
    {VariantStrengths::named, "named"}, {VariantStrengths::uniform, "uniform"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  throw std::logic_error("enum_name: unmapped value");
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

// A mapping node whose keys are consumed one by one; leftovers are errors.
class Section {
 public:
  Section(const YAML::Node& node, std::string path, const std::string& source)
      : node_(node), path_(std::move(path)), source_(source) {
    if (!node_.IsMap()) fail(node_, "'" + path_ + "' must be a mapping");
  }

  bool has(const std::string& key) const { return static_cast<bool>(node_[key]); }

  YAML::Node take(const std::string& key) {
    const YAML::Node v = node_[key];
    if (!v) fail(node_, "missing required key '" + path_ + "." + key + "'");
    used_.insert(key);
    return v;
  }

  template <typename T>
  T get(const std::string& key) {
    const YAML::Node v = take(key);
    try {
      return v.as<T>();
    } catch (const YAML::Exception&) {
      fail(v, "invalid value for '" + path_ + "." + key + "'");
    }
  }

  double get_real(const std::string& key) {
    const double v = get<double>(key);
    if (!std::isfinite(v)) fail(node_[key], "'" + path_ + "." + key + "' must be finite");
    return v;
  }

  std::size_t get_count(const std::string& key) {
    const YAML::Node v = take(key);
    try {
      const auto x = v.as<long long>();
      if (x < 0) fail(v, "'" + path_ + "." + key + "' must be non-negative");
      return static_cast<std::size_t>(x);
    } catch (const YAML::Exception&) {
      fail(v, "'" + path_ + "." + key + "' must be an integer");
    }
  }

  bool get_bool(const std::string& key) { return get<bool>(key); }

  std::vector<double> get_reals(const std::string& key, std::size_t expected = 0) {
    const YAML::Node v = take(key);
    if (!v.IsSequence()) fail(v, "'" + path_ + "." + key + "' must be a list");
    std::vector<double> out;
    for (const auto& e : v) {
      try {
        out.push_back(e.as<double>());
      } catch (const YAML::Exception&) {
        fail(e, "non-numeric entry in '" + path_ + "." + key + "'");
      }
      if (!std::isfinite(out.back())) fail(e, "non-finite entry in '" + path_ + "." + key + "'");
    }
    if (expected && out.size() != expected) {
      fail(v, "'" + path_ + "." + key + "' needs " + std::to_string(expected) + " entries");
    }
    return out;
  }

  template <typename E, std::size_t N>
  E get_enum(const std::string& key, const EnumName<E> (&table)[N]) {
    const YAML::Node v = take(key);
    const auto s = v.IsScalar() ? v.Scalar() : std::string();
    for (const auto& e : table)
      if (s == e.name) return e.value;
    std::string allowed;
    for (const auto& e : table) allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
    fail(v, "'" + path_ + "." + key + "' must be one of: " + allowed);
  }

  Section section(const std::string& key) { return Section(take(key), path_ + "." + key, source_); }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const auto key = it->first.Scalar();
      if (!used_.count(key)) fail(it->first, "unknown key '" + path_ + "." + key + "'");
    }
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& what) const {
    const auto m = at.Mark();
    throw ConfigError(source_, m.line + 1, m.column + 1, what);
  }

 private:
  YAML::Node node_;
  std::string path_;
  const std::string& source_;
  std::set<std::string> used_;
};

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "config") {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source, e.mark.line + 1, e.mark.column + 1, e.msg);
  }
  if (!root || !root.IsMap()) throw ConfigError(source, 1, 1, "top level must be a mapping");
  ExperimentConfig cfg;
  detail::Section top(root, "config", source);
  const auto pair = [](const std::vector<double>& v) { return std::pair{v[0], v[1]}; };

  {
    auto s = top.section("scene");
    auto& sc = cfg.scene;
    sc.mode = s.get_enum("mode", detail::kModes);
    sc.image_size = s.get_count("image_size");
    std::tie(sc.min_object, sc.max_object) = pair(s.get_reals("object_size", 2));
    sc.density = s.get_count("density");
    sc.distractors = s.get_count("distractors");
    std::tie(sc.min_distractor_scale, sc.max_distractor_scale) = pair(s.get_reals("distractor_scale", 2));
    std::tie(sc.min_intensity, sc.max_intensity) = pair(s.get_reals("intensity", 2));
    sc.noise = s.get_real("noise");
    sc.seed = s.get<std::uint64_t>("seed");
    s.finish();
    try {
      sc.validate();
    } catch (const std::invalid_argument& e) {
      s.fail(root["scene"], e.what());
    }
  }
  {
    auto s = top.section("dataset");
    cfg.dataset.train_images = s.get_count("train_images");
    cfg.dataset.test_images = s.get_count("test_images");
    s.finish();
  }
  {
    auto s = top.section("detector");
    auto& d = cfg.detector;
    d.backbone_channels = s.get_count("backbone_channels");
    d.neck_channels = s.get_count("neck_channels");
    d.neck = s.get_enum("neck", detail::kNecks);
    d.num_classes = s.get_count("num_classes");
    d.scale_thresholds = s.get_reals("scale_thresholds");
    s.finish();
  }
  {
    auto s = top.section("connection");
    auto& c = cfg.detector.connection;
    c.form = s.get_enum("form", detail::kForms);
    c.n = s.get_real("n");
    if (c.form == ConnectionForm::complete) {
      c.matrix = s.get_reals("matrix");
    } else if (s.has("matrix")) {
      s.fail(root["connection"]["matrix"], "'connection.matrix' is only valid for the complete form");
    }
    c.variant_strengths = s.get_enum("variant_strengths", detail::kVariantStrengths);
    auto a = s.section("addons");
    c.addons.projection = a.get_bool("projection");
    c.addons.norm = a.get_bool("norm");
    c.addons.activation = a.get_bool("activation");
    a.finish();
    c.attach_point = s.get_enum("attach_point", detail::kAttach);
    s.finish();
    try {
      cfg.detector.validate();
    } catch (const std::invalid_argument& e) {
      s.fail(root["connection"], e.what());
    }
  }
  {
    auto s = top.section("training");
    auto& t = cfg.training;
    t.epochs = s.get_count("epochs");
    t.batch_size = s.get_count("batch_size");
    t.lr = s.get_real("lr");
    t.momentum = s.get_real("momentum");
    t.weight_decay = s.get_real("weight_decay");
    t.warmup_fraction = s.get_real("warmup_fraction");
    t.decay_points = s.get_reals("decay_points");
    t.decay_factor = s.get_real("decay_factor");
    t.grad_clip = s.get_real("grad_clip");
    t.loss.focal_alpha = s.get_real("focal_alpha");
    t.loss.focal_gamma = s.get_real("focal_gamma");
    t.loss.box_weight = s.get_real("box_weight");
    const YAML::Node seeds = s.take("seeds");
    if (!seeds.IsSequence() || seeds.size() == 0) s.fail(seeds, "'training.seeds' must be a non-empty list");
    cfg.seeds.clear();
    for (const auto& e : seeds) {
      try {
        cfg.seeds.push_back(e.as<std::uint64_t>());
      } catch (const YAML::Exception&) {
        s.fail(e, "seeds must be non-negative integers");
      }
    }
    s.finish();
    try {
      t.validate();
    } catch (const std::invalid_argument& e) {
      s.fail(root["training"], e.what());
    }
  }
  {
    auto s = top.section("evaluation");
    cfg.iou_threshold = s.get_real("iou_threshold");
    cfg.decode.score_threshold = s.get_real("score_threshold");
    cfg.decode.nms_threshold = s.get_real("nms_threshold");
    cfg.decode.max_detections = s.get_count("max_detections");
    s.finish();
  }
  {
    auto s = top.section("output");
    cfg.output_dir = s.get<std::string>("directory");
    s.finish();
  }
  top.finish();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

inline std::string dump_config(const ExperimentConfig& cfg) {
  using detail::format_double;
  YAML::Emitter out;
  auto reals = [&](const std::vector<double>& v) {
    out << YAML::Flow << YAML::BeginSeq;
    for (double x : v) out << format_double(x);
    out << YAML::EndSeq;
  };
  const auto& sc = cfg.scene;
  out << YAML::BeginMap;
  out << YAML::Key << "scene" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "mode" << YAML::Value << detail::enum_name(detail::kModes, sc.mode);
  out << YAML::Key << "image_size" << YAML::Value << sc.image_size;
  out << YAML::Key << "object_size" << YAML::Value;
  reals({sc.min_object, sc.max_object});
  out << YAML::Key << "density" << YAML::Value << sc.density;
  out << YAML::Key << "distractors" << YAML::Value << sc.distractors;
  out << YAML::Key << "distractor_scale" << YAML::Value;
  reals({sc.min_distractor_scale, sc.max_distractor_scale});
  out << YAML::Key << "intensity" << YAML::Value;
  reals({sc.min_intensity, sc.max_intensity});
  out << YAML::Key << "noise" << YAML::Value << format_double(sc.noise);
  out << YAML::Key << "seed" << YAML::Value << sc.seed;
  out << YAML::EndMap;

  out << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "train_images" << YAML::Value << cfg.dataset.train_images;
  out << YAML::Key << "test_images" << YAML::Value << cfg.dataset.test_images;
  out << YAML::EndMap;

  const auto& d = cfg.detector;
  out << YAML::Key << "detector" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "backbone_channels" << YAML::Value << d.backbone_channels;
  out << YAML::Key << "neck_channels" << YAML::Value << d.neck_channels;
  out << YAML::Key << "neck" << YAML::Value << detail::enum_name(detail::kNecks, d.neck);
  out << YAML::Key << "num_classes" << YAML::Value << d.num_classes;
  out << YAML::Key << "scale_thresholds" << YAML::Value;
  reals(d.scale_thresholds);
  out << YAML::EndMap;

  const auto& c = d.connection;
  out << YAML::Key << "connection" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "form" << YAML::Value << detail::enum_name(detail::kForms, c.form);
  out << YAML::Key << "n" << YAML::Value << format_double(c.n);
  if (c.form == ConnectionForm::complete) {
    out << YAML::Key << "matrix" << YAML::Value;
    reals(c.matrix);
  }
  out << YAML::Key << "variant_strengths" << YAML::Value
      << detail::enum_name(detail::kVariantStrengths, c.variant_strengths);
  out << YAML::Key << "addons" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "projection" << YAML::Value << c.addons.projection;
  out << YAML::Key << "norm" << YAML::Value << c.addons.norm;
  out << YAML::Key << "activation" << YAML::Value << c.addons.activation;
  out << YAML::EndMap;
  out << YAML::Key << "attach_point" << YAML::Value << detail::enum_name(detail::kAttach, c.attach_point);
  out << YAML::EndMap;

  const auto& t = cfg.training;
  out << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << t.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "lr" << YAML::Value << format_double(t.lr);
  out << YAML::Key << "momentum" << YAML::Value << format_double(t.momentum);
  out << YAML::Key << "weight_decay" << YAML::Value << format_double(t.weight_decay);
  out << YAML::Key << "warmup_fraction" << YAML::Value << format_double(t.warmup_fraction);
  out << YAML::Key << "decay_points" << YAML::Value;
  reals(t.decay_points);
  out << YAML::Key << "decay_factor" << YAML::Value << format_double(t.decay_factor);
  out << YAML::Key << "grad_clip" << YAML::Value << format_double(t.grad_clip);
  out << YAML::Key << "focal_alpha" << YAML::Value << format_double(t.loss.focal_alpha);
  out << YAML::Key << "focal_gamma" << YAML::Value << format_double(t.loss.focal_gamma);
  out << YAML::Key << "box_weight" << YAML::Value << format_double(t.loss.box_weight);
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.seeds;
  out << YAML::EndMap;

  out << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "iou_threshold" << YAML::Value << format_double(cfg.iou_threshold);
  out << YAML::Key << "score_threshold" << YAML::Value << format_double(cfg.decode.score_threshold);
  out << YAML::Key << "nms_threshold" << YAML::Value << format_double(cfg.decode.nms_threshold);
  out << YAML::Key << "max_detections" << YAML::Value << cfg.decode.max_detections;
  out << YAML::EndMap;

  out << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "directory" << YAML::Value << cfg.output_dir;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

/// FNV-1a 64 of the canonical dump.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : dump_config(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace rcnet
