#pragma once

// Implementation of the rcnet command-line subcommands. Each command writes
// human-readable output to `out` and files under the given directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcnet/config.hpp"
#include "rcnet/connection_algebra.hpp"
#include "rcnet/harness/analysis.hpp"
#include "rcnet/harness/eval.hpp"
#include "rcnet/harness/train.hpp"
#include "rcnet/io.hpp"

namespace rcnet::commands {

namespace fs = std::filesystem;
using detail::format_double;

inline std::string format_list(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

inline std::string opt_number(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("absent");
}

/// --seed replaces both the scene seed and the training seed list.
inline void apply_seed_override(ExperimentConfig& cfg, std::optional<std::uint64_t> seed) {
  if (!seed) return;
  cfg.scene.seed = *seed;
  cfg.seeds = {*seed};
}

inline void generate(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  const Dataset data = generate_experiment_dataset(cfg);
  save_dataset(out_dir, data, cfg);
  std::size_t objects = 0;
  for (const auto& s : data.train) objects += s.objects.size();
  for (const auto& s : data.test) objects += s.objects.size();
  out << "wrote " << data.train.size() << " train and " << data.test.size() << " test images ("
      << objects << " objects) to " << out_dir.string() << "\n";
}

/// Trains one detector per configured seed. Each seed gets
/// <out>/seed_<s>/{checkpoint/, trajectory.csv}.
inline void train(const ExperimentConfig& cfg, const std::optional<fs::path>& dataset_dir,
                  const fs::path& out_dir, std::ostream& out) {
  const Dataset data = dataset_dir ? load_dataset(*dataset_dir) : generate_experiment_dataset(cfg);
  for (std::uint64_t seed : cfg.seeds) {
    ToyDetector det(cfg.detector, seed);
    const auto rows = train(det, data.train, data.test, cfg.training, seed, cfg.decode);
    const fs::path dir = out_dir / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    save_checkpoint(dir / "checkpoint", det, cfg, {config_hash(cfg), rows.size(), seed});
    detail::write_text(dir / "trajectory.csv",
                       trajectory_csv(rows, det.config().branch_strides().size()));
    out << "seed " << seed << ": " << rows.size() << " epochs";
    if (!rows.empty()) {
      out << ", final loss " << format_double(rows.back().loss_total) << ", ap50 "
          << opt_number(rows.back().ap50);
    }
    out << " -> " << dir.string() << "\n";
  }
}

inline std::vector<std::vector<Detection>> read_detections(const fs::path& path) {
  const auto j = detail::read_json(path);
  std::vector<std::vector<Detection>> all;
  for (const auto& image : j) {
    std::vector<Detection> dets;
    for (const auto& d : image) {
      Detection det;
      det.box = detail::box_from_json(d.at("box"));
      det.score = d.at("score").get<double>();
      det.class_id = d.value("class_id", 0);
      if (!std::isfinite(det.score)) throw std::runtime_error(path.string() + ": non-finite score");
      dets.push_back(det);
    }
    all.push_back(std::move(dets));
  }
  return all;
}

inline std::string ap_csv(const APReport& r) {
  std::ostringstream os;
  os << "ap50,ap_small,ap_medium,ap_large,num_gt,num_detections\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  os << cell(r.ap50) << ',' << cell(r.ap_small) << ',' << cell(r.ap_medium) << ','
     << cell(r.ap_large) << ',' << r.num_gt << ',' << r.num_detections << "\n";
  return os.str();
}

/// Scores the test split, either with a checkpoint or with injected
/// detections (one list per test image).
inline APReport eval(const std::optional<fs::path>& checkpoint, const fs::path& dataset_dir,
                     const std::optional<fs::path>& detections_file, const fs::path& out_dir,
                     std::ostream& out, const std::optional<ExperimentConfig>& fallback_cfg = {}) {
  const Dataset data = load_dataset(dataset_dir);
  std::vector<std::vector<ObjectAnnotation>> gts;
  for (const auto& s : data.test) gts.push_back(s.objects);
  APReport rep;
  if (detections_file) {
    const auto dets = read_detections(*detections_file);
    if (dets.size() != gts.size()) {
      throw std::runtime_error(detections_file->string() + ": expected one detection list per test image (" +
                               std::to_string(gts.size()) + ")");
    }
    const double iou = fallback_cfg ? fallback_cfg->iou_threshold : 0.5;
    rep = evaluate_ap(dets, gts, iou);
  } else {
    if (!checkpoint) throw std::runtime_error("eval needs --checkpoint or --detections");
    const auto ck = load_checkpoint(*checkpoint);
    rep = evaluate_detector(ck.detector, data.test, ck.config.decode, ck.config.iou_threshold).ap;
  }
  fs::create_directories(out_dir);
  detail::write_text(out_dir / "eval.csv", ap_csv(rep));
  out << "ap50 " << opt_number(rep.ap50) << "\n"
      << "ap_small " << opt_number(rep.ap_small) << "\n"
      << "ap_medium " << opt_number(rep.ap_medium) << "\n"
      << "ap_large " << opt_number(rep.ap_large) << "\n"
      << "ground truth " << rep.num_gt << ", detections " << rep.num_detections << "\n";
  return rep;
}

/// Saliency images and per-image interference for the test split, plus the
/// gradient decomposition on the first training batch when the connection
/// supports path detaching.
inline void analyze(const fs::path& checkpoint, const fs::path& dataset_dir, const fs::path& out_dir,
                    std::size_t max_images, std::ostream& out) {
  auto ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(dataset_dir);
  const auto strides = ck.detector.config().branch_strides();
  fs::create_directories(out_dir / "saliency");

  std::ostringstream csv;
  csv << "image";
  for (std::size_t l = 0; l < strides.size(); ++l) csv << ",interference_p" << l + 3;
  csv << "\n";
  std::vector<double> mean(strides.size(), 0.0);
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const auto& scene = data.test[i];
    const auto maps = saliency_maps(ck.detector, scene.image);
    const auto m = interference_metric(maps, scene.objects, strides);
    csv << i;
    for (std::size_t l = 0; l < m.size(); ++l) {
      csv << ',' << format_double(m[l]);
      mean[l] += m[l] / static_cast<double>(data.test.size());
    }
    csv << "\n";
    if (i < max_images) {
      for (std::size_t l = 0; l < maps.size(); ++l) {
        write_pgm(out_dir / "saliency" /
                      ("image" + std::to_string(i) + "_p" + std::to_string(l + 3) + ".pgm"),
                  maps[l]);
      }
    }
  }
  detail::write_text(out_dir / "interference.csv", csv.str());
  out << "mean interference";
  for (std::size_t l = 0; l < mean.size(); ++l) out << " p" << l + 3 << "=" << format_double(mean[l]);
  out << "\n";

  std::ostringstream report;
  const auto& c = ck.config;
  const bool supported =
      c.detector.neck == NeckType::fpn &&
      (c.detector.connection.form == ConnectionForm::economical ||
       c.detector.connection.form == ConnectionForm::variant_sm ||
       c.detector.connection.form == ConnectionForm::variant_sl);
  if (supported && !data.train.empty()) {
    const std::size_t n = std::min<std::size_t>(c.training.batch_size, data.train.size());
    const auto g = grad_decomposition_check(ck.detector, std::span(data.train).first(n), c.training.loss);
    report << "parameter backbone.stem.weight\n"
           << "batch_images " << n << "\n"
           << "max_abs_residual " << format_double(g.max_abs_residual) << "\n"
           << "renormalized_norm " << format_double(g.renormalized_norm) << "\n"
           << "baseline_norm " << format_double(g.baseline_norm) << "\n"
           << "norm_ratio " << format_double(g.norm_ratio) << "\n";
  } else {
    report << "gradient decomposition needs an economical or variant connection on an FPN neck\n";
  }
  detail::write_text(out_dir / "grad_decomposition.txt", report.str());
  out << report.str();
}

/// Prints the factor/strength mapping in both directions.
inline void derive_strengths(const std::optional<std::vector<double>>& factors,
                             const std::optional<std::vector<double>>& strengths, std::ostream& out) {
  if (factors.has_value() == strengths.has_value()) {
    throw std::invalid_argument("derive-strengths needs exactly one of --factors or --strengths");
  }
  if (factors) {
    const auto s = strengths_from_factors(Factors{*factors});
    const auto back = factors_from_strengths(s);
    out << "factors " << format_list(*factors) << "\n"
        << "strengths " << format_list(s.values) << "\n"
        << "factors (round trip) " << format_list(back.values) << "\n";
  } else {
    const auto f = factors_from_strengths(Strengths{*strengths});
    const auto back = strengths_from_factors(f);
    out << "strengths " << format_list(*strengths) << "\n"
        << "factors " << format_list(f.values) << "\n"
        << "strengths (round trip) " << format_list(back.values) << "\n";
  }
}

}  // namespace rcnet::commands
