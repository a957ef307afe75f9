#pragma once

// SGD training loop with momentum, linear warm-up and step decay, plus the
// per-epoch evaluation that feeds the loss/AP/interference trajectory.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/harness/analysis.hpp"
#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/eval.hpp"
#include "rcnet/harness/loss.hpp"
#include "rcnet/harness/scene.hpp"
#include "rcnet/harness/targets.hpp"

namespace rcnet {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.05;
  std::vector<double> decay_points{2.0 / 3.0, 11.0 / 12.0};  // fractions of all steps
  double decay_factor = 0.1;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  LossConfig loss;
  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(lr >= 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0)) {
      throw std::invalid_argument("TrainConfig: invalid optimizer hyperparameters");
    }
    if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) {
      throw std::invalid_argument("TrainConfig: warmup_fraction must be in [0, 1]");
    }
    if (!(loss.focal_gamma >= 0)) throw std::invalid_argument("TrainConfig: focal_gamma must be >= 0");
  }
};

/// Learning rate at a step: linear warm-up, then step decay at the given
/// fractions of the run.
inline double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  double lr = cfg.lr;
  const double warm = std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (warm > 0 && static_cast<double>(step) < warm) lr *= (static_cast<double>(step) + 1) / warm;
  const double progress = total_steps ? static_cast<double>(step) / total_steps : 0.0;
  for (double p : cfg.decay_points) {
    if (progress >= p) lr *= cfg.decay_factor;
  }
  return lr;
}

class Sgd {
 public:
  Sgd(std::vector<NamedTensor>& params, double momentum, double weight_decay)
      : params_(params), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }

  /// Global L2 norm of all gradients.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
  }

  void step(double lr, double grad_scale = 1.0) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      auto g = t.grad();
      auto w = t.mutable_data();
      auto& v = velocity_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double d = g[k] * grad_scale + weight_decay_ * w[k];
        v[k] = momentum_ * v[k] + d;
        w[k] -= lr * v[k];
      }
    }
  }

 private:
  std::vector<NamedTensor>& params_;
  double momentum_, weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct EvalSummary {
  APReport ap;
  std::vector<double> interference;  // per branch, averaged over images
};

/// Runs the detector over a dataset and scores it.
inline EvalSummary evaluate_detector(const ToyDetector& det, std::span<const Scene> scenes,
                                     const DecodeConfig& decode, double iou_threshold = 0.5) {
  NoGradGuard no_grad;
  const auto strides = det.config().branch_strides();
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<ObjectAnnotation>> gts;
  EvalSummary out;
  out.interference.assign(strides.size(), 0.0);
  for (const auto& s : scenes) {
    const auto r = det.forward(s.image);
    const double size = static_cast<double>(s.image.dim(2));
    dets.push_back(decode_detections(r, strides, size, size, decode));
    gts.push_back(s.objects);
    const auto maps = saliency_from_features(r.branch_inputs);
    const auto m = interference_metric(maps, s.objects, strides);
    for (std::size_t l = 0; l < m.size(); ++l) out.interference[l] += m[l];
  }
  if (!scenes.empty()) {
    for (double& v : out.interference) v /= static_cast<double>(scenes.size());
  }
  out.ap = evaluate_ap(dets, gts, iou_threshold);
  return out;
}

struct TrajectoryRow {
  std::size_t epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_cls = 0, loss_box = 0;
  std::optional<double> ap50, ap_small;
  std::vector<double> interference;
};

/// Raised when the loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trains in place. With a non-empty test set every epoch is evaluated.
inline std::vector<TrajectoryRow> train(ToyDetector& det, std::span<const Scene> train_set,
                                        std::span<const Scene> test_set, const TrainConfig& cfg,
                                        std::uint64_t seed, const DecodeConfig& decode = {}) {
  cfg.validate();
  std::vector<TrajectoryRow> trajectory;
  if (cfg.epochs == 0 || train_set.empty()) return trajectory;

  Rng rng(seed ^ 0x7a11u);
  Sgd opt(det.parameters(), cfg.momentum, cfg.weight_decay);
  const auto strides = det.config().branch_strides();
  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const bool kdn = det.config().connection.form == ConnectionForm::kdn;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    TrajectoryRow row;
    row.epoch = epoch + 1;
    double sum_total = 0, sum_cls = 0, sum_box = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      det.zero_grad();
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, order.size());
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& scene = train_set[order[k]];
        ForwardOptions fo;
        fo.training = true;
        fo.objects = scene.objects;
        LossParts loss;
        try {
          const auto r = det.forward(scene.image, fo);
          const auto targets = assign_targets(scene.objects, branch_geometry(r, strides),
                                              det.config().scale_thresholds,
                                              det.config().num_classes);
          loss = detection_loss(r, targets, cfg.loss);
          if (kdn && r.image_lambda) det.stack().update(*r.image_lambda);
          scale(loss.total, inv).backward();
        } catch (const std::domain_error& e) {
          std::ostringstream os;
          os << "training diverged at epoch " << epoch + 1 << ", step " << step << ": "
             << e.what();
          throw DivergenceError(os.str());
        }
        sum_total += loss.total.item();
        sum_cls += loss.cls;
        sum_box += loss.box;
      }
      const double lr = learning_rate(cfg, step, total_steps);
      double grad_scale = 1.0;
      if (cfg.grad_clip > 0) {
        const double norm = opt.grad_norm();
        if (!std::isfinite(norm)) {
          throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) +
                                ": non-finite gradient norm");
        }
        if (norm > cfg.grad_clip) grad_scale = cfg.grad_clip / norm;
      }
      opt.step(lr, grad_scale);
      row.lr = lr;
    }
    const double n = static_cast<double>(train_set.size());
    row.loss_total = sum_total / n;
    row.loss_cls = sum_cls / n;
    row.loss_box = sum_box / n;
    if (kdn && det.stack().count() > 0) det.set_factor_set(det.stack().finalize());
    if (!test_set.empty()) {
      const auto ev = evaluate_detector(det, test_set, decode);
      row.ap50 = ev.ap.ap50;
      row.ap_small = ev.ap.ap_small;
      row.interference = ev.interference;
    }
    trajectory.push_back(row);
  }
  det.zero_grad();
  return trajectory;
}

}  // namespace rcnet
