#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/targets.hpp"
#include "rcnet/ops.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

namespace detail {

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

/// Focal loss over every cell, -alpha (1 - p_t)^gamma log(p_t), summed and
/// divided by `normalizer`. targets holds 0 or 1 per logit.
inline Tensor focal_loss(const Tensor& logits, std::span<const double> targets, double alpha,
                         double gamma, double normalizer = 1.0) {
  if (targets.size() != logits.numel()) {
    throw std::invalid_argument("focal_loss: targets do not match logits");
  }
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  if (!(normalizer > 0.0)) throw std::invalid_argument("focal_loss: normalizer must be > 0");
  auto x = logits.data();
  std::vector<double> dz(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double sign = targets[i] > 0.5 ? 1.0 : -1.0;
    const double z = sign * x[i];
    const double p = sigmoid_scalar(z), q = sigmoid_scalar(-z);  // p_t, 1 - p_t
    const double log_p = -detail::softplus(-z);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    total += -alpha * mod * log_p;
    // d/dz of -alpha q^gamma log p = -alpha q^gamma (q - gamma p log p)
    dz[i] = sign * (-alpha * mod * (q - gamma * p * log_p)) / normalizer;
  }
  return detail::make_result(
      {}, {total / normalizer}, {logits},
      [dz = std::move(dz)](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0] * dz[i];
      },
      "focal_loss");
}

/// 0.5 * sum over positive cells of the squared box error, / normalizer.
inline Tensor box_loss(const Tensor& pred, std::span<const double> target,
                       std::span<const unsigned char> positive, double normalizer = 1.0) {
  const auto p = detail::planes_of(pred.shape(), "box_loss");
  const std::size_t plane = p.h * p.w;
  if (target.size() != pred.numel() || positive.size() != plane || p.c * plane != pred.numel()) {
    throw std::invalid_argument("box_loss: target geometry mismatch");
  }
  auto x = pred.data();
  std::vector<double> diff(x.size(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < p.c; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (!positive[i]) continue;
      const std::size_t k = c * plane + i;
      diff[k] = x[k] - target[k];
      total += 0.5 * diff[k] * diff[k];
    }
  }
  for (double& d : diff) d /= normalizer;
  return detail::make_result(
      {}, {total / normalizer}, {pred},
      [diff = std::move(diff)](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0] * diff[i];
      },
      "box_loss");
}

struct LossConfig {
  double focal_alpha = 1.0;
  double focal_gamma = 2.0;
  double box_weight = 1.0;
  bool operator==(const LossConfig&) const = default;
};

struct LossParts {
  Tensor total;
  double cls = 0.0;
  double box = 0.0;
};

inline std::vector<LevelGeometry> branch_geometry(const ForwardResult& r,
                                                  std::span<const std::size_t> strides) {
  std::vector<LevelGeometry> g;
  for (std::size_t i = 0; i < r.cls_logits.size(); ++i) {
    const auto p = detail::planes_of(r.cls_logits[i].shape(), "branch_geometry");
    g.push_back({strides[i], p.h, p.w});
  }
  return g;
}

/// Focal classification plus box regression, both normalized by the number
/// of positives (at least 1).
inline LossParts detection_loss(const ForwardResult& r, const Targets& targets,
                                const LossConfig& cfg) {
  const double norm = std::max<double>(1.0, static_cast<double>(targets.num_positive()));
  Tensor cls_total, box_total;
  for (std::size_t l = 0; l < r.cls_logits.size(); ++l) {
    const auto& lt = targets.levels.at(l);
    Tensor c = focal_loss(r.cls_logits[l], lt.cls, cfg.focal_alpha, cfg.focal_gamma, norm);
    cls_total = cls_total.defined() ? add(cls_total, c) : c;
    Tensor b = box_loss(r.box_preds[l], lt.box, lt.positive, norm);
    box_total = box_total.defined() ? add(box_total, b) : b;
  }
  LossParts parts;
  parts.cls = cls_total.item();
  parts.box = box_total.item();
  parts.total = add(cls_total, scale(box_total, cfg.box_weight));
  return parts;
}

}  // namespace rcnet
