#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/loss.hpp"
#include "rcnet/harness/scene.hpp"
#include "rcnet/harness/targets.hpp"
#include "rcnet/kdn.hpp"
#include "rcnet/ops.hpp"

namespace rcnet {

/// Min-max scaling to [0, 1]; a constant map becomes all zeros.
inline Tensor normalize_saliency(const Tensor& map) {
  auto v = map.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.0);
  const double range = *hi - *lo;
  if (range > 0) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  }
  return Tensor(map.shape(), std::move(out));
}

/// Channel-max of every head input, normalized per level.
inline std::vector<Tensor> saliency_from_features(std::span<const Tensor> head_inputs) {
  NoGradGuard no_grad;
  std::vector<Tensor> maps;
  for (const auto& f : head_inputs) maps.push_back(normalize_saliency(channel_max(f.detach())));
  return maps;
}

inline std::vector<Tensor> saliency_maps(const ToyDetector& detector, const Tensor& image) {
  NoGradGuard no_grad;
  return saliency_from_features(detector.forward(image).branch_inputs);
}

/// Level 0: mean saliency inside ground-truth regions (focus). Other levels:
/// mean saliency outside every ground-truth region (interference).
inline std::vector<double> interference_metric(std::span<const Tensor> saliency,
                                               std::span<const ObjectAnnotation> objects,
                                               std::span<const std::size_t> strides) {
  if (saliency.size() != strides.size()) {
    throw std::invalid_argument("interference_metric: one stride per saliency map required");
  }
  std::vector<double> out;
  for (std::size_t l = 0; l < saliency.size(); ++l) {
    const auto p = detail::planes_of(saliency[l].shape(), "interference_metric");
    std::vector<unsigned char> inside(p.h * p.w, 0);
    for (const auto& obj : objects) {
      const Region r = project_region(obj.box, strides[l], p.h, p.w);
      for (std::size_t y = r.y; y < r.y + r.h; ++y)
        for (std::size_t x = r.x; x < r.x + r.w; ++x) inside[y * p.w + x] = 1;
    }
    const unsigned char want = l == 0 ? 1 : 0;
    double acc = 0.0;
    std::size_t n = 0;
    auto v = saliency[l].data();
    for (std::size_t i = 0; i < inside.size(); ++i) {
      if (inside[i] != want) continue;
      acc += v[i];
      ++n;
    }
    out.push_back(n ? acc / static_cast<double>(n) : 0.0);
  }
  return out;
}

struct GradDecomposition {
  std::vector<double> full;      // autodiff gradient through every path
  std::vector<double> original;  // connection output held constant
  std::vector<double> renormalized;  // pass-through branch inputs held constant
  double max_abs_residual = 0.0;     // max |full - (original + renormalized)|
  double renormalized_norm = 0.0;
  double baseline_norm = 0.0;   // same weights, plain pyramid routing
  double norm_ratio = 0.0;      // |full| / |baseline|
};

namespace detail {

inline std::vector<double> batch_gradient(const ToyDetector& det, std::span<const Scene> batch,
                                          const LossConfig& loss_cfg, const ForwardOptions& base,
                                          const Tensor& param) {
  param.handle()->grad.assign(param.numel(), 0.0);
  const auto strides = det.config().branch_strides();
  for (const auto& scene : batch) {
    ForwardOptions opt = base;
    opt.objects = scene.objects;
    const auto r = det.forward(scene.image, opt);
    const auto targets = assign_targets(scene.objects, branch_geometry(r, strides),
                                        det.config().scale_thresholds, det.config().num_classes);
    const auto loss = detection_loss(r, targets, loss_cfg);
    if (loss.total.requires_grad()) loss.total.backward();
  }
  std::vector<double> g(param.grad().begin(), param.grad().end());
  return g;
}

inline double l2(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Splits the gradient of the shared shallow parameter into the part that
/// reaches it through the original branch paths and the part that flows
/// through the renormalized connection. Requires a single-hop connection in a
/// plain FPN neck so that the two path sets are disjoint at the head inputs.
inline GradDecomposition grad_decomposition_check(ToyDetector& det, std::span<const Scene> batch,
                                                  const LossConfig& loss_cfg,
                                                  ForwardOptions base = {}) {
  const auto& cfg = det.config();
  const auto form = cfg.connection.form;
  if (cfg.neck != NeckType::fpn ||
      (form != ConnectionForm::economical && form != ConnectionForm::variant_sm &&
       form != ConnectionForm::variant_sl)) {
    throw std::invalid_argument(
        "grad_decomposition_check: path detaching needs an economical or variant connection "
        "on an FPN neck");
  }
  const Tensor param = det.shared_shallow_parameter();
  det.zero_grad();
  GradDecomposition rep;
  base.training = true;
  rep.full = detail::batch_gradient(det, batch, loss_cfg, base, param);
  ForwardOptions orig = base;
  orig.detach_connection = true;
  rep.original = detail::batch_gradient(det, batch, loss_cfg, orig, param);
  ForwardOptions rc = base;
  rc.detach_direct = true;
  rep.renormalized = detail::batch_gradient(det, batch, loss_cfg, rc, param);
  ForwardOptions bypass = base;
  bypass.bypass_connection = true;
  const auto baseline = detail::batch_gradient(det, batch, loss_cfg, bypass, param);
  det.zero_grad();

  for (std::size_t i = 0; i < rep.full.size(); ++i) {
    rep.max_abs_residual = std::max(rep.max_abs_residual,
                                    std::abs(rep.full[i] - (rep.original[i] + rep.renormalized[i])));
  }
  rep.renormalized_norm = detail::l2(rep.renormalized);
  rep.baseline_norm = detail::l2(baseline);
  rep.norm_ratio = rep.baseline_norm > 0 ? detail::l2(rep.full) / rep.baseline_norm : 0.0;
  return rep;
}

}  // namespace rcnet
