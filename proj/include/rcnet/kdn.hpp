#pragma once

// Knowledge discovery: per-image salient statistics of annotated objects on
// each cascade level, turned into amplification factors and fused features.
//
// Per image: channel-max map of each level -> project every object box onto
// the level grid -> max over the projected region -> mean over objects
// (lambda^e) -> lambda = L * softmax(lambda^e), L = number of levels.
// Training fuses with the per-image lambda; inference fuses with the running
// mean of all per-image lambdas, keeping only levels with lambda >= 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/connection_algebra.hpp"
#include "rcnet/layers.hpp"
#include "rcnet/ops.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

/// Axis-aligned box in image pixels; (x, y) is the top-left corner.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double area() const { return w * h; }
  double max_side() const { return std::max(w, h); }
  bool operator==(const Box&) const = default;
};

struct ObjectAnnotation {
  Box box;
  int class_id = 0;
  bool operator==(const ObjectAnnotation&) const = default;
};

/// Cell rectangle on a feature grid.
struct Region {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Region&) const = default;
};

/// Projects a box onto a grid of the given stride: floor of the near edge,
/// ceil of the far edge, at least one cell per side, clipped to the map.
inline Region project_region(const Box& box, std::size_t stride, std::size_t map_h,
                             std::size_t map_w) {
  if (stride == 0) throw std::invalid_argument("project_region: stride must be >= 1");
  const double s = static_cast<double>(stride);
  auto axis = [&](double lo, double len, std::size_t extent, std::size_t& start,
                  std::size_t& size) {
    const double first = std::floor(lo / s);
    double last = std::ceil((lo + len) / s);
    if (last < first + 1) last = first + 1;
    const double a = std::max(first, 0.0);
    const double b = std::min(last, static_cast<double>(extent));
    if (b <= a) {
      throw std::invalid_argument("project_region: box lies outside the feature map");
    }
    start = static_cast<std::size_t>(a);
    size = static_cast<std::size_t>(b - a);
  };
  Region r;
  axis(box.x, box.w, map_w, r.x, r.w);
  axis(box.y, box.h, map_h, r.y, r.h);
  return r;
}

/// Object-region salient pooling: max of a (1, H, W) map over a region.
inline double orsp(const Tensor& salient_map, const Region& region) {
  const auto p = detail::planes_of(salient_map.shape(), "orsp");
  if (p.c != 1 || p.n != 1) throw std::invalid_argument("orsp: expected a (1, H, W) map");
  if (region.w == 0 || region.h == 0) throw std::invalid_argument("orsp: empty region");
  if (region.x + region.w > p.w || region.y + region.h > p.h) {
    throw std::invalid_argument("orsp: region exceeds map bounds");
  }
  auto v = salient_map.data();
  double best = v[region.y * p.w + region.x];
  for (std::size_t y = region.y; y < region.y + region.h; ++y)
    for (std::size_t x = region.x; x < region.x + region.w; ++x) best = std::max(best, v[y * p.w + x]);
  return best;
}

/// lambda = L * softmax(expectations).
inline Factors scaled_softmax(std::span<const double> expectations) {
  NoGradGuard no_grad;
  const Tensor s = softmax(Tensor({expectations.size()},
                                  std::vector<double>(expectations.begin(), expectations.end())));
  std::vector<double> v(s.data().begin(), s.data().end());
  for (double& x : v) x *= static_cast<double>(expectations.size());
  return Factors{std::move(v)};
}

/// Mean over objects of the salient value of each level (lambda^e).
inline std::vector<double> salient_expectations(const FeatureCascade& cascade,
                                                std::span<const ObjectAnnotation> objects) {
  cascade.validate();
  if (objects.empty()) throw std::invalid_argument("salient_expectations: no objects");
  NoGradGuard no_grad;
  std::vector<double> expect;
  expect.reserve(cascade.levels.size());
  for (std::size_t l = 0; l < cascade.levels.size(); ++l) {
    const Tensor map = channel_max(cascade.levels[l].detach());
    const auto p = detail::planes_of(map.shape(), "salient_expectations");
    double acc = 0.0;
    for (const auto& obj : objects) {
      acc += orsp(map, project_region(obj.box, cascade.strides[l], p.h, p.w));
    }
    expect.push_back(acc / static_cast<double>(objects.size()));
  }
  return expect;
}

/// Per-image factors; nullopt for an image without objects.
inline std::optional<Factors> image_factors(const FeatureCascade& cascade,
                                            std::span<const ObjectAnnotation> objects) {
  if (objects.empty()) return std::nullopt;
  return scaled_softmax(salient_expectations(cascade, objects));
}

/// Inference-time factors: mean of all per-image factors seen in training.
struct FactorSet {
  Factors lambda_infer;
  std::vector<bool> relevant;
  std::size_t images = 0;
};

/// Running sums of per-image factors, one stack per level.
class SalientStack {
 public:
  SalientStack() = default;
  explicit SalientStack(std::size_t levels) : sums_(levels, 0.0) {}

  void update(const Factors& lambda) {
    if (sums_.empty()) sums_.assign(lambda.size(), 0.0);
    if (lambda.size() != sums_.size()) {
      throw std::invalid_argument("SalientStack: expected " + std::to_string(sums_.size()) +
                                  " factors, got " + std::to_string(lambda.size()));
    }
    for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += lambda[i];
    ++count_;
  }

  std::size_t count() const { return count_; }
  std::span<const double> sums() const { return sums_; }

  FactorSet finalize() const {
    if (count_ == 0) throw std::logic_error("SalientStack: finalize on an empty stack");
    FactorSet fs;
    fs.images = count_;
    for (double s : sums_) {
      const double m = s / static_cast<double>(count_);
      fs.lambda_infer.values.push_back(m);
      fs.relevant.push_back(m >= 1.0);
    }
    return fs;
  }

  static SalientStack restore(std::vector<double> sums, std::size_t count) {
    SalientStack s;
    s.sums_ = std::move(sums);
    s.count_ = count;
    return s;
  }

 private:
  std::vector<double> sums_;
  std::size_t count_ = 0;
};

/// Training-time fusion: sum_l lambda_l * resize(p_l(F_l)) on the finest grid.
inline Tensor fuse_train(const FeatureCascade& cascade, const Factors& lambda,
                         std::span<const Conv2d> projections = {}) {
  if (lambda.size() != cascade.levels.size()) {
    throw std::invalid_argument("fuse_train: one factor per level required");
  }
  const auto aligned = align_cascade(cascade, 0, projections);
  return weighted_sum(aligned, lambda.values);
}

/// Inference-time fusion over relevant levels only.
inline Tensor fuse_infer(const FeatureCascade& cascade, const FactorSet& fs,
                         std::span<const Conv2d> projections = {}) {
  if (fs.lambda_infer.size() != cascade.levels.size() || fs.relevant.size() != cascade.levels.size()) {
    throw std::invalid_argument("fuse_infer: factor set does not match the cascade");
  }
  if (std::none_of(fs.relevant.begin(), fs.relevant.end(), [](bool r) { return r; })) {
    throw std::domain_error("fuse_infer: degenerate factor set, no level has lambda >= 1");
  }
  const auto aligned = align_cascade(cascade, 0, projections);
  Tensor out;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (!fs.relevant[i]) continue;
    Tensor term = scale(aligned[i], fs.lambda_infer[i]);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

}  // namespace rcnet
