#pragma once

// COCO-style AP at a single IoU threshold: greedy score-ordered matching per
// image, dataset-wide precision/recall, 101-point interpolation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/targets.hpp"
#include "rcnet/kdn.hpp"

namespace rcnet {

struct Detection {
  Box box;
  double score = 0.0;
  int class_id = 0;
  std::size_t source_level = 0;
};

enum class SizeBucket { small, medium, large };

/// Size buckets follow the branch partition: max side < 16, < 32, else large.
inline SizeBucket size_bucket(const Box& b) {
  const double s = b.max_side();
  if (s < 16) return SizeBucket::small;
  if (s < 32) return SizeBucket::medium;
  return SizeBucket::large;
}

struct APReport {
  std::optional<double> ap50;
  std::optional<double> ap_small, ap_medium, ap_large;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_box(Box b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width), y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.x + b.w, 0.0, width), y1 = std::clamp(b.y + b.h, 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

/// Greedy class-wise non-maximum suppression; input need not be sorted.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold,
                                  std::size_t max_keep) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> keep;
  for (const auto& d : dets) {
    if (keep.size() >= max_keep) break;
    const bool suppressed = std::any_of(keep.begin(), keep.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) keep.push_back(d);
  }
  return keep;
}

struct DecodeConfig {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  std::size_t max_detections = 100;
  bool operator==(const DecodeConfig&) const = default;
};

/// Turns head outputs into clipped, suppressed detections.
inline std::vector<Detection> decode_detections(const ForwardResult& r,
                                                std::span<const std::size_t> strides,
                                                double image_w, double image_h,
                                                const DecodeConfig& cfg) {
  std::vector<Detection> dets;
  for (std::size_t l = 0; l < r.cls_logits.size(); ++l) {
    const auto p = detail::planes_of(r.cls_logits[l].shape(), "decode");
    const std::size_t plane = p.h * p.w;
    const double s = static_cast<double>(strides[l]);
    auto logits = r.cls_logits[l].data();
    auto box = r.box_preds[l].data();
    for (std::size_t k = 0; k < p.c; ++k) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double score = sigmoid_scalar(logits[k * plane + i]);
        if (score < cfg.score_threshold) continue;
        const double row = static_cast<double>(i / p.w), col = static_cast<double>(i % p.w);
        const double cx = (col + box[i]) * s, cy = (row + box[plane + i]) * s;
        const double w = s * std::exp(std::clamp(box[2 * plane + i], -8.0, 8.0));
        const double h = s * std::exp(std::clamp(box[3 * plane + i], -8.0, 8.0));
        Box b = clip_box({cx - w / 2, cy - h / 2, w, h}, image_w, image_h);
        if (b.w <= 0 || b.h <= 0) continue;
        dets.push_back({b, score, static_cast<int>(k), l});
      }
    }
  }
  return nms(std::move(dets), cfg.nms_threshold, cfg.max_detections);
}

namespace detail {

struct ScoredMatch {
  double score;
  std::size_t order;  // tie-break: image then rank within image
  bool tp;
};

// AP from score-ordered TP/FP flags, 101-point interpolated precision.
inline double interpolated_ap(std::vector<ScoredMatch> matches, std::size_t num_gt) {
  std::stable_sort(matches.begin(), matches.end(), [](const ScoredMatch& a, const ScoredMatch& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.order < b.order;
  });
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (const auto& m : matches) {
    (m.tp ? tp : fp) += 1.0;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(num_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return ap / 101.0;
}

// One IoU threshold, optional size bucket. Ground truth outside the bucket is
// ignored: detections matched to it, or unmatched detections outside the
// bucket, do not count.
inline std::optional<double> bucket_ap(std::span<const std::vector<Detection>> dets,
                                       std::span<const std::vector<ObjectAnnotation>> gts,
                                       double iou_threshold, std::optional<SizeBucket> bucket) {
  std::vector<ScoredMatch> matches;
  std::size_t num_gt = 0, order = 0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    const auto& g = gts[img];
    std::vector<bool> ignore(g.size()), taken(g.size(), false);
    for (std::size_t j = 0; j < g.size(); ++j) {
      ignore[j] = bucket && size_bucket(g[j].box) != *bucket;
      if (!ignore[j]) ++num_gt;
    }
    std::vector<std::size_t> idx(dets[img].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return dets[img][a].score > dets[img][b].score;
    });
    for (std::size_t di : idx) {
      const auto& d = dets[img][di];
      // Prefer unmatched non-ignored ground truth, then ignored.
      long best = -1;
      double best_iou = iou_threshold;
      for (int pass = 0; pass < 2 && best < 0; ++pass) {
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (taken[j] || ignore[j] != (pass == 1) || g[j].class_id != d.class_id) continue;
          const double v = iou(d.box, g[j].box);
          if (v >= best_iou) {
            best_iou = v;
            best = static_cast<long>(j);
          }
        }
      }
      if (best >= 0) {
        taken[static_cast<std::size_t>(best)] = true;
        if (!ignore[static_cast<std::size_t>(best)]) matches.push_back({d.score, order, true});
      } else if (!bucket || size_bucket(d.box) == *bucket) {
        matches.push_back({d.score, order, false});
      }
      ++order;
    }
  }
  if (num_gt == 0) return std::nullopt;
  return interpolated_ap(std::move(matches), num_gt);
}

}  // namespace detail

/// AP over a dataset; per-image detection and ground-truth lists align.
inline APReport evaluate_ap(std::span<const std::vector<Detection>> detections,
                            std::span<const std::vector<ObjectAnnotation>> ground_truth,
                            double iou_threshold = 0.5) {
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate_ap: detections and ground truth cover different images");
  }
  APReport rep;
  for (const auto& g : ground_truth) rep.num_gt += g.size();
  for (const auto& d : detections) rep.num_detections += d.size();
  rep.ap50 = detail::bucket_ap(detections, ground_truth, iou_threshold, std::nullopt);
  rep.ap_small = detail::bucket_ap(detections, ground_truth, iou_threshold, SizeBucket::small);
  rep.ap_medium = detail::bucket_ap(detections, ground_truth, iou_threshold, SizeBucket::medium);
  rep.ap_large = detail::bucket_ap(detections, ground_truth, iou_threshold, SizeBucket::large);
  return rep;
}

}  // namespace rcnet
