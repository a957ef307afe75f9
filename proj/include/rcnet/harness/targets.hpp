#pragma once

// Scale-based assignment: each object goes to exactly one branch by its max
// side, and its center cell on that branch's grid becomes the positive.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "rcnet/kdn.hpp"

namespace rcnet {

struct LevelGeometry {
  std::size_t stride;
  std::size_t height, width;
};

struct LevelTargets {
  LevelGeometry geometry;
  std::vector<double> cls;  // (K, H, W), 1 at positives
  std::vector<double> box;  // (4, H, W): dx, dy in cell units, log(w/s), log(h/s)
  std::vector<unsigned char> positive;  // (H, W)
  std::size_t num_positive = 0;
};

struct Targets {
  std::vector<LevelTargets> levels;
  std::vector<std::size_t> level_of;  // per input object
  std::size_t collisions = 0;         // objects that lost their cell to another

  std::size_t num_positive() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.num_positive;
    return n;
  }
};

/// Branch index for an object of the given max side. Objects beyond every
/// range fall to the coarsest branch.
inline std::size_t branch_for(double max_side, std::span<const double> thresholds) {
  std::size_t l = 0;
  while (l < thresholds.size() && max_side >= thresholds[l]) ++l;
  return l;
}

inline Targets assign_targets(std::span<const ObjectAnnotation> objects,
                              std::span<const LevelGeometry> levels,
                              std::span<const double> thresholds, std::size_t num_classes) {
  Targets t;
  for (const auto& g : levels) {
    LevelTargets lt;
    lt.geometry = g;
    lt.cls.assign(num_classes * g.height * g.width, 0.0);
    lt.box.assign(4 * g.height * g.width, 0.0);
    lt.positive.assign(g.height * g.width, 0);
    t.levels.push_back(std::move(lt));
  }
  // Smaller objects claim cells first.
  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return objects[a].box.area() < objects[b].box.area();
  });
  t.level_of.assign(objects.size(), 0);
  for (std::size_t idx : order) {
    const auto& obj = objects[idx];
    if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= num_classes) {
      throw std::invalid_argument("assign_targets: class id out of range");
    }
    const std::size_t l = std::min(branch_for(obj.box.max_side(), thresholds), levels.size() - 1);
    t.level_of[idx] = l;
    auto& lt = t.levels[l];
    const auto& g = lt.geometry;
    const double s = static_cast<double>(g.stride);
    const double cx = (obj.box.x + obj.box.w / 2) / s, cy = (obj.box.y + obj.box.h / 2) / s;
    const auto col = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(cx))), g.width - 1);
    const auto row = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(cy))), g.height - 1);
    const std::size_t cell = row * g.width + col, plane = g.height * g.width;
    if (lt.positive[cell]) {
      ++t.collisions;
      continue;
    }
    lt.positive[cell] = 1;
    ++lt.num_positive;
    lt.cls[static_cast<std::size_t>(obj.class_id) * plane + cell] = 1.0;
    lt.box[0 * plane + cell] = cx - static_cast<double>(col);
    lt.box[1 * plane + cell] = cy - static_cast<double>(row);
    lt.box[2 * plane + cell] = std::log(obj.box.w / s);
    lt.box[3 * plane + cell] = std::log(obj.box.h / s);
  }
  return t;
}

}  // namespace rcnet
