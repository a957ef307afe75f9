#pragma once

// Synthetic scale-preferred scenes: filled rectangles of random intensity on
// a noisy background. In tiny mode every annotated object is small, and the
// image also carries unannotated large "twins" of the objects (same shape and
// intensity, 4-8x the size) that act as confusers for coarse pyramid levels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/kdn.hpp"
#include "rcnet/layers.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

enum class SceneMode { tiny, diversified };

struct SceneSpec {
  SceneMode mode = SceneMode::tiny;
  std::size_t image_size = 96;
  double min_object = 3, max_object = 8;  // side length, pixels
  std::size_t density = 5;                 // annotated objects per image
  std::size_t distractors = 2;
  double min_distractor_scale = 4, max_distractor_scale = 8;
  double min_intensity = 0.6, max_intensity = 1.0;
  double noise = 0.1;  // additive Gaussian sigma
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;

  static SceneSpec tiny() { return SceneSpec{}; }

  static SceneSpec diversified() {
    SceneSpec s;
    s.mode = SceneMode::diversified;
    s.min_object = 3;
    s.max_object = 48;
    s.distractors = 0;
    return s;
  }

  void validate() const {
    if (image_size < 16) throw std::invalid_argument("SceneSpec: image_size must be >= 16");
    if (!(min_object >= 1 && max_object >= min_object)) {
      throw std::invalid_argument("SceneSpec: need 1 <= min_object <= max_object");
    }
    if (max_object > static_cast<double>(image_size)) {
      throw std::invalid_argument("SceneSpec: objects larger than the image");
    }
    if (mode == SceneMode::tiny && max_object > 8) {
      throw std::invalid_argument("SceneSpec: tiny mode objects must be at most 8 px");
    }
    if (!(min_distractor_scale > 0 && max_distractor_scale >= min_distractor_scale)) {
      throw std::invalid_argument("SceneSpec: invalid distractor scale range");
    }
    if (!(min_intensity > 0 && max_intensity >= min_intensity)) {
      throw std::invalid_argument("SceneSpec: invalid intensity range");
    }
    if (!(noise >= 0) || !std::isfinite(noise)) {
      throw std::invalid_argument("SceneSpec: noise must be a finite sigma >= 0");
    }
  }
};

struct Scene {
  Tensor image;  // (1, S, S)
  std::vector<ObjectAnnotation> objects;
  std::vector<Box> distractors;
};

namespace detail {

inline bool overlaps(const Box& a, const Box& b, double gap) {
  return a.x < b.x + b.w + gap && b.x < a.x + a.w + gap && a.y < b.y + b.h + gap &&
         b.y < a.y + a.h + gap;
}

inline void fill_box(std::vector<double>& img, std::size_t size, const Box& b, double v) {
  const auto x0 = static_cast<std::size_t>(b.x), y0 = static_cast<std::size_t>(b.y);
  const auto x1 = std::min(size, static_cast<std::size_t>(b.x + b.w));
  const auto y1 = std::min(size, static_cast<std::size_t>(b.y + b.h));
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) img[y * size + x] = v;
}

}  // namespace detail

inline Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  constexpr int kRetries = 500;
  const auto size = spec.image_size;
  const double extent = static_cast<double>(size);
  std::uniform_int_distribution<int> side(static_cast<int>(std::ceil(spec.min_object)),
                                          static_cast<int>(std::floor(spec.max_object)));
  std::uniform_real_distribution<double> twin_scale(spec.min_distractor_scale,
                                                    spec.max_distractor_scale);
  std::uniform_real_distribution<double> intensity(spec.min_intensity, spec.max_intensity);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto place = [&](double w, double h, const std::vector<Box>& taken, double gap,
                   const char* what) {
    for (int attempt = 0; attempt < kRetries; ++attempt) {
      const double x = std::floor(unit(rng) * (extent - w + 1));
      const double y = std::floor(unit(rng) * (extent - h + 1));
      Box b{x, y, w, h};
      if (std::none_of(taken.begin(), taken.end(),
                       [&](const Box& o) { return detail::overlaps(b, o, gap); })) {
        return b;
      }
    }
    throw std::runtime_error(std::string("generate_scene: could not place ") + what +
                             " after " + std::to_string(kRetries) + " attempts");
  };

  Scene scene;
  std::vector<double> img(size * size, 0.0);
  std::vector<Box> taken;
  std::vector<std::pair<Box, double>> painted;

  for (std::size_t i = 0; i < spec.distractors; ++i) {
    const double k = twin_scale(rng);
    const double cap = std::floor(extent / 2);
    const double w = std::min(cap, std::round(side(rng) * k));
    const double h = std::min(cap, std::round(side(rng) * k));
    Box b = place(w, h, {}, 0.0, "distractor");
    scene.distractors.push_back(b);
    taken.push_back(b);
    painted.emplace_back(b, intensity(rng));
  }
  for (std::size_t i = 0; i < spec.density; ++i) {
    const double w = side(rng), h = side(rng);
    Box b = place(w, h, taken, 1.0, "object");
    taken.push_back(b);
    scene.objects.push_back({b, 0});
    painted.emplace_back(b, intensity(rng));
  }
  for (const auto& [b, v] : painted) detail::fill_box(img, size, b, v);
  if (spec.noise > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise);
    for (double& v : img) v += noise(rng);
  }
  scene.image = Tensor({1, size, size}, std::move(img));
  return scene;
}

/// Image `index` of stream `stream` (e.g. 0 = train, 1 = test) for a seed.
inline Rng scene_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    0x5ce7eu};
  return Rng(seq);
}

inline std::vector<Scene> generate_dataset(const SceneSpec& spec, std::size_t count,
                                           std::uint64_t stream) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = scene_rng(spec.seed, stream, i);
    scenes.push_back(generate_scene(spec, rng));
  }
  return scenes;
}

}  // namespace rcnet
