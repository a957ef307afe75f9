#pragma once

// Feature bases and the factor <-> strength mapping behind n21C connections.
//
// A cascade F_1..F_k (finest first) is rewritten in the basis
//   B_1 = F_1,  B_j = F_j - (F_1 + ... + F_{j-1}),
// so that a raw weighting sum_i lambda_i F_i equals sum_j c_j B_j. With T the
// lower-triangular basis definition (B = T F), the strengths solve T^T c = lambda.
// Uniform factors give c = (4, 2, 1) for three levels and (8, 4, 2, 1) for four.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/layers.hpp"
#include "rcnet/linalg.hpp"
#include "rcnet/ops.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

/// Multi-scale feature levels, finest first, with their strides relative to
/// the input image.
struct FeatureCascade {
  std::vector<Tensor> levels;
  std::vector<std::size_t> strides;

  std::size_t degrees_of_freedom() const { return levels.size(); }

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("FeatureCascade: empty cascade");
    if (strides.size() != levels.size()) {
      throw std::invalid_argument("FeatureCascade: one stride per level required");
    }
    for (std::size_t i = 1; i < strides.size(); ++i) {
      if (strides[i] <= strides[i - 1]) {
        throw std::invalid_argument("FeatureCascade: strides must strictly increase");
      }
    }
  }
};

struct BasisSet {
  std::vector<Tensor> bases;
};

/// Basis coefficients c_1..c_k.
struct Strengths {
  std::vector<double> values;
  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

/// Per-level amplification / deamplification factors lambda_1..lambda_k.
struct Factors {
  std::vector<double> values;
  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

/// Strengths (n, 2, 1) of an n21C.
inline Strengths n21(double n) { return Strengths{{n, 2.0, 1.0}}; }

/// B = T F with T[j][j] = 1 and T[j][i] = -1 for i < j.
inline Matrix basis_definition(std::size_t k) {
  Matrix t(k, k);
  for (std::size_t j = 0; j < k; ++j) {
    t(j, j) = 1.0;
    for (std::size_t i = 0; i < j; ++i) t(j, i) = -1.0;
  }
  return t;
}

inline Strengths strengths_from_factors(const Factors& factors) {
  if (factors.size() == 0) throw std::invalid_argument("strengths_from_factors: no factors");
  for (double v : factors.values) {
    if (!std::isfinite(v)) throw std::domain_error("strengths_from_factors: non-finite factor");
  }
  const Matrix t = basis_definition(factors.size());
  return Strengths{solve_linear(t.transposed(), factors.values)};
}

inline Factors factors_from_strengths(const Strengths& strengths) {
  if (strengths.size() == 0) throw std::invalid_argument("factors_from_strengths: no strengths");
  for (double v : strengths.values) {
    if (!std::isfinite(v)) throw std::domain_error("factors_from_strengths: non-finite strength");
  }
  return Factors{basis_definition(strengths.size()).transposed() * strengths.values};
}

/// Resamples every level onto the grid of `target_level`. A level is projected
/// by projections[i] (a 1x1 conv) before resampling when one is supplied;
/// levels whose channel count differs from the target's require one.
inline std::vector<Tensor> align_cascade(const FeatureCascade& cascade, std::size_t target_level,
                                         std::span<const Conv2d> projections = {}) {
  cascade.validate();
  if (target_level >= cascade.levels.size()) {
    throw std::invalid_argument("align_cascade: target level " + std::to_string(target_level) +
                                " out of range");
  }
  if (!projections.empty() && projections.size() != cascade.levels.size()) {
    throw std::invalid_argument("align_cascade: one projection per level required");
  }
  auto project = [&](std::size_t i) {
    return projections.empty() ? cascade.levels[i] : projections[i](cascade.levels[i]);
  };
  const Tensor target = project(target_level);
  const auto tp = detail::planes_of(target.shape(), "align_cascade");
  std::vector<Tensor> out;
  out.reserve(cascade.levels.size());
  for (std::size_t i = 0; i < cascade.levels.size(); ++i) {
    Tensor level = i == target_level ? target : project(i);
    const auto p = detail::planes_of(level.shape(), "align_cascade");
    if (p.c != tp.c || p.n != tp.n) {
      throw std::invalid_argument("align_cascade: level " + std::to_string(i) + " has " +
                                  std::to_string(p.c) + " channels, target has " +
                                  std::to_string(tp.c) + "; a projection is required");
    }
    out.push_back(resize_to(level, tp.h, tp.w));
  }
  return out;
}

inline BasisSet bases_from_cascade(std::span<const Tensor> aligned) {
  if (aligned.empty()) throw std::invalid_argument("bases_from_cascade: empty cascade");
  for (const auto& t : aligned) detail::require_same_shape(aligned[0], t, "bases_from_cascade");
  BasisSet set;
  set.bases.push_back(aligned[0]);
  Tensor prefix = aligned[0];
  for (std::size_t j = 1; j < aligned.size(); ++j) {
    set.bases.push_back(sub(aligned[j], prefix));
    if (j + 1 < aligned.size()) prefix = add(prefix, aligned[j]);
  }
  return set;
}

/// sum_j c_j B_j.
inline Tensor combine(const BasisSet& bases, const Strengths& strengths) {
  if (bases.bases.empty() || bases.bases.size() != strengths.size()) {
    throw std::invalid_argument("combine: " + std::to_string(strengths.size()) +
                                " strengths for " + std::to_string(bases.bases.size()) +
                                " bases");
  }
  Tensor out = scale(bases.bases[0], strengths[0]);
  for (std::size_t j = 1; j < bases.bases.size(); ++j) {
    detail::require_same_shape(bases.bases[0], bases.bases[j], "combine");
    out = add(out, scale(bases.bases[j], strengths[j]));
  }
  return out;
}

/// sum_i lambda_i F_i over already aligned levels.
inline Tensor weighted_sum(std::span<const Tensor> aligned, std::span<const double> weights) {
  if (aligned.empty() || aligned.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: one weight per level required");
  }
  Tensor out = scale(aligned[0], weights[0]);
  for (std::size_t i = 1; i < aligned.size(); ++i) out = add(out, scale(aligned[i], weights[i]));
  return out;
}

}  // namespace rcnet
