#pragma once

// Renormalized connections for multi-branch (pyramid) detectors.
//
//  economical  P3' = combine(bases(P3, P4, P5 on the P3 grid), c); the other
//              levels pass through untouched.
//  complete    branch j = sum_i C[j][i] * resample(P_i -> grid of P_j), with
//              rows = destination branch and columns = source level, both
//              finest first.
//  variant     two-level basis over (P3, P4) or (P3, P5).

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/connection_algebra.hpp"
#include "rcnet/layers.hpp"
#include "rcnet/linalg.hpp"
#include "rcnet/ops.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

enum class ConnectionForm {
  none,           // plain pyramid, one level per branch
  single_branch,  // n21C over a backbone cascade feeding one head
  kdn,            // knowledge-discovery factors feeding one head
  economical,
  complete,
  variant_sm,
  variant_sl,
};

enum class AttachPoint { topdown_out, bottomup_out };

/// Strengths of the two-level variants: (n, 2) or the uniform-factor (2, 1).
enum class VariantStrengths { named, uniform };

struct Addons {
  bool projection = false;
  bool norm = false;
  bool activation = false;

  bool any() const { return projection || norm || activation; }
  bool operator==(const Addons&) const = default;
};

struct ConnectionSpec {
  ConnectionForm form = ConnectionForm::none;
  double n = 4.0;
  std::vector<double> matrix;  // row-major, complete form only
  Addons addons;
  AttachPoint attach_point = AttachPoint::topdown_out;
  VariantStrengths variant_strengths = VariantStrengths::named;

  bool operator==(const ConnectionSpec&) const = default;

  bool is_single_branch() const {
    return form == ConnectionForm::single_branch || form == ConnectionForm::kdn;
  }

  void validate() const {
    if (!std::isfinite(n)) throw std::invalid_argument("ConnectionSpec: n must be finite");
    if (form == ConnectionForm::complete) {
      if (matrix.empty()) throw std::invalid_argument("ConnectionSpec: complete form needs a matrix");
    } else if (!matrix.empty()) {
      throw std::invalid_argument("ConnectionSpec: matrix is only valid for the complete form");
    }
    if (form == ConnectionForm::economical && !(n > 0.0)) {
      throw std::invalid_argument("ConnectionSpec: economical form needs n > 0");
    }
    for (double v : matrix) {
      if (!std::isfinite(v)) throw std::invalid_argument("ConnectionSpec: non-finite matrix entry");
    }
  }
};

/// Adaptive-feature-pooling style strength matrix for four branches.
inline Matrix afp_strength_matrix() {
  return Matrix(4, 4, {1.0, 0.15, 0.10, 0.10,  //
                       1.0, 0.30, 0.30, 0.25,  //
                       1.0, 0.25, 0.25, 0.25,  //
                       0.0, 0.30, 0.35, 0.40});
}

namespace detail {

inline void require_pyramid(std::span<const Tensor> levels, std::size_t min_levels,
                            const char* op) {
  if (levels.size() < min_levels) {
    throw std::invalid_argument(std::string(op) + ": needs at least " +
                                std::to_string(min_levels) + " pyramid levels");
  }
  const auto p0 = planes_of(levels[0].shape(), op);
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const auto p = planes_of(levels[i].shape(), op);
    if (p.c != p0.c || p.n != p0.n) {
      throw std::invalid_argument(std::string(op) + ": level " + std::to_string(i) +
                                  " channel count differs; enable the projection addon");
    }
  }
}

inline std::vector<Tensor> aligned_to_finest(std::span<const Tensor> levels) {
  const auto p0 = planes_of(levels[0].shape(), "align");
  std::vector<Tensor> out;
  out.reserve(levels.size());
  for (const auto& l : levels) out.push_back(resize_to(l, p0.h, p0.w));
  return out;
}

}  // namespace detail

/// Renormalized finest level of the economical connection.
inline Tensor economical_p3(std::span<const Tensor> pyramid, const Strengths& strengths) {
  detail::require_pyramid(pyramid, 3, "economical");
  if (strengths.size() != 3) throw std::invalid_argument("economical: three strengths required");
  const auto aligned = detail::aligned_to_finest(pyramid.first(3));
  return combine(bases_from_cascade(aligned), strengths);
}

/// Full branch inputs: [P3', P4, P5, ...]; levels past the first are the same
/// tensors as in the input.
inline std::vector<Tensor> economical(std::span<const Tensor> pyramid, const Strengths& strengths) {
  std::vector<Tensor> out(pyramid.begin(), pyramid.end());
  out[0] = economical_p3(pyramid, strengths);
  return out;
}

inline std::vector<Tensor> complete(std::span<const Tensor> pyramid, const Matrix& strengths) {
  detail::require_pyramid(pyramid, 1, "complete");
  const std::size_t k = pyramid.size();
  if (strengths.rows != k || strengths.cols != k) {
    throw std::invalid_argument("complete: " + std::to_string(strengths.rows) + "x" +
                                std::to_string(strengths.cols) + " matrix for " +
                                std::to_string(k) + " levels");
  }
  std::vector<Tensor> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto pj = detail::planes_of(pyramid[j].shape(), "complete");
    Tensor acc;
    for (std::size_t i = 0; i < k; ++i) {
      Tensor term = scale(resize_to(pyramid[i], pj.h, pj.w), strengths(j, i));
      acc = acc.defined() ? add(acc, term) : term;
    }
    out.push_back(acc);
  }
  return out;
}

enum class VariantPair { small_medium, small_large };

/// Default strengths of a two-level variant.
inline Strengths variant_strengths(VariantStrengths kind, double n) {
  if (kind == VariantStrengths::uniform) return strengths_from_factors(Factors{{1.0, 1.0}});
  return Strengths{{n, 2.0}};
}

inline Tensor variant(std::span<const Tensor> pyramid, VariantPair pair, const Strengths& strengths) {
  detail::require_pyramid(pyramid, 3, "variant");
  if (strengths.size() != 2) throw std::invalid_argument("variant: two strengths required");
  const std::array<Tensor, 2> pick{pyramid[0], pyramid[pair == VariantPair::small_medium ? 1 : 2]};
  const auto aligned = detail::aligned_to_finest(pick);
  return combine(bases_from_cascade(aligned), strengths);
}

/// Learnable / fixed pieces of the optional add-on stack.
struct AddonParams {
  Conv2d projection;
  std::vector<double> norm_mean;
  std::vector<double> norm_var;
  double norm_eps = 1e-5;

  static AddonParams make(std::size_t channels) {
    return AddonParams{make_identity_1x1(channels, channels), std::vector<double>(channels, 0.0),
                       std::vector<double>(channels, 1.0), 1e-5};
  }
};

/// Optional 1x1 conv -> fixed-statistics normalization -> ReLU.
inline Tensor apply_addons(const Tensor& x, const Addons& addons, const AddonParams& params) {
  Tensor y = x;
  if (addons.projection) y = params.projection(y);
  if (addons.norm) y = batch_norm_infer(y, params.norm_mean, params.norm_var, params.norm_eps);
  if (addons.activation) y = relu(y);
  return y;
}

}  // namespace rcnet
