#pragma once

// Central finite-difference oracle for scalar losses of leaf tensors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rcnet/tensor.hpp"

namespace rcnet::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;  // max |a - fd| / (|fd| + 1e-8)
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::vector<double> failing_abs_errors;  // |a - fd| of elements above kFdRelTol
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-4;

/// Compares autodiff against central differences for every element of each
/// input, or for every `stride`-th element when stride > 1.
inline GradCheckResult check_gradients(std::vector<Tensor> inputs,
                                       const std::function<Tensor()>& loss_fn,
                                       double h = kFdStep, std::size_t stride = 1) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  loss_fn().backward();
  GradCheckResult res;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double orig = values[i];
      double fp, fm;
      {
        NoGradGuard guard;
        values[i] = orig + h;
        fp = loss_fn().item();
        values[i] = orig - h;
        fm = loss_fn().item();
      }
      values[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double abs_err = std::abs(analytic[i] - fd);
      const double rel = abs_err / (std::abs(fd) + 1e-8);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      if (rel > kFdRelTol) res.failing_abs_errors.push_back(abs_err);
      if (rel > res.max_rel_error || res.checked == 0) {
        res.max_rel_error = std::max(res.max_rel_error, rel);
        res.worst_index = i;
        res.worst_analytic = analytic[i];
        res.worst_numeric = fd;
      }
      ++res.checked;
    }
  }
  return res;
}

struct DirectionalCheck {
  double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

/// Central difference of the loss along one random +-1 direction spanning
/// every element of every input, against the gradient dotted with it.
inline DirectionalCheck check_directional(std::vector<Tensor> inputs,
                                          const std::function<Tensor()>& loss_fn,
                                          std::uint64_t seed, double h = kFdStep) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  loss_fn().backward();
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> dir, orig;
  DirectionalCheck res;
  for (auto& t : inputs) {
    auto& d = dir.emplace_back(t.numel());
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = (rng() & 1) ? 1.0 : -1.0;
      res.analytic += t.grad()[i] * d[i];
    }
    orig.emplace_back(t.data().begin(), t.data().end());
  }
  auto shift = [&](double step) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto v = inputs[k].mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = orig[k][i] + step * dir[k][i];
    }
  };
  NoGradGuard guard;
  shift(h);
  const double fp = loss_fn().item();
  shift(-h);
  const double fm = loss_fn().item();
  shift(0.0);
  res.numeric = (fp - fm) / (2.0 * h);
  res.rel_error = std::abs(res.analytic - res.numeric) / (std::abs(res.numeric) + 1e-8);
  return res;
}

}  // namespace rcnet::testing
