#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rcnet/ops.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

using Rng = std::mt19937_64;

/// Convolution layer: weight (O, C, K, K) and bias (O).
struct Conv2d {
  Tensor weight;
  Tensor bias;
  Conv2dOptions options;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, options); }

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
};

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// He-normal weights, zero bias.
inline Conv2d make_conv(std::size_t in, std::size_t out, std::size_t k, Conv2dOptions opt,
                        Rng& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  Conv2d conv{normal_tensor({out, in, k, k}, std::sqrt(2.0 / fan_in), rng),
              Tensor(Shape{out}, 0.0), opt};
  conv.weight.set_requires_grad(true);
  conv.bias.set_requires_grad(true);
  return conv;
}

/// 1x1 conv whose (out x in) weight has orthonormal rows (or columns, when
/// out > in), built from the QR factorization of a Gaussian matrix.
inline Conv2d make_orthogonal_1x1(std::size_t in, std::size_t out, Rng& rng) {
  const std::size_t big = std::max(in, out), small = std::min(in, out);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = dist(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // Sign fix so the factorization is unique.
  Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(small); ++i) {
    if (r(i, i) < 0) q.col(i) *= -1.0;
  }
  Eigen::MatrixXd w = out >= in ? q : Eigen::MatrixXd(q.transpose());  // (out x in)
  std::vector<double> v(out * in);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) v[o * in + i] = w(o, i);
  Conv2d conv{Tensor({out, in, 1, 1}, std::move(v)), Tensor(Shape{out}, 0.0), {}};
  conv.weight.set_requires_grad(true);
  conv.bias.set_requires_grad(true);
  return conv;
}

/// 1x1 conv mapping channel i to channel i (zero-padded when out != in).
inline Conv2d make_identity_1x1(std::size_t in, std::size_t out) {
  std::vector<double> v(out * in, 0.0);
  for (std::size_t i = 0; i < std::min(in, out); ++i) v[i * in + i] = 1.0;
  Conv2d conv{Tensor({out, in, 1, 1}, std::move(v)), Tensor(Shape{out}, 0.0), {}};
  conv.weight.set_requires_grad(true);
  conv.bias.set_requires_grad(true);
  return conv;
}

}  // namespace rcnet
