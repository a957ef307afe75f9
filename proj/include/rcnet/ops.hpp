#pragma once

// Differentiable kernels. Spatial ops accept (C, H, W) or (N, C, H, W).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/tensor.hpp"

namespace rcnet {

namespace detail {

struct Planes {
  std::size_t n, c, h, w;
};

inline Planes planes_of(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw std::invalid_argument(std::string(op) + ": expected (C,H,W) or (N,C,H,W), got " +
                              shape_string(s));
}

inline Shape with_planes(const Shape& like, std::size_t c, std::size_t h, std::size_t w) {
  if (like.size() == 3) return {c, h, w};
  return {like[0], c, h, w};
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

inline void accumulate(std::span<double> dst, std::span<const double> src, double k = 1.0) {
  if (dst.empty()) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += k * src[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self, std::span<const double> g) {
        detail::accumulate(detail::grad_buffer(*self.inputs[0]), g);
        detail::accumulate(detail::grad_buffer(*self.inputs[1]), g);
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self, std::span<const double> g) {
        detail::accumulate(detail::grad_buffer(*self.inputs[0]), g);
        detail::accumulate(detail::grad_buffer(*self.inputs[1]), g, -1.0);
      },
      "sub");
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * x[i];
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [k](detail::Node& self, std::span<const double> g) {
        detail::accumulate(detail::grad_buffer(*self.inputs[0]), g, k);
      },
      "scale");
}

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(
      {}, {s}, {a},
      [](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        for (double& d : dst) d += g[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// max(x, 0); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        const auto& x = *self.inputs[0]->storage;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) dst[i] += g[i];
        }
      },
      "relu");
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  std::vector<double> saved = out;
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [y = std::move(saved)](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i] * (1.0 - y[i]);
      },
      "sigmoid");
}

/// Softmax over all elements of a vector-shaped tensor.
inline Tensor softmax(const Tensor& v) {
  if (v.rank() != 1 || v.numel() == 0) {
    throw std::invalid_argument("softmax: expected a non-empty vector, got " +
                                shape_string(v.shape()));
  }
  auto x = v.data();
  const double hi = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - hi);
    z += out[i];
  }
  for (double& o : out) o /= z;
  std::vector<double> saved = out;
  return detail::make_result(
      v.shape(), std::move(out), {v},
      [y = std::move(saved)](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        double dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) dot += g[i] * y[i];
        for (std::size_t i = 0; i < y.size(); ++i) dst[i] += y[i] * (g[i] - dot);
      },
      "softmax");
}

/// Per-channel (x - mean) / sqrt(var + eps) with fixed statistics.
inline Tensor batch_norm_infer(const Tensor& x, std::span<const double> mean,
                               std::span<const double> var, double eps) {
  const auto p = detail::planes_of(x.shape(), "batch_norm_infer");
  if (mean.size() != p.c || var.size() != p.c) {
    throw std::invalid_argument("batch_norm_infer: statistics do not match " +
                                std::to_string(p.c) + " channels");
  }
  std::vector<double> inv(p.c);
  for (std::size_t c = 0; c < p.c; ++c) {
    if (!(var[c] + eps > 0.0)) {
      throw std::invalid_argument("batch_norm_infer: var + eps must be positive");
    }
    inv[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  const std::size_t plane = p.h * p.w;
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t n = 0; n < p.n; ++n) {
    for (std::size_t c = 0; c < p.c; ++c) {
      const std::size_t base = (n * p.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = (in[base + i] - mean[c]) * inv[c];
      }
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [inv, p, plane](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        for (std::size_t n = 0; n < p.n; ++n) {
          for (std::size_t c = 0; c < p.c; ++c) {
            const std::size_t base = (n * p.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[base + i] += g[base + i] * inv[c];
          }
        }
      },
      "batch_norm_infer");
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

// Output columns ow with 0 <= ow*stride + kx - pad < in_w, as [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t k, std::size_t stride,
                                                       std::size_t pad) {
  const long long s = static_cast<long long>(stride);
  const long long offset = static_cast<long long>(k) - static_cast<long long>(pad);
  long long lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  long long hi_incl = (static_cast<long long>(in) - 1 - offset);
  hi_incl = hi_incl < 0 ? -1 : hi_incl / s;
  long long hi = std::min<long long>(hi_incl + 1, static_cast<long long>(out));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// Cross-correlation. weight is (O, C, K, K); bias is (O) or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     Conv2dOptions opt = {}) {
  const auto p = detail::planes_of(x.shape(), "conv2d");
  if (weight.rank() != 4 || weight.dim(1) != p.c || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument("conv2d: weight " + shape_string(weight.shape()) +
                                " incompatible with input " + shape_string(x.shape()));
  }
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t oc_n = weight.dim(0), k = weight.dim(2);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != oc_n)) {
    throw std::invalid_argument("conv2d: bias must have shape (" + std::to_string(oc_n) + ")");
  }
  if (p.h + 2 * opt.pad < k || p.w + 2 * opt.pad < k) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(k) +
                                " does not fit padded input " + shape_string(x.shape()));
  }
  const std::size_t oh_n = (p.h + 2 * opt.pad - k) / opt.stride + 1;
  const std::size_t ow_n = (p.w + 2 * opt.pad - k) / opt.stride + 1;
  const std::size_t s = opt.stride, pad = opt.pad;

  std::vector<double> out(p.n * oc_n * oh_n * ow_n);
  auto in = x.data();
  auto wt = weight.data();
  for (std::size_t n = 0; n < p.n; ++n) {
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
      double* o = out.data() + (n * oc_n + oc) * oh_n * ow_n;
      const double b = bias.defined() ? bias[oc] : 0.0;
      std::fill(o, o + oh_n * ow_n, b);
      for (std::size_t ic = 0; ic < p.c; ++ic) {
        const double* src = in.data() + (n * p.c + ic) * p.h * p.w;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [y_lo, y_hi] = detail::valid_range(oh_n, p.h, ky, s, pad);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = wt[((oc * p.c + ic) * k + ky) * k + kx];
            const auto [x_lo, x_hi] = detail::valid_range(ow_n, p.w, kx, s, pad);
            for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
              const double* row = src + (oy * s + ky - pad) * p.w;
              double* orow = o + oy * ow_n;
              for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
                orow[ox] += wv * row[ox * s + kx - pad];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      detail::with_planes(x.shape(), oc_n, oh_n, ow_n), std::move(out), std::move(inputs),
      [p, oc_n, k, oh_n, ow_n, s, pad](detail::Node& self, std::span<const double> g) {
        const auto& in = *self.inputs[0]->storage;
        const auto& wt = *self.inputs[1]->storage;
        auto gin = detail::grad_buffer(*self.inputs[0]);
        auto gw = detail::grad_buffer(*self.inputs[1]);
        std::span<double> gb;
        if (self.inputs.size() > 2) gb = detail::grad_buffer(*self.inputs[2]);
        for (std::size_t n = 0; n < p.n; ++n) {
          for (std::size_t oc = 0; oc < oc_n; ++oc) {
            const double* go = g.data() + (n * oc_n + oc) * oh_n * ow_n;
            if (!gb.empty()) {
              double acc = 0.0;
              for (std::size_t i = 0; i < oh_n * ow_n; ++i) acc += go[i];
              gb[oc] += acc;
            }
            for (std::size_t ic = 0; ic < p.c; ++ic) {
              const std::size_t plane = (n * p.c + ic) * p.h * p.w;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const auto [y_lo, y_hi] = detail::valid_range(oh_n, p.h, ky, s, pad);
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::size_t widx = ((oc * p.c + ic) * k + ky) * k + kx;
                  const double wv = wt[widx];
                  const auto [x_lo, x_hi] = detail::valid_range(ow_n, p.w, kx, s, pad);
                  double wacc = 0.0;
                  for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
                    const std::size_t row = plane + (oy * s + ky - pad) * p.w;
                    const double* grow = go + oy * ow_n;
                    for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
                      const std::size_t idx = row + ox * s + kx - pad;
                      wacc += grow[ox] * in[idx];
                      if (!gin.empty()) gin[idx] += wv * grow[ox];
                    }
                  }
                  if (!gw.empty()) gw[widx] += wacc;
                }
              }
            }
          }
        }
      },
      "conv2d");
}

inline Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {}) {
  return conv2d(x, weight, Tensor{}, opt);
}

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel (align_corners = false) source taps, clamped at the borders.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling with the half-pixel convention (align_corners = false).
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const auto p = detail::planes_of(x.shape(), "bilinear_resize");
  if (out_h == 0 || out_w == 0) {
    throw std::invalid_argument("bilinear_resize: output size must be at least 1x1");
  }
  if (p.h == 0 || p.w == 0) {
    throw std::invalid_argument("bilinear_resize: empty input");
  }
  const auto ty = detail::lerp_taps(p.h, out_h);
  const auto tx = detail::lerp_taps(p.w, out_w);
  std::vector<double> out(p.n * p.c * out_h * out_w);
  auto in = x.data();
  for (std::size_t pl = 0; pl < p.n * p.c; ++pl) {
    const double* src = in.data() + pl * p.h * p.w;
    double* dst = out.data() + pl * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      const double* r0 = src + a.lo * p.w;
      const double* r1 = src + a.hi * p.w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = r0[b.lo] + b.frac * (r0[b.hi] - r0[b.lo]);
        const double bot = r1[b.lo] + b.frac * (r1[b.hi] - r1[b.lo]);
        dst[oy * out_w + ox] = top + a.frac * (bot - top);
      }
    }
  }
  return detail::make_result(
      detail::with_planes(x.shape(), p.c, out_h, out_w), std::move(out), {x},
      [p, out_h, out_w, ty, tx](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        for (std::size_t pl = 0; pl < p.n * p.c; ++pl) {
          double* gi = dst.data() + pl * p.h * p.w;
          const double* go = g.data() + pl * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto& b = tx[ox];
              const double v = go[oy * out_w + ox];
              const double top = v * (1.0 - a.frac), bot = v * a.frac;
              gi[a.lo * p.w + b.lo] += top * (1.0 - b.frac);
              gi[a.lo * p.w + b.hi] += top * b.frac;
              gi[a.hi * p.w + b.lo] += bot * (1.0 - b.frac);
              gi[a.hi * p.w + b.hi] += bot * b.frac;
            }
          }
        }
      },
      "bilinear_resize");
}

/// Resizes only when the spatial size differs; otherwise returns x itself.
inline Tensor resize_to(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const auto p = detail::planes_of(x.shape(), "resize_to");
  if (p.h == out_h && p.w == out_w) return x;
  return bilinear_resize(x, out_h, out_w);
}

/// Max across the channel axis: (C, H, W) -> (1, H, W). Ties route the
/// gradient to the lowest channel index.
inline Tensor channel_max(const Tensor& x) {
  const auto p = detail::planes_of(x.shape(), "channel_max");
  if (p.c == 0) throw std::invalid_argument("channel_max: no channels");
  const std::size_t plane = p.h * p.w;
  std::vector<double> out(p.n * plane);
  std::vector<std::size_t> arg(p.n * plane, 0);
  auto in = x.data();
  for (std::size_t n = 0; n < p.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      double best = in[n * p.c * plane + i];
      std::size_t bc = 0;
      for (std::size_t c = 1; c < p.c; ++c) {
        const double v = in[(n * p.c + c) * plane + i];
        if (v > best) {
          best = v;
          bc = c;
        }
      }
      out[n * plane + i] = best;
      arg[n * plane + i] = bc;
    }
  }
  return detail::make_result(
      detail::with_planes(x.shape(), 1, p.h, p.w), std::move(out), {x},
      [p, plane, arg = std::move(arg)](detail::Node& self, std::span<const double> g) {
        auto dst = detail::grad_buffer(*self.inputs[0]);
        if (dst.empty()) return;
        for (std::size_t n = 0; n < p.n; ++n) {
          for (std::size_t i = 0; i < plane; ++i) {
            dst[(n * p.c + arg[n * plane + i]) * plane + i] += g[n * plane + i];
          }
        }
      },
      "channel_max");
}

}  // namespace rcnet
