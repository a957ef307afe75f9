#pragma once

// Desk-scale anchor-free detector.
//
//   image (1, S, S)
//     stem   3x3/2 -> C2 (stride 2)
//     stage  3x3/2 -> C3 (stride 4), C4 (stride 8), C5 (stride 16)
//   multi-branch: FPN top-down with 1x1 laterals and 3x3 output convs gives
//     P3..P5, plus P6 = 3x3/2 conv of P5; an optional PAFPN bottom-up path
//     adds N_l = P_l + down(N_{l-1}). The connection rewires the levels into
//     one input per branch (P3..P6, strides 4..32).
//   single-branch: 1x1 projections of C3..C5 fused onto the stride-4 grid.
//   heads: shared 3x3 conv + ReLU, then 1x1 classification and box convs.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcnet/connection_algebra.hpp"
#include "rcnet/kdn.hpp"
#include "rcnet/layers.hpp"
#include "rcnet/ops.hpp"
#include "rcnet/rc_connections.hpp"
#include "rcnet/serialize.hpp"
#include "rcnet/tensor.hpp"

namespace rcnet {

enum class NeckType { fpn, pafpn };

struct DetectorConfig {
  std::size_t backbone_channels = 8;
  std::size_t neck_channels = 8;
  NeckType neck = NeckType::fpn;
  std::size_t num_classes = 1;
  // Branch l takes objects with max side in [t_{l-1}, t_l).
  std::vector<double> scale_thresholds{16, 32, 64};
  ConnectionSpec connection;

  bool operator==(const DetectorConfig&) const = default;

  std::size_t num_branches() const { return connection.is_single_branch() ? 1 : 4; }

  std::vector<std::size_t> branch_strides() const {
    if (connection.is_single_branch()) return {4};
    return {4, 8, 16, 32};
  }

  void validate() const {
    connection.validate();
    if (backbone_channels == 0 || neck_channels == 0 || num_classes == 0) {
      throw std::invalid_argument("DetectorConfig: channel counts must be positive");
    }
    if (!connection.is_single_branch() && scale_thresholds.size() != num_branches() - 1) {
      throw std::invalid_argument("DetectorConfig: need " + std::to_string(num_branches() - 1) +
                                  " scale thresholds");
    }
    for (std::size_t i = 1; i < scale_thresholds.size(); ++i) {
      if (scale_thresholds[i] <= scale_thresholds[i - 1]) {
        throw std::invalid_argument("DetectorConfig: scale thresholds must increase");
      }
    }
    if (connection.form == ConnectionForm::complete &&
        connection.matrix.size() != num_branches() * num_branches()) {
      throw std::invalid_argument("DetectorConfig: complete form needs a " +
                                  std::to_string(num_branches()) + "x" +
                                  std::to_string(num_branches()) + " matrix");
    }
  }
};

/// Routing switches, mainly for gradient path analysis.
struct ForwardOptions {
  bool training = false;
  std::span<const ObjectAnnotation> objects;  // KDN statistics during training
  bool detach_connection = false;  // connection output enters the heads as a constant
  bool detach_direct = false;      // pass-through branch inputs enter as constants
  bool bypass_connection = false;  // same weights, plain pyramid routing
  std::optional<Strengths> rc_strengths;  // overrides (n, 2, 1)
};

struct ForwardResult {
  std::vector<Tensor> cascade;        // C3, C4, C5
  std::vector<Tensor> pyramid;        // neck output before the connection
  std::vector<Tensor> branch_inputs;  // head inputs, one per branch
  std::vector<Tensor> cls_logits;     // (K, H, W)
  std::vector<Tensor> box_preds;      // (4, H, W)
  std::optional<Factors> image_lambda;
};

class ToyDetector {
 public:
  ToyDetector(DetectorConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t b = config_.backbone_channels, n = config_.neck_channels;
    const Conv2dOptions down{2, 1}, same{1, 1};
    stem_ = add_conv("backbone.stem", make_conv(1, b, 3, down, rng));
    stage3_ = add_conv("backbone.c3", make_conv(b, b, 3, down, rng));
    stage4_ = add_conv("backbone.c4", make_conv(b, 2 * b, 3, down, rng));
    stage5_ = add_conv("backbone.c5", make_conv(2 * b, 2 * b, 3, down, rng));
    const std::size_t cascade_channels[3] = {b, 2 * b, 2 * b};

    if (config_.connection.is_single_branch()) {
      for (std::size_t i = 0; i < 3; ++i) {
        projections_.push_back(add_conv("kdn.proj" + std::to_string(i + 3),
                                        make_orthogonal_1x1(cascade_channels[i], n, rng)));
      }
    } else {
      for (std::size_t i = 0; i < 3; ++i) {
        laterals_.push_back(add_conv("neck.lateral" + std::to_string(i + 3),
                                     make_conv(cascade_channels[i], n, 1, {}, rng)));
      }
      for (std::size_t i = 0; i < 3; ++i) {
        outputs_.push_back(add_conv("neck.out" + std::to_string(i + 3), make_conv(n, n, 3, same, rng)));
      }
      extra_ = add_conv("neck.p6", make_conv(n, n, 3, down, rng));
      if (config_.neck == NeckType::pafpn) {
        for (std::size_t i = 0; i < 3; ++i) {
          bottom_up_.push_back(add_conv("neck.down" + std::to_string(i + 4),
                                        make_conv(n, n, 3, down, rng)));
        }
      }
    }

    addons_ = AddonParams::make(n);
    if (config_.connection.addons.projection) {
      addons_.projection = add_conv("connection.proj", make_identity_1x1(n, n));
    }

    head_ = add_conv("head.conv", make_conv(n, n, 3, same, rng));
    cls_ = add_conv("head.cls", make_conv(n, config_.num_classes, 1, {}, rng));
    box_ = add_conv("head.box", make_conv(n, 4, 1, {}, rng));
    // Focal-loss prior: initial foreground probability 0.01.
    for (double& v : cls_.bias.mutable_data()) v = -std::log((1.0 - 0.01) / 0.01);
    for (double& v : cls_.weight.mutable_data()) v *= 0.1;
    for (double& v : box_.weight.mutable_data()) v *= 0.1;
  }

  ToyDetector(const ToyDetector&) = delete;
  ToyDetector& operator=(const ToyDetector&) = delete;
  ToyDetector(ToyDetector&&) = default;
  ToyDetector& operator=(ToyDetector&&) = default;

  const DetectorConfig& config() const { return config_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  Tensor parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::invalid_argument("ToyDetector: no parameter named '" + name + "'");
  }

  /// Shallow weights shared by every branch's gradient path.
  Tensor shared_shallow_parameter() const { return stem_.weight; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  SalientStack& stack() { return stack_; }
  const SalientStack& stack() const { return stack_; }
  const std::optional<FactorSet>& factor_set() const { return factor_set_; }
  void set_factor_set(std::optional<FactorSet> fs) { factor_set_ = std::move(fs); }

  ForwardResult forward(const Tensor& image, const ForwardOptions& opt = {}) const {
    ForwardResult r;
    const Tensor c2 = relu(stem_(image));
    const Tensor c3 = relu(stage3_(c2));
    const Tensor c4 = relu(stage4_(c3));
    const Tensor c5 = relu(stage5_(c4));
    r.cascade = {c3, c4, c5};

    if (config_.connection.is_single_branch()) {
      r.branch_inputs = {single_branch_input(r, opt)};
    } else {
      const Tensor m5 = laterals_[2](c5);
      const Tensor m4 = add(laterals_[1](c4), resize_like(m5, c4));
      const Tensor m3 = add(laterals_[0](c3), resize_like(m4, c3));
      std::vector<Tensor> p{outputs_[0](m3), outputs_[1](m4), outputs_[2](m5)};
      p.push_back(extra_(p[2]));
      r.pyramid = p;
      if (config_.neck == NeckType::fpn) {
        r.branch_inputs = connect(p, opt);
      } else if (config_.connection.attach_point == AttachPoint::topdown_out) {
        r.branch_inputs = bottom_up(connect(p, opt));
      } else {
        r.branch_inputs = connect(bottom_up(p), opt);
      }
    }

    for (const auto& x : r.branch_inputs) {
      const Tensor h = relu(head_(x));
      r.cls_logits.push_back(cls_(h));
      r.box_preds.push_back(box_(h));
    }
    return r;
  }

 private:
  Conv2d add_conv(const std::string& name, Conv2d conv) {
    params_.push_back({name + ".weight", conv.weight});
    params_.push_back({name + ".bias", conv.bias});
    return conv;
  }

  static Tensor resize_like(const Tensor& x, const Tensor& like) {
    const auto p = detail::planes_of(like.shape(), "resize_like");
    return resize_to(x, p.h, p.w);
  }

  std::vector<Tensor> bottom_up(std::vector<Tensor> levels) const {
    for (std::size_t i = 1; i < levels.size(); ++i) {
      levels[i] = add(levels[i], bottom_up_[i - 1](levels[i - 1]));
    }
    return levels;
  }

  Tensor single_branch_input(ForwardResult& r, const ForwardOptions& opt) const {
    const FeatureCascade cascade{r.cascade, {4, 8, 16}};
    const auto& spec = config_.connection;
    Tensor fused;
    if (spec.form == ConnectionForm::kdn) {
      if (opt.training) {
        if (auto lambda = image_factors(cascade, opt.objects)) {
          r.image_lambda = lambda;
          fused = fuse_train(cascade, *lambda, projections_);
        } else {
          fused = fuse_train(cascade, fallback_factors(), projections_);
        }
      } else if (factor_set_) {
        fused = fuse_infer(cascade, *factor_set_, projections_);
      } else {
        fused = fuse_train(cascade, fallback_factors(), projections_);
      }
    } else {
      const auto aligned = align_cascade(cascade, 0, projections_);
      fused = combine(bases_from_cascade(aligned), opt.rc_strengths.value_or(n21(spec.n)));
    }
    return apply_addons(fused, spec.addons, addons_);
  }

  // Factors for images without objects: running mean so far, else uniform.
  Factors fallback_factors() const {
    if (stack_.count() > 0) return stack_.finalize().lambda_infer;
    return Factors{std::vector<double>(3, 1.0)};
  }

  std::vector<Tensor> connect(const std::vector<Tensor>& p, const ForwardOptions& opt) const {
    const auto& spec = config_.connection;
    std::vector<Tensor> out = p;
    switch (spec.form) {
      case ConnectionForm::none:
        return out;
      case ConnectionForm::economical:
        if (!opt.bypass_connection) {
          out[0] = apply_addons(economical_p3(p, opt.rc_strengths.value_or(n21(spec.n))),
                                spec.addons, addons_);
        }
        break;
      case ConnectionForm::variant_sm:
      case ConnectionForm::variant_sl:
        if (!opt.bypass_connection) {
          const auto pair = spec.form == ConnectionForm::variant_sm ? VariantPair::small_medium
                                                                    : VariantPair::small_large;
          out[0] = apply_addons(
              variant(p, pair, opt.rc_strengths.value_or(variant_strengths(spec.variant_strengths, spec.n))),
              spec.addons, addons_);
        }
        break;
      case ConnectionForm::complete:
        if (!opt.bypass_connection) {
          out = complete(p, Matrix(p.size(), p.size(), spec.matrix));
          if (spec.addons.any()) {
            for (auto& t : out) t = apply_addons(t, spec.addons, addons_);
          }
        }
        if (opt.detach_connection)
          for (auto& t : out) t = t.detach();
        return out;
      default:
        throw std::logic_error("ToyDetector: single-branch form in a pyramid neck");
    }
    if (opt.detach_connection) out[0] = out[0].detach();
    if (opt.detach_direct) {
      for (std::size_t i = 1; i < out.size(); ++i) out[i] = out[i].detach();
    }
    return out;
  }

  DetectorConfig config_;
  std::vector<NamedTensor> params_;
  Conv2d stem_, stage3_, stage4_, stage5_;
  std::vector<Conv2d> projections_, laterals_, outputs_, bottom_up_;
  Conv2d extra_;
  AddonParams addons_;
  Conv2d head_, cls_, box_;
  SalientStack stack_{3};
  std::optional<FactorSet> factor_set_;
};

}  // namespace rcnet
