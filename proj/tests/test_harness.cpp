#include <algorithm>
#include <functional>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "rcnet/harness/analysis.hpp"
#include "rcnet/harness/detector.hpp"
#include "rcnet/harness/eval.hpp"
#include "rcnet/harness/loss.hpp"
#include "rcnet/harness/scene.hpp"
#include "rcnet/harness/targets.hpp"
#include "rcnet/harness/train.hpp"
#include "support/gradcheck.hpp"

using namespace rcnet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

DetectorConfig config_with(ConnectionForm form) {
  DetectorConfig c;
  c.connection.form = form;
  if (form == ConnectionForm::complete) c.connection.matrix = afp_strength_matrix().values;
  return c;
}

SceneSpec small_scene(std::uint64_t seed, std::size_t size = 48) {
  SceneSpec s = SceneSpec::tiny();
  s.image_size = size;
  s.density = 3;
  s.distractors = 1;
  s.seed = seed;
  return s;
}

}  // namespace

// ---- scenes ---------------------------------------------------------------

TEST(Scene, EmptySceneIsNoiseOnly) {
  SceneSpec s = SceneSpec::tiny();
  s.density = 0;
  s.distractors = 0;
  Rng rng(1);
  const auto sc = generate_scene(s, rng);
  EXPECT_TRUE(sc.objects.empty());
  EXPECT_TRUE(sc.distractors.empty());
  double mean = 0;
  for (double v : sc.image.data()) mean += v;
  EXPECT_NEAR(mean / static_cast<double>(sc.image.numel()), 0.0, 0.01);
}

TEST(Scene, FixedSeedIsBitIdentical) {
  const auto spec = SceneSpec::tiny();
  const auto a = generate_dataset(spec, 3, 0), b = generate_dataset(spec, 3, 0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(std::ranges::equal(a[i].image.data(), b[i].image.data()));
    EXPECT_EQ(a[i].objects, b[i].objects);
  }
  const auto test = generate_dataset(spec, 1, 1);
  EXPECT_FALSE(std::ranges::equal(a[0].image.data(), test[0].image.data()));
}

TEST(Scene, TinyModeObjectsAreSmallAndInside) {
  const auto spec = SceneSpec::tiny();
  std::size_t n = 0;
  for (std::size_t i = 0; n < 10000; ++i) {
    Rng rng = scene_rng(99, 0, i);
    const auto sc = generate_scene(spec, rng);
    for (const auto& o : sc.objects) {
      EXPECT_LE(o.box.max_side(), 8.0);
      EXPECT_GE(std::min(o.box.w, o.box.h), 3.0);
      EXPECT_GE(o.box.x, 0.0);
      EXPECT_GE(o.box.y, 0.0);
      EXPECT_LE(o.box.x + o.box.w, 96.0);
      EXPECT_LE(o.box.y + o.box.h, 96.0);
      ++n;
    }
    ASSERT_EQ(sc.distractors.size(), spec.distractors);
    for (const auto& d : sc.distractors) {
      EXPECT_GE(d.max_side(), 3.0 * spec.min_distractor_scale - 0.5);
      for (const auto& o : sc.objects) EXPECT_FALSE(detail::overlaps(o.box, d, 0.0));
    }
  }
}

TEST(Scene, InfeasibleDensityFailsAfterRetries) {
  SceneSpec s = SceneSpec::tiny();
  s.image_size = 16;
  s.density = 200;
  s.distractors = 0;
  Rng rng(2);
  EXPECT_THROW(generate_scene(s, rng), std::runtime_error);
}

TEST(Scene, ValidationRejectsLargeTinyObjects) {
  SceneSpec s = SceneSpec::tiny();
  s.max_object = 12;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_NO_THROW(SceneSpec::diversified().validate());
}

// ---- targets --------------------------------------------------------------

TEST(Targets, ScaleAssignment) {
  const std::vector<double> thr{16, 32, 64};
  const std::vector<LevelGeometry> geo{{4, 24, 24}, {8, 12, 12}, {16, 6, 6}, {32, 3, 3}};
  const std::vector<ObjectAnnotation> objs{{{10, 10, 6, 6}, 0}, {{40, 40, 40, 30}, 0},
                                           {{0, 0, 90, 90}, 0}};
  const auto t = assign_targets(objs, geo, thr, 1);
  EXPECT_EQ(t.level_of, (std::vector<std::size_t>{0, 2, 3}));
  const auto& l0 = t.levels[0];
  const std::size_t cell = 3 * 24 + 3;  // center (13, 13) / 4
  EXPECT_EQ(l0.positive[cell], 1);
  EXPECT_EQ(l0.cls[cell], 1.0);
  EXPECT_NEAR(l0.box[cell], 13.0 / 4 - 3, 1e-15);
  EXPECT_NEAR(l0.box[2 * 24 * 24 + cell], std::log(6.0 / 4), 1e-15);
  EXPECT_THROW(assign_targets(std::vector<ObjectAnnotation>{{{1, 1, 4, 4}, 3}}, geo, thr, 1),
               std::invalid_argument);
}

TEST(Targets, EveryObjectLandsInExactlyOneLevel) {
  const std::vector<double> thr{16, 32, 64};
  const std::vector<LevelGeometry> geo{{4, 24, 24}, {8, 12, 12}, {16, 6, 6}, {32, 3, 3}};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng = scene_rng(seed, 7, 0);
    auto spec = SceneSpec::diversified();
    spec.density = 2;
    const auto sc = generate_scene(spec, rng);
    const auto t = assign_targets(sc.objects, geo, thr, 1);
    EXPECT_EQ(t.num_positive() + t.collisions, sc.objects.size());
    for (std::size_t i = 0; i < sc.objects.size(); ++i) {
      EXPECT_EQ(t.level_of[i], branch_for(sc.objects[i].box.max_side(), thr));
    }
  }
}

TEST(Targets, TinySceneHasNoCollisions) {
  const auto data = generate_dataset(SceneSpec::tiny(), 200, 0);
  const std::vector<LevelGeometry> geo{{4, 24, 24}, {8, 12, 12}, {16, 6, 6}, {32, 3, 3}};
  for (const auto& s : data) {
    const auto t = assign_targets(s.objects, geo, std::vector<double>{16, 32, 64}, 1);
    EXPECT_EQ(t.collisions, 0u);
    EXPECT_EQ(t.levels[0].num_positive, s.objects.size());
  }
}

// ---- losses ---------------------------------------------------------------

TEST(FocalLoss, ClosedForms) {
  const std::vector<double> pos{1.0};
  EXPECT_NEAR(focal_loss(Tensor({1}, 0.0), pos, 1.0, 0.0).item(), std::log(2.0), 1e-15);
  EXPECT_EQ(focal_loss(Tensor({1}, 800.0), pos, 1.0, 2.0).item(), 0.0);
  EXPECT_EQ(focal_loss(Tensor({1}, -800.0), std::vector<double>{0.0}, 0.25, 2.0).item(), 0.0);
  // gamma = 2: (1 - p)^2 (-log p) with p = sigmoid(0.3).
  const double p = 1 / (1 + std::exp(-0.3));
  EXPECT_NEAR(focal_loss(Tensor({1}, 0.3), pos, 0.5, 2.0, 4.0).item(),
              0.5 * (1 - p) * (1 - p) * -std::log(p) / 4.0, 1e-15);
  EXPECT_THROW(focal_loss(Tensor({1}, 0.0), pos, 1.0, -1.0), std::invalid_argument);
  EXPECT_THROW(focal_loss(Tensor({2}, 0.0), pos, 1.0, 2.0), std::invalid_argument);
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (double gamma : {0.0, 0.5, 2.0}) {
    Tensor z = random_tensor({2, 4, 4}, rng, -4, 4);
    std::vector<double> t(z.numel(), 0.0);
    for (std::size_t i = 0; i < t.size(); i += 5) t[i] = 1.0;
    const auto r = rcnet::testing::check_gradients({z}, [&] { return focal_loss(z, t, 0.75, gamma, 3.0); });
    EXPECT_LE(r.max_rel_error, rcnet::testing::kFdRelTol) << "gamma " << gamma;
  }
}

TEST(BoxLoss, OnlyPositivesAndGradient) {
  Rng rng(4);
  Tensor pred = random_tensor({4, 3, 3}, rng);
  std::vector<double> target(pred.numel());
  for (double& v : target) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<unsigned char> positive(9, 0);
  positive[4] = 1;
  positive[7] = 1;
  double expect = 0;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i : {4u, 7u}) expect += 0.5 * std::pow(pred[c * 9 + i] - target[c * 9 + i], 2);
  EXPECT_NEAR(box_loss(pred, target, positive, 2.0).item(), expect / 2.0, 1e-15);
  const auto r = rcnet::testing::check_gradients({pred}, [&] { return box_loss(pred, target, positive, 2.0); });
  EXPECT_LE(r.max_rel_error, rcnet::testing::kFdRelTol);
}

// ---- AP -------------------------------------------------------------------

namespace {

std::vector<Detection> as_detections(const std::vector<ObjectAnnotation>& gt, double score = 1.0) {
  std::vector<Detection> d;
  for (const auto& g : gt) d.push_back({g.box, score, g.class_id, 0});
  return d;
}

// Independent AP for one image: greedy by score, best-IoU unmatched GT, then
// precision envelope sampled at 101 recall points.
double oracle_ap(std::vector<Detection> dets, const std::vector<ObjectAnnotation>& gts, double thr) {
  std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  double tp = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const auto& a = dets[k].box;
      const auto& b = gts[g].box;
      const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
      const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
      const double v = ix * iy / (a.w * a.h + b.w * b.h - ix * iy);
      if (!used[g] && v >= best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      tp += 1;
    }
    prec.push_back(tp / static_cast<double>(k + 1));
    rec.push_back(tp / static_cast<double>(gts.size()));
  }
  double ap = 0;
  for (int i = 0; i <= 100; ++i) {
    double p = 0;
    for (std::size_t k = 0; k < prec.size(); ++k)
      if (rec[k] >= i / 100.0 - 1e-12) p = std::max(p, prec[k]);
    ap += p;
  }
  return ap / 101.0;
}

}  // namespace

TEST(EvaluateAp, PerfectEmptyAndAbsent) {
  const std::vector<ObjectAnnotation> gt{{{2, 2, 6, 6}, 0}, {{30, 30, 20, 20}, 0}, {{60, 10, 40, 40}, 0}};
  const std::vector<std::vector<ObjectAnnotation>> gts{gt};
  auto rep = evaluate_ap(std::vector<std::vector<Detection>>{as_detections(gt)}, gts);
  EXPECT_EQ(*rep.ap50, 1.0);
  EXPECT_EQ(*rep.ap_small, 1.0);
  EXPECT_EQ(*rep.ap_medium, 1.0);
  EXPECT_EQ(*rep.ap_large, 1.0);
  rep = evaluate_ap(std::vector<std::vector<Detection>>{{}}, gts);
  EXPECT_EQ(*rep.ap50, 0.0);
  rep = evaluate_ap(std::vector<std::vector<Detection>>{{}}, std::vector<std::vector<ObjectAnnotation>>{{}});
  EXPECT_FALSE(rep.ap50.has_value());
  EXPECT_FALSE(rep.ap_small.has_value());
}

TEST(EvaluateAp, FiveObjectsMatchIndependentMatcher) {
  Rng rng(5);
  std::uniform_real_distribution<double> pos(0, 80), side(4, 14), jitter(-3, 3), score(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ObjectAnnotation> gt;
    for (int i = 0; i < 5; ++i) gt.push_back({{pos(rng), pos(rng), side(rng), side(rng)}, 0});
    std::vector<Detection> dets;
    for (const auto& g : gt) {
      if (score(rng) < 0.2) continue;
      dets.push_back({{g.box.x + jitter(rng), g.box.y + jitter(rng), g.box.w, g.box.h}, score(rng), 0, 0});
    }
    for (int i = 0; i < 3; ++i) dets.push_back({{pos(rng), pos(rng), side(rng), side(rng)}, score(rng), 0, 0});
    const auto rep = evaluate_ap(std::vector<std::vector<Detection>>{dets},
                                 std::vector<std::vector<ObjectAnnotation>>{gt});
    EXPECT_NEAR(*rep.ap50, oracle_ap(dets, gt, 0.5), 1e-12);
  }
}

TEST(EvaluateAp, InvariantToDetectionOrder) {
  Rng rng(6);
  std::uniform_real_distribution<double> pos(0, 80), side(4, 30), score(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<ObjectAnnotation>> gts(3);
    std::vector<std::vector<Detection>> dets(3);
    for (std::size_t img = 0; img < 3; ++img) {
      for (int i = 0; i < 4; ++i) gts[img].push_back({{pos(rng), pos(rng), side(rng), side(rng)}, 0});
      for (const auto& g : gts[img]) dets[img].push_back({g.box, score(rng), 0, 0});
      for (int i = 0; i < 4; ++i) dets[img].push_back({{pos(rng), pos(rng), side(rng), side(rng)}, score(rng), 0, 0});
    }
    const auto a = evaluate_ap(dets, gts);
    for (auto& d : dets) std::shuffle(d.begin(), d.end(), rng);
    const auto b = evaluate_ap(dets, gts);
    EXPECT_EQ(*a.ap50, *b.ap50);
    for (double v : {*a.ap50}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Nms, SuppressesOverlapsPerClass) {
  std::vector<Detection> d{{{0, 0, 10, 10}, 0.9, 0, 0}, {{1, 1, 10, 10}, 0.8, 0, 0},
                           {{1, 1, 10, 10}, 0.7, 1, 0}, {{50, 50, 5, 5}, 0.6, 0, 0}};
  const auto kept = nms(d, 0.5, 10);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].class_id, 1);
  EXPECT_EQ(nms(d, 0.5, 1).size(), 1u);
}

// ---- saliency and interference ---------------------------------------------

TEST(Saliency, NormalizationCases) {
  const auto flat = normalize_saliency(Tensor({1, 4, 4}, 3.0));
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  Tensor hot({1, 3, 3}, 0.0);
  hot.mutable_data()[4] = 2.5;
  const auto n = normalize_saliency(hot);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(n[i], i == 4 ? 1.0 : 0.0);
}

TEST(Saliency, MapsAreNormalizedChannelMaxOfHeadInputs) {
  ToyDetector det(config_with(ConnectionForm::economical), 7);
  const auto sc = generate_dataset(small_scene(8), 1, 0)[0];
  const auto maps = saliency_maps(det, sc.image);
  const auto r = det.forward(sc.image);
  ASSERT_EQ(maps.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    const auto cm = channel_max(r.branch_inputs[l]);
    const auto [lo, hi] = std::minmax_element(cm.data().begin(), cm.data().end());
    for (std::size_t i = 0; i < cm.numel(); ++i) {
      EXPECT_NEAR(maps[l][i], (cm[i] - *lo) / (*hi - *lo), 1e-15);
    }
  }
}

TEST(Interference, Cases) {
  const std::vector<std::size_t> strides{4, 8};
  const std::vector<ObjectAnnotation> objs{{{0, 0, 16, 32}, 0}};
  const std::vector<Tensor> zero{Tensor({1, 8, 8}, 0.0), Tensor({1, 4, 4}, 0.0)};
  EXPECT_EQ(interference_metric(zero, objs, strides), (std::vector<double>{0.0, 0.0}));
  const std::vector<Tensor> ones{Tensor({1, 8, 8}, 1.0), Tensor({1, 4, 4}, 1.0)};
  EXPECT_EQ(interference_metric(ones, objs, strides), (std::vector<double>{1.0, 1.0}));
}

TEST(Interference, MatchesMaskAndMeanOracle) {
  Rng rng(9);
  const std::vector<std::size_t> strides{4, 8, 16, 32};
  for (int t = 0; t < 50; ++t) {
    std::vector<Tensor> maps;
    for (std::size_t l = 0; l < 4; ++l) maps.push_back(random_tensor({1, 24u >> l, 24u >> l}, rng, 0, 1));
    Rng srng = scene_rng(static_cast<std::uint64_t>(t), 3, 0);
    const auto sc = generate_scene(SceneSpec::tiny(), srng);
    const auto m = interference_metric(maps, sc.objects, strides);
    for (std::size_t l = 0; l < 4; ++l) {
      const std::size_t hw = 24u >> l;
      std::vector<int> mask(hw * hw, 0);
      for (const auto& o : sc.objects) {
        const auto x0 = static_cast<std::size_t>(std::floor(o.box.x / strides[l]));
        const auto y0 = static_cast<std::size_t>(std::floor(o.box.y / strides[l]));
        const auto x1 = std::min(hw, static_cast<std::size_t>(std::ceil((o.box.x + o.box.w) / strides[l])));
        const auto y1 = std::min(hw, static_cast<std::size_t>(std::ceil((o.box.y + o.box.h) / strides[l])));
        for (std::size_t y = y0; y < std::max(y1, y0 + 1); ++y)
          for (std::size_t x = x0; x < std::max(x1, x0 + 1); ++x) mask[y * hw + x] = 1;
      }
      double acc = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != (l == 0 ? 1 : 0)) continue;
        acc += maps[l][i];
        ++n;
      }
      EXPECT_NEAR(m[l], n ? acc / n : 0.0, 1e-15);
    }
  }
}

// ---- detector ---------------------------------------------------------------

TEST(Detector, BranchShapesAndPassThrough) {
  ToyDetector det(config_with(ConnectionForm::economical), 10);
  const auto sc = generate_dataset(small_scene(11, 64), 1, 0)[0];
  const auto r = det.forward(sc.image);
  ASSERT_EQ(r.branch_inputs.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(r.branch_inputs[l].shape(), (Shape{8, 16u >> l, 16u >> l}));
    EXPECT_EQ(r.cls_logits[l].shape(), (Shape{1, 16u >> l, 16u >> l}));
    EXPECT_EQ(r.box_preds[l].shape(), (Shape{4, 16u >> l, 16u >> l}));
    if (l > 0) {
      EXPECT_TRUE(r.branch_inputs[l].same_tensor(r.pyramid[l]));
    }
  }
}

TEST(Detector, IdentityCompleteMatchesPlainPyramid) {
  auto cfg = config_with(ConnectionForm::complete);
  cfg.connection.matrix = Matrix::identity(4).values;
  ToyDetector a(cfg, 12), b(config_with(ConnectionForm::none), 12);
  const auto sc = generate_dataset(small_scene(13), 1, 0)[0];
  const auto ra = a.forward(sc.image), rb = b.forward(sc.image);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_TRUE(std::ranges::equal(ra.cls_logits[l].data(), rb.cls_logits[l].data()));
  }
}

TEST(Detector, EveryFormRunsAndStaysFinite) {
  const auto sc = generate_dataset(small_scene(14), 1, 0)[0];
  for (auto form : {ConnectionForm::none, ConnectionForm::single_branch, ConnectionForm::kdn,
                    ConnectionForm::economical, ConnectionForm::complete, ConnectionForm::variant_sm,
                    ConnectionForm::variant_sl}) {
    for (auto neck : {NeckType::fpn, NeckType::pafpn}) {
      for (auto attach : {AttachPoint::topdown_out, AttachPoint::bottomup_out}) {
        auto cfg = config_with(form);
        cfg.neck = neck;
        cfg.connection.attach_point = attach;
        cfg.connection.addons = {true, true, true};
        ToyDetector det(cfg, 15);
        ForwardOptions fo;
        fo.training = true;
        fo.objects = sc.objects;
        const auto r = det.forward(sc.image, fo);
        EXPECT_EQ(r.branch_inputs.size(), cfg.num_branches());
        const auto t = assign_targets(sc.objects, branch_geometry(r, cfg.branch_strides()),
                                      cfg.scale_thresholds, 1);
        EXPECT_TRUE(std::isfinite(detection_loss(r, t, {}).total.item()));
      }
    }
  }
}

namespace {

std::function<Tensor()> detector_loss(const ToyDetector& det, const DetectorConfig& cfg,
                                      const Scene& sc) {
  return [&det, cfg, &sc] {
    ForwardOptions fo;
    fo.training = true;
    const auto r = det.forward(sc.image, fo);
    const auto t = assign_targets(sc.objects, branch_geometry(r, cfg.branch_strides()),
                                  cfg.scale_thresholds, 1);
    return detection_loss(r, t, {}).total;
  };
}

std::vector<Tensor> parameter_tensors(const ToyDetector& det) {
  std::vector<Tensor> params;
  for (const auto& p : det.parameters()) params.push_back(p.tensor);
  return params;
}

}  // namespace

TEST(Detector, LossGradientMatchesDirectionalDifference) {
  for (auto form : {ConnectionForm::none, ConnectionForm::economical, ConnectionForm::complete,
                    ConnectionForm::kdn}) {
    auto cfg = config_with(form);
    cfg.backbone_channels = 4;
    cfg.neck_channels = 4;
    ToyDetector det(cfg, 16);
    auto spec = SceneSpec::diversified();
    spec.density = 3;
    spec.seed = 17;
    const auto sc = generate_dataset(spec, 1, 0)[0];
    for (std::uint64_t dir = 0; dir < 3; ++dir) {
      const auto r = rcnet::testing::check_directional(parameter_tensors(det), detector_loss(det, cfg, sc), dir);
      EXPECT_LE(r.rel_error, rcnet::testing::kFdRelTol) << r.analytic << " vs " << r.numeric;
    }
  }
}

TEST(Detector, BackgroundLossGradientMatchesFiniteDifferencesPerParameter) {
  // No objects: the loss is a small sum of negative-cell focal terms, so the
  // per-element difference is far above the rounding floor of the loss.
  auto cfg = config_with(ConnectionForm::economical);
  cfg.backbone_channels = 4;
  cfg.neck_channels = 4;
  ToyDetector det(cfg, 18);
  auto spec = small_scene(19, 32);
  spec.density = 0;
  const auto sc = generate_dataset(spec, 1, 0)[0];
  ASSERT_TRUE(sc.objects.empty());
  const auto r = rcnet::testing::check_gradients(parameter_tensors(det), detector_loss(det, cfg, sc));
  EXPECT_LE(r.max_rel_error, rcnet::testing::kFdRelTol)
      << r.worst_analytic << " vs " << r.worst_numeric << " over " << r.checked;
}

// ---- gradient decomposition -------------------------------------------------

TEST(GradDecomposition, FullEqualsOriginalPlusRenormalized) {
  ToyDetector det(config_with(ConnectionForm::economical), 18);
  const auto batch = generate_dataset(small_scene(19), 2, 0);
  const auto g = grad_decomposition_check(det, batch, {});
  EXPECT_LE(g.max_abs_residual, 1e-8);
  EXPECT_GT(g.renormalized_norm, 0.0);
  EXPECT_GT(g.baseline_norm, 0.0);
}

TEST(GradDecomposition, ZeroStrengthsGiveZeroConnectionGradient) {
  ToyDetector det(config_with(ConnectionForm::economical), 20);
  const auto batch = generate_dataset(small_scene(21), 2, 0);
  ForwardOptions base;
  base.rc_strengths = Strengths{{0, 0, 0}};
  const auto g = grad_decomposition_check(det, batch, {}, base);
  for (std::size_t i = 0; i < g.full.size(); ++i) {
    EXPECT_EQ(g.renormalized[i], 0.0);
    EXPECT_EQ(g.full[i], g.original[i]);
  }
}

TEST(GradDecomposition, ZeroLossGivesZeroGradients) {
  ToyDetector det(config_with(ConnectionForm::economical), 22);
  const auto batch = generate_dataset(small_scene(23), 2, 0);
  const LossConfig zero{0.0, 2.0, 0.0};
  const auto g = grad_decomposition_check(det, batch, zero);
  for (std::size_t i = 0; i < g.full.size(); ++i) {
    EXPECT_EQ(g.full[i], 0.0);
    EXPECT_EQ(g.original[i], 0.0);
    EXPECT_EQ(g.renormalized[i], 0.0);
  }
}

TEST(GradDecomposition, UnsupportedConfigurationsAreRejected) {
  const auto batch = generate_dataset(small_scene(24), 1, 0);
  ToyDetector complete(config_with(ConnectionForm::complete), 25);
  EXPECT_THROW(grad_decomposition_check(complete, batch, {}), std::invalid_argument);
  auto cfg = config_with(ConnectionForm::economical);
  cfg.neck = NeckType::pafpn;
  ToyDetector pafpn(cfg, 26);
  EXPECT_THROW(grad_decomposition_check(pafpn, batch, {}), std::invalid_argument);
}

// ---- training ---------------------------------------------------------------

TEST(Schedule, WarmupAndStepDecay) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.warmup_fraction = 0.05;
  const std::size_t total = 120;  // warm-up ceil(6) steps
  EXPECT_NEAR(learning_rate(cfg, 0, total), 0.1 / 6, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 5, total), 0.1, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 79, total), 0.1, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 80, total), 0.01, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 110, total), 0.001, 1e-15);
}

TEST(Train, ZeroEpochsAndZeroLearningRate) {
  const auto data = generate_dataset(small_scene(27), 4, 0);
  ToyDetector det(config_with(ConnectionForm::economical), 28);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_TRUE(train(det, data, {}, cfg, 1).empty());

  std::vector<std::vector<double>> before;
  for (const auto& p : det.parameters()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  cfg.epochs = 1;
  cfg.lr = 0.0;
  const auto rows = train(det, data, {}, cfg, 1);
  ASSERT_EQ(rows.size(), 1u);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(before[i], det.parameters()[i].tensor.data()));
  }
}

TEST(Train, SeededRunsAreIdenticalAndLossIsFinite) {
  const auto train_set = generate_dataset(small_scene(29), 8, 0);
  const auto test_set = generate_dataset(small_scene(29), 3, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  auto run = [&](ConnectionForm form) {
    ToyDetector det(config_with(form), 30);
    return train(det, train_set, test_set, cfg, 30);
  };
  for (auto form : {ConnectionForm::none, ConnectionForm::economical, ConnectionForm::kdn}) {
    const auto a = run(form), b = run(form);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t e = 0; e < a.size(); ++e) {
      EXPECT_EQ(a[e].loss_total, b[e].loss_total);
      EXPECT_EQ(a[e].ap50, b[e].ap50);
      EXPECT_EQ(a[e].interference, b[e].interference);
      EXPECT_TRUE(std::isfinite(a[e].loss_total));
    }
  }
}

TEST(Train, KdnTrainingProducesFactorSet) {
  const auto data = generate_dataset(small_scene(31), 6, 0);
  ToyDetector det(config_with(ConnectionForm::kdn), 32);
  TrainConfig cfg;
  cfg.epochs = 2;
  train(det, data, {}, cfg, 32);
  ASSERT_TRUE(det.factor_set().has_value());
  const auto& fs = *det.factor_set();
  EXPECT_EQ(fs.images, 12u);
  double s = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    s += fs.lambda_infer[l];
    EXPECT_EQ(fs.relevant[l], fs.lambda_infer[l] >= 1.0);
  }
  EXPECT_NEAR(s, 3.0, 1e-12);
}

TEST(Train, DivergenceIsReported) {
  const auto data = generate_dataset(small_scene(33), 4, 0);
  ToyDetector det(config_with(ConnectionForm::none), 34);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e200;
  cfg.grad_clip = 0;
  cfg.warmup_fraction = 0;
  EXPECT_THROW(train(det, data, {}, cfg, 1), DivergenceError);
}
