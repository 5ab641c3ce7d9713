#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "transrad/losses.hpp"

using namespace transrad;

namespace {

constexpr double kPi = std::numbers::pi;

double bce(double p, int y) { return -(y * std::log(p) + (1 - y) * std::log(1 - p)); }

// Levels 8x8, 4x4, 2x2 at strides 8/16/32 with every output at `fill`.
RawPredictions flat_predictions(int nc, int reg_max, double fill) {
  RawPredictions p;
  p.num_classes = nc;
  p.reg_max = reg_max;
  for (int l = 0; l < 3; ++l) {
    auto& lv = p.levels[static_cast<std::size_t>(l)];
    lv.height = lv.width = 8 >> l;
    lv.stride = 8 << l;
    const auto n = static_cast<std::size_t>(lv.num_anchors());
    lv.obj.assign(n, fill);
    lv.cls.assign(n * nc, fill);
    lv.box.assign(n * 4 * reg_max, fill);
    lv.dopl.assign(n * 2, 0.0);
  }
  return p;
}

AssignmentResult all_negative(const RawPredictions& p) {
  AssignmentResult r;
  const auto n = static_cast<std::size_t>(p.num_anchors());
  r.gt_index.assign(n, -1);
  r.t.assign(n, 0.0);
  r.iou.assign(n, 0.0);
  return r;
}

double logit(double p) { return std::log(p / (1 - p)); }

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("2D and 3D IoU") {
  const Box2D a{0, 0, 2, 2}, b{1, 1, 3, 3};
  CHECK(iou_2d(a, b) == doctest::Approx(1.0 / 7.0));
  CHECK(iou_2d(b, a) == iou_2d(a, b));
  CHECK(iou_2d(a, a) == 1.0);
  CHECK(iou_2d(a, Box2D{5, 5, 6, 6}) == 0.0);
  CHECK(iou_2d(Box2D{1, 1, 1, 1}, Box2D{1, 1, 1, 1}) == 0.0);

  const Box3D c{0, 0, 0, 2, 2, 2}, d{1, 1, 1, 3, 3, 3};
  CHECK(iou_3d(c, d) == doctest::Approx(1.0 / 15.0));
  CHECK(iou_3d(c, c) == 1.0);
  CHECK(iou_3d(c, Box3D{0, 0, 3, 2, 2, 4}) == 0.0);
}

TEST_CASE("CIoU of identical boxes is zero") {
  const auto p = ciou_loss({1, 2, 5, 4}, {1, 2, 5, 4});
  CHECK(p.loss == 0.0);
  CHECK(p.iou == 1.0);
}

TEST_CASE("CIoU below IoU 0.5 drops the aspect term") {
  const Box2D pred{0, 0, 2, 2}, gt{1.5, 1.5, 3.5, 3.5};
  const auto p = ciou_loss(pred, gt);
  CHECK(p.iou < 0.5);
  CHECK(p.alpha == 0.0);
  CHECK(p.loss == doctest::Approx(p.l_iou + p.l_ncent));
  CHECK(p.l_ncent == doctest::Approx(4.5 / 24.5));
}

TEST_CASE("CIoU hand example at IoU exactly 0.5") {
  const auto p = ciou_loss({0, 0, 2, 2}, {0, 0, 2, 4});
  const double aspect = 4.0 / (kPi * kPi) * std::pow(std::atan(0.5) - kPi / 4.0, 2);
  const double alpha = aspect / (0.5 + aspect);
  CHECK(p.iou == doctest::Approx(0.5));
  CHECK(p.l_iou == doctest::Approx(0.5));
  CHECK(p.l_ncent == doctest::Approx(0.05));
  CHECK(p.l_aspect == doctest::Approx(aspect));
  CHECK(p.alpha == doctest::Approx(alpha));
  CHECK(p.loss == doctest::Approx(0.55 + alpha * aspect));
}

TEST_CASE("CIoU is non-negative and zero only for identical boxes") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 10.0), s(0.1, 5.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng), y = u(rng);
    const Box2D a{x, y, x + s(rng), y + s(rng)};
    const double x2 = u(rng), y2 = u(rng);
    const Box2D b{x2, y2, x2 + s(rng), y2 + s(rng)};
    CHECK(ciou_loss(a, b).loss > 0.0);
  }
}

TEST_CASE("center loss") {
  CHECK(center_loss({0, 0, 2, 2}, {-1, -1, 3, 3}) == 0.0);
  CHECK(center_loss({0, 0, 2, 2}, {3, 4, 5, 6}) == 25.0);
  CHECK(center_loss({10, 20, 12, 22}, {13, 24, 15, 26}) == 25.0);
}

TEST_CASE("DFL decode is the expected bin") {
  std::vector<double> p(16, 0.0);
  p[3] = 1.0;
  CHECK(dfl_decode(p) == 3.0);
  CHECK(dfl_decode(std::vector<double>(16, 1.0 / 16)) == doctest::Approx(7.5));
  std::vector<double> q(16, 0.0);
  q[2] = q[4] = 0.5;
  CHECK(dfl_decode(q) == 3.0);
}

TEST_CASE("DFL values") {
  std::vector<double> p(16, 0.0);
  p[5] = 1.0;
  CHECK(dfl_loss(p, 5.0) == 0.0);
  std::vector<double> q(16, 0.0);
  q[5] = q[6] = 0.5;
  CHECK(dfl_loss(q, 5.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(dfl_loss_logits(std::vector<double>(16, 0.0), 20.0).clamped);
}

TEST_CASE("DFL is minimized by the linear split over the two adjacent bins") {
  for (double y : {2.3, 7.75, 0.1, 14.5}) {
    const auto lo = static_cast<std::size_t>(std::floor(y));
    double best = 1e300, best_m = -1;
    for (int i = 1; i < 10000; ++i) {
      const double m = i / 10000.0;
      std::vector<double> p(16, 0.0);
      p[lo] = m;
      p[lo + 1] = 1 - m;
      const double l = dfl_loss(p, y);
      if (l < best) best = l, best_m = m;
    }
    CHECK(best_m == doctest::Approx(lo + 1 - y).epsilon(2e-4));
  }
}

TEST_CASE("focal loss values") {
  const FocalConfig cfg;
  CHECK(focal_loss(0.5, 1, cfg) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(focal_loss(0.5, 1, cfg) == doctest::Approx(0.043322).epsilon(1e-5));
  CHECK(focal_loss(1.0 - 1e-9, 1, cfg) < 1e-15);
  CHECK(focal_loss_logit(60.0, 1, cfg).loss < 1e-20);
  CHECK(focal_loss(0.5, 1, cfg, 3.0) == doctest::Approx(3.0 * focal_loss(0.5, 1, cfg)));
}

TEST_CASE("focal loss without modulation is half the BCE") {
  const FocalConfig cfg{0.5, 0.0};
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 1000; ++i) {
    const double p = u(rng);
    const int y = i % 2;
    CHECK(focal_loss(p, y, cfg) == doctest::Approx(0.5 * bce(p, y)).epsilon(1e-12));
    const double z = logit(p);
    CHECK(focal_loss_logit(z, y, cfg).loss == doctest::Approx(0.5 * bce(p, y)).epsilon(1e-9));
  }
}

TEST_CASE("smooth L1 branches") {
  CHECK(smooth_l1(0.3, 0.3) == 0.0);
  CHECK(smooth_l1(1.0, 0.0) == 0.5);
  CHECK(smooth_l1(0.0, 1.0) == 0.5);
  CHECK(smooth_l1(2.0, 0.0) == 1.5);
  CHECK(smooth_l1(0.5, 0.0) == 0.125);
  CHECK(smooth_l1_grad(0.5, 0.0) == 0.5);
  CHECK(smooth_l1_grad(-3.0, 0.0) == -1.0);
}

TEST_CASE("a frame without GTs only pays the focal terms") {
  const RawPredictions p = flat_predictions(3, 16, -2.0);
  const std::vector<double> cw{0.3, 0.3, 0.4};
  const LossBreakdown b = total_loss({p}, {all_negative(p)}, LossConfig{}, cw, 16);
  CHECK(b.num_positives == 0);
  for (int k = kCiouRa; k < kNumLossTerms; ++k) CHECK(b.components[static_cast<std::size_t>(k)] == 0.0);
  CHECK(b.components[kFlObj] > 0.0);
  CHECK(b.components[kFlCls] > 0.0);
  CHECK(b.total == doctest::Approx(30 * b.components[kFlObj] + 7.5 * b.components[kFlCls]).epsilon(1e-12));
}

TEST_CASE("perfect predictions have zero regression loss") {
  RawPredictions p = flat_predictions(2, 16, -40.0);
  // Anchor (row 4, col 4) of P3 sits at (36, 36); GT spans one stride on each side.
  const int a = 4 * 8 + 4;
  const Annotation3D gt = annotation_from_box(1, {28, 28, 4, 44, 44, 12});
  auto& lv = p.levels[0];
  lv.obj[a] = 40.0;
  lv.cls[a * 2 + 1] = 40.0;
  for (int s = 0; s < 4; ++s) lv.box[static_cast<std::size_t>((a * 4 + s) * 16 + 1)] = 40.0;
  lv.dopl[a * 2] = logit(0.25);
  lv.dopl[a * 2 + 1] = logit(0.75);

  AssignmentResult as = all_negative(p);
  as.gts = {gt};
  as.gt_index[a] = 0;
  as.t[a] = 1.0;
  as.iou[a] = 1.0;
  const LossBreakdown b = total_loss({p}, {as}, LossConfig{}, std::vector<double>{0.5, 0.5}, 16);
  CHECK(b.num_positives == 1);
  for (int k = kCiouRa; k < kNumLossTerms; ++k)
    CHECK_MESSAGE(b.components[static_cast<std::size_t>(k)] < 1e-12, loss_term_name(k));
  CHECK(b.components[kFlObj] < 1e-30);
  CHECK(b.components[kFlCls] < 1e-30);
}

TEST_CASE("total loss is the weighted sum of its components") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  RawPredictions p = flat_predictions(2, 16, 0.0);
  for (auto& lv : p.levels)
    for (auto* v : {&lv.obj, &lv.cls, &lv.box, &lv.dopl})
      for (double& x : *v) x = u(rng);
  const std::vector<Annotation3D> gts{annotation_from_box(0, {10, 12, 2, 30, 28, 9}),
                                      annotation_from_box(1, {36, 30, 5, 60, 50, 15})};
  AssignConfig acfg;
  acfg.beta = 1.0;
  const AssignmentResult as = tal_assign(make_candidates(p), gts, acfg);
  REQUIRE(as.num_positives() > 0);
  const std::vector<double> cw{0.4, 0.6};
  LossConfig cfg;
  const LossBreakdown b = total_loss({p}, {as}, cfg, cw, 16);
  double sum = 0.0;
  for (int k = 0; k < kNumLossTerms; ++k) sum += cfg.weights.alpha[static_cast<std::size_t>(k)] * b.components[static_cast<std::size_t>(k)];
  CHECK(b.total == doctest::Approx(sum).epsilon(1e-12));

  // Counting the Smooth L1 component twice adds 80 times its value.
  cfg.weights.alpha[kSl1Dopl] *= 2.0;
  const LossBreakdown b2 = total_loss({p}, {as}, cfg, cw, 16);
  CHECK(b2.total - b.total == doctest::Approx(80.0 * b.components[kSl1Dopl]).epsilon(1e-9));

  cfg = LossConfig{};
  cfg.weights.apply_phase2();
  CHECK(cfg.weights.alpha[kFlObj] == 40.0);
  CHECK(cfg.weights.alpha[kFlCls] == 15.0);
  const LossBreakdown b3 = total_loss({p}, {as}, cfg, cw, 16);
  CHECK(b3.total - b.total == doctest::Approx(10.0 * b.components[kFlObj] + 7.5 * b.components[kFlCls]).epsilon(1e-9));
}

TEST_CASE("analytic gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CHECK(gradcheck::dfl_loss(seed).max_rel < 1e-6);
    CHECK(gradcheck::focal_loss(seed).max_rel < 1e-6);
    CHECK(gradcheck::ciou_loss(seed).max_rel < 1e-4);
    CHECK(gradcheck::smooth_l1(seed).max_rel < 1e-6);
  }
  CHECK(gradcheck::total_loss_outputs(1).max_rel < 1e-3);
  CHECK(gradcheck::total_loss_model(1).max_rel < 1e-3);
}

}  // TEST_SUITE
