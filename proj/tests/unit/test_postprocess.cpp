#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "scenes.hpp"
#include "transrad/postprocess.hpp"

using namespace transrad;

namespace {

double logit(double p) { return std::log(p / (1 - p)); }

// Levels 8x8, 4x4, 2x2 at strides 8/16/32 where nothing clears any threshold.
RawPredictions quiet_predictions(int nc, int reg_max) {
  RawPredictions p;
  p.num_classes = nc;
  p.reg_max = reg_max;
  for (int l = 0; l < 3; ++l) {
    auto& lv = p.levels[static_cast<std::size_t>(l)];
    lv.height = lv.width = 8 >> l;
    lv.stride = 8 << l;
    const auto n = static_cast<std::size_t>(lv.num_anchors());
    lv.obj.assign(n, -40.0);
    lv.cls.assign(n * nc, -40.0);
    lv.box.assign(n * 4 * reg_max, 0.0);
    lv.dopl.assign(n * 2, 0.0);
  }
  return p;
}

// Turns P3 anchor a into a confident detection of class cls.
void light_up(RawPredictions& p, int a, int cls, double score, int bin, double z1, double z2) {
  auto& lv = p.levels[0];
  const int nc = p.num_classes, rm = p.reg_max;
  lv.obj[static_cast<std::size_t>(a)] = logit(score);
  lv.cls[static_cast<std::size_t>(a * nc + cls)] = 40.0;
  for (int s = 0; s < 4; ++s)
    for (int b = 0; b < rm; ++b) lv.box[static_cast<std::size_t>((a * 4 + s) * rm + b)] = b == bin ? 40.0 : -40.0;
  lv.dopl[static_cast<std::size_t>(a * 2)] = logit(z1);
  lv.dopl[static_cast<std::size_t>(a * 2 + 1)] = logit(z2);
}

Detection det(int cls, double score, Box3D box) {
  Detection d;
  d.box = box;
  d.class_id = cls;
  d.class_score = score;
  d.objectness = score;
  return d;
}

bool same_list(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].box == b[i].box) || a[i].class_id != b[i].class_id || a[i].class_score != b[i].class_score) return false;
  return true;
}

}  // namespace

TEST_SUITE("postprocess") {

TEST_CASE("decode assembles the box from DFL distances and Doppler extents") {
  RawPredictions p = quiet_predictions(3, 16);
  const int a = 3 * 8 + 4;  // centre (36, 28)
  light_up(p, a, 2, 1.0 - 1e-17, 2, 0.75, 0.25);
  const auto dets = decode(p, {64, 64, 256}, 0.3);
  REQUIRE(dets.size() == 1);
  const Detection& d = dets[0];
  CHECK(d.box.x1 == doctest::Approx(36.0 - 16.0));
  CHECK(d.box.y1 == doctest::Approx(28.0 - 16.0));
  CHECK(d.box.x2 == doctest::Approx(36.0 + 16.0));
  CHECK(d.box.y2 == doctest::Approx(28.0 + 16.0));
  CHECK(d.box.z1 == doctest::Approx(64.0));
  CHECK(d.box.z2 == doctest::Approx(192.0));
  CHECK(d.class_id == 2);
  CHECK(d.class_score == doctest::Approx(1.0));
  CHECK(d.level == 0);
}

TEST_CASE("decode clamps to the cube and applies the score threshold") {
  RawPredictions p = quiet_predictions(2, 16);
  light_up(p, 0, 0, 0.9, 5, 0.1, 0.2);
  light_up(p, 9, 1, 0.2, 1, 0.1, 0.2);
  const auto dets = decode(p, {64, 64, 16}, 0.3);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].box.x1 == 0.0);
  CHECK(dets[0].box.y1 == 0.0);
  CHECK(dets[0].class_score == doctest::Approx(0.9));
  CHECK(decode(p, {64, 64, 16}, 0.95).empty());
}

TEST_CASE("class NMS") {
  const Box3D b{0, 0, 0, 4, 4, 4};
  auto kept = class_nms({det(0, 0.8, b), det(0, 0.9, b)}, 0.3);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].class_score == 0.9);
  CHECK(class_nms({det(0, 0.9, b), det(1, 0.8, b)}, 0.3).size() == 2);
  CHECK(class_nms({}, 0.3).empty());
}

TEST_CASE("location-aware NMS") {
  const Box3D b{0, 0, 0, 4, 4, 4}, shifted{1, 0, 0, 5, 4, 4};
  auto kept = la_nms({det(1, 0.8, shifted), det(0, 0.9, b)}, 0.1);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].class_score == 0.9);
  CHECK(la_nms({det(0, 0.9, b), det(0, 0.8, shifted)}, 0.1).size() == 2);
  kept = la_nms({det(0, 0.5, b), det(1, 0.9, {10, 10, 10, 12, 12, 12}), det(2, 0.7, {20, 0, 0, 22, 2, 2})}, 0.1);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].class_score == 0.9);
  CHECK(kept[1].class_score == 0.7);
  CHECK(kept[2].class_score == 0.5);
}

TEST_CASE("location-aware NMS matches the literal algorithm") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Detection> boxes;
    const int n = std::uniform_int_distribution<int>(0, 20)(rng);
    for (int i = 0; i < n; ++i) boxes.push_back(scenes::random_detection(rng, 3));
    const double thr = std::array<double, 3>{0.05, 0.1, 0.3}[static_cast<std::size_t>(trial % 3)];
    const auto kept = la_nms(boxes, thr);
    CHECK(same_list(kept, oracle::la_nms_literal(boxes, thr)));
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        if (kept[i].class_id != kept[j].class_id) CHECK(iou_3d(kept[i].box, kept[j].box) <= thr);
  }
}

TEST_CASE("NMS output does not depend on input order") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> boxes;
    for (int i = 0; i < 15; ++i) {
      boxes.push_back(scenes::random_detection(rng, 3));
      if (i % 4 == 0) boxes.back().class_score = 0.5;  // exercise ties
    }
    auto shuffled = boxes;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(same_list(la_nms(boxes, 0.1), la_nms(shuffled, 0.1)));
    CHECK(same_list(class_nms(boxes, 0.3), class_nms(shuffled, 0.3)));
  }
}

TEST_CASE("pipeline on three stacked boxes keeps only the best") {
  RawPredictions p = quiet_predictions(2, 16);
  light_up(p, 4 * 8 + 4, 0, 0.9, 3, 0.2, 0.6);
  light_up(p, 4 * 8 + 5, 0, 0.8, 3, 0.2, 0.6);
  light_up(p, 5 * 8 + 4, 1, 0.7, 3, 0.2, 0.6);
  const CubeShape cube{64, 64, 16};
  PostprocessConfig cfg;

  const auto decoded = decode(p, cube, cfg.score_thr);
  REQUIRE(decoded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) CHECK(iou_3d(decoded[i].box, decoded[j].box) > cfg.class_nms_thr);

  const auto after_class = class_nms(decoded, cfg.class_nms_thr);
  REQUIRE(after_class.size() == 2);
  CHECK(after_class[0].class_score == doctest::Approx(0.9));
  CHECK(after_class[1].class_score == doctest::Approx(0.7));

  const auto out = postprocess_pipeline(p, cube, cfg);
  REQUIRE(out.size() == 1);
  CHECK(out[0].class_score == doctest::Approx(0.9));
  CHECK(out[0].class_id == 0);
}

TEST_CASE("pipeline edge cases") {
  RawPredictions p = quiet_predictions(2, 16);
  CHECK(postprocess_pipeline(p, {64, 64, 16}, PostprocessConfig{}).empty());
  light_up(p, 10, 1, 0.6, 2, 0.3, 0.5);
  const auto decoded = decode(p, {64, 64, 16}, 0.3);
  const auto out = postprocess_pipeline(p, {64, 64, 16}, PostprocessConfig{});
  CHECK(same_list(out, decoded));
}

TEST_CASE("detection dump round trip") {
  std::mt19937_64 rng(3);
  std::vector<FrameDetections> frames{{"frame_b", {}}, {"frame_a", {}}, {"empty", {}}};
  for (int i = 0; i < 5; ++i) frames[0].dets.push_back(scenes::random_detection(rng, 4));
  for (int i = 0; i < 3; ++i) frames[1].dets.push_back(scenes::random_detection(rng, 4));
  std::stringstream ss;
  write_detections(ss, frames);
  const auto back = read_detections(ss);
  REQUIRE(back.size() >= 2);
  CHECK(back[0].frame_id == "frame_b");
  CHECK(back[1].frame_id == "frame_a");
  for (std::size_t f = 0; f < 2; ++f) {
    REQUIRE(back[f].dets.size() == frames[f].dets.size());
    for (std::size_t i = 0; i < back[f].dets.size(); ++i) {
      const Detection &x = back[f].dets[i], &y = frames[f].dets[i];
      CHECK(x.box == y.box);
      CHECK(x.class_id == y.class_id);
      CHECK(x.class_score == y.class_score);
      CHECK(x.objectness == y.objectness);
    }
  }

  std::stringstream line("f0 1 0.5 0.7 1 2 3 4 5 6\n");
  const auto parsed = read_detections(line);
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].dets[0].box == Box3D{1, 2, 3, 4, 5, 6});
  CHECK(parsed[0].dets[0].class_id == 1);
}

}  // TEST_SUITE
