#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "transrad/detmodel.hpp"
#include "transrad/errors.hpp"

using namespace transrad;

namespace {

ad::Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, bool grad = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (double& x : v) x = u(rng);
  return ad::Tensor(std::move(shape), std::move(v), grad);
}

void zero(ad::Tensor t) {
  for (double& v : t.values_mut()) v = 0.0;
}

bool same(const ad::Tensor& a, const ad::Tensor& b) {
  const auto va = a.values(), vb = b.values();
  return a.shape() == b.shape() && std::equal(va.begin(), va.end(), vb.begin(), vb.end());
}

ad::Shape nchw(int n, int c, int h, int w) { return {n, c, h, w}; }

FeaturePyramid random_pyramid(std::mt19937_64& rng, std::array<int, 3> ch, int s5, bool grad = false) {
  FeaturePyramid p;
  for (int l = 0; l < 3; ++l) {
    const int s = s5 << (2 - l);
    p.maps[static_cast<std::size_t>(l)] = random_tensor(rng, {1, ch[static_cast<std::size_t>(l)], s, s}, grad);
  }
  return p;
}

}  // namespace

TEST_SUITE("detmodel") {

TEST_CASE("neck keeps the pyramid shapes with default channels") {
  nn::Rng wrng(1);
  std::mt19937_64 rng(1);
  Neck neck({64, 128, 256}, NeckConfig{}, wrng);
  const FeaturePyramid fused = neck.forward(random_pyramid(rng, {64, 128, 256}, 8), false);
  CHECK(fused.maps[0].shape() == nchw(1, 64, 32, 32));
  CHECK(fused.maps[1].shape() == nchw(1, 128, 16, 16));
  CHECK(fused.maps[2].shape() == nchw(1, 256, 8, 8));
  CHECK_THROWS_AS(neck.forward(random_pyramid(rng, {64, 128, 128}, 8), false), ConfigError);
}

TEST_CASE("with zero lateral weights N3 ignores P3") {
  nn::Rng wrng(2);
  std::mt19937_64 rng(2);
  Neck neck({8, 16, 32}, NeckConfig{{8, 16, 32}, 1}, wrng);
  // cv1 of n3 sees [P3, up(N4)]; zero the P3 input columns.
  ad::Tensor w = neck.n3.cv1.conv.weight;
  const int out = w.dim(0), in = w.dim(1);
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < 8; ++i) w.values_mut()[static_cast<std::size_t>(o * in + i)] = 0.0;
  FeaturePyramid p = random_pyramid(rng, {8, 16, 32}, 2);
  const ad::Tensor a = neck.forward(p, false).maps[0];
  p.maps[0] = random_tensor(rng, {1, 8, 8, 8});
  CHECK(same(a, neck.forward(p, false).maps[0]));
}

TEST_CASE("gradient of an N3 loss reaches P5") {
  nn::Rng wrng(3);
  std::mt19937_64 rng(3);
  Neck neck({8, 16, 32}, NeckConfig{{8, 16, 32}, 1}, wrng);
  const FeaturePyramid p = random_pyramid(rng, {8, 16, 32}, 2, true);
  ad::sum(neck.forward(p, true).maps[0]).backward();
  REQUIRE(p.maps[2].has_grad());
  double norm = 0.0;
  for (double g : p.maps[2].grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("head output shapes") {
  nn::Rng wrng(4);
  std::mt19937_64 rng(4);
  HeadConfig hc;
  hc.num_classes = 6;
  hc.reg_max = 16;
  Heads heads({64, 128, 256}, hc, wrng);
  const HeadOutputs out = heads.forward(random_pyramid(rng, {64, 128, 256}, 8), false);
  CHECK(out[2].obj.shape() == nchw(1, 1, 8, 8));
  CHECK(out[2].cls.shape() == nchw(1, 6, 8, 8));
  CHECK(out[2].box.shape() == nchw(1, 64, 8, 8));
  CHECK(out[2].dopl.shape() == nchw(1, 2, 8, 8));
  CHECK(out[0].obj.shape() == nchw(1, 1, 32, 32));
  CHECK(out[1].box.shape() == nchw(1, 64, 16, 16));
  CHECK(out[0].stride == 8);
  CHECK(out[1].stride == 16);
  CHECK(out[2].stride == 32);
}

TEST_CASE("zero projection weights leave the objectness bias") {
  nn::Rng wrng(5);
  std::mt19937_64 rng(5);
  HeadConfig hc;
  hc.num_classes = 3;
  hc.width = 8;
  Heads heads({8, 16, 32}, hc, wrng);
  for (auto& b : heads.branches[static_cast<int>(HeadKind::kObj)]) zero(b.proj.weight);
  const HeadOutputs out = heads.forward(random_pyramid(rng, {8, 16, 32}, 2), false);
  const double bias = std::log(0.01 / 0.99);
  for (const auto& lv : out)
    for (double v : lv.obj.values()) CHECK(v == doctest::Approx(bias).epsilon(1e-15));
}

TEST_CASE("perturbing the class head leaves the other heads bit-identical") {
  nn::Rng wrng(6);
  std::mt19937_64 rng(6);
  HeadConfig hc;
  hc.num_classes = 3;
  hc.width = 8;
  Heads heads({8, 16, 32}, hc, wrng);
  const FeaturePyramid p = random_pyramid(rng, {8, 16, 32}, 2);
  const HeadOutputs before = heads.forward(p, false);
  for (auto& b : heads.branches[static_cast<int>(HeadKind::kCls)]) {
    nn::ParamList list;
    b.collect("cls", list);
    for (ad::Tensor t : list.learnable())
      for (double& v : t.values_mut()) v += 0.25;
  }
  const HeadOutputs after = heads.forward(p, false);
  for (int l = 0; l < 3; ++l) {
    CHECK(same(before[static_cast<std::size_t>(l)].box, after[static_cast<std::size_t>(l)].box));
    CHECK(same(before[static_cast<std::size_t>(l)].obj, after[static_cast<std::size_t>(l)].obj));
    CHECK(same(before[static_cast<std::size_t>(l)].dopl, after[static_cast<std::size_t>(l)].dopl));
    CHECK_FALSE(same(before[static_cast<std::size_t>(l)].cls, after[static_cast<std::size_t>(l)].cls));
  }
}

TEST_CASE("no parameters are shared between heads") {
  nn::Rng wrng(7);
  HeadConfig hc;
  hc.width = 8;
  Heads heads({8, 16, 32}, hc, wrng);
  nn::ParamList list;
  heads.collect("head", list);
  std::vector<const ad::Node*> nodes;
  for (const auto& e : list.entries()) nodes.push_back(e.tensor.node().get());
  std::sort(nodes.begin(), nodes.end());
  CHECK(std::adjacent_find(nodes.begin(), nodes.end()) == nodes.end());
  for (const auto& e : list.entries()) {
    const bool named = e.name.rfind("head.obj.", 0) == 0 || e.name.rfind("head.cls.", 0) == 0 ||
                       e.name.rfind("head.box.", 0) == 0 || e.name.rfind("head.dopl.", 0) == 0;
    CHECK_MESSAGE(named, e.name);
  }
}

TEST_CASE("whole detector is deterministic and lays out frames anchor-major") {
  ModelConfig mc = ModelConfig::desk();
  mc.head.num_classes = 3;
  Detector model(mc);
  std::mt19937_64 rng(8);
  const ad::Tensor x = random_tensor(rng, {2, 16, 64, 64});
  const HeadOutputs a = model.forward(x, false);
  const HeadOutputs b = model.forward(x, false);
  for (int l = 0; l < 3; ++l) {
    CHECK(same(a[static_cast<std::size_t>(l)].cls, b[static_cast<std::size_t>(l)].cls));
    CHECK(same(a[static_cast<std::size_t>(l)].box, b[static_cast<std::size_t>(l)].box));
  }

  const RawPredictions p = extract_frame(a, 1, mc.head);
  CHECK(p.num_anchors() == 8 * 8 + 4 * 4 + 2 * 2);
  const auto& lv = p.levels[1];
  const auto& t = a[1].box;  // [2, 4 * reg_max, 4, 4]
  const int h = 2, w = 3, side = 2, bin = 5, ch = side * mc.head.reg_max + bin;
  CHECK(lv.box[static_cast<std::size_t>(((h * 4 + w) * 4 + side) * mc.head.reg_max + bin)] ==
        t.at(((1 * t.dim(1) + ch) * 4 + h) * 4 + w));

  const auto anchors = make_anchors(p);
  REQUIRE(anchors.size() == 84u);
  CHECK(anchors[0].cx == 4.0);
  CHECK(anchors[0].cy == 4.0);
  CHECK(anchors[64 + 4 * 1 + 2].cx == 40.0);
  CHECK(anchors[64 + 4 * 1 + 2].cy == 24.0);
  CHECK(anchors[83].stride == 32);
}

TEST_CASE("cubes map to [N, D, A, R] inputs") {
  RadCube c({4, 3, 2});
  for (int r = 0; r < 4; ++r)
    for (int a = 0; a < 3; ++a)
      for (int d = 0; d < 2; ++d) c.at(r, a, d) = static_cast<float>(100 * r + 10 * a + d);
  const ad::Tensor x = cubes_to_input({&c}, 2.0);
  CHECK(x.shape() == nchw(1, 2, 3, 4));
  for (int r = 0; r < 4; ++r)
    for (int a = 0; a < 3; ++a)
      for (int d = 0; d < 2; ++d) CHECK(x.at((d * 3 + a) * 4 + r) == c.at(r, a, d) / 2.0);
}

TEST_CASE("model configuration validation") {
  ModelConfig mc = ModelConfig::desk();
  CHECK_NOTHROW(mc.validate());
  mc.input_width = 48;
  CHECK_THROWS_AS(mc.validate(), ConfigError);
  mc = ModelConfig::desk();
  mc.head.reg_max = 1;
  CHECK_THROWS_AS(mc.validate(), ConfigError);
}

}  // TEST_SUITE
