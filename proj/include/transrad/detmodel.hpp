#pragma once

// FPN neck (top-down only) and the four anchor-free decoupled heads, plus the
// whole detector. The input image is the RA plane with the Doppler bins as
// channels: tensor [N, D, A, R], so feature rows follow azimuth (y) and
// columns follow range (x).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "transrad/backbone.hpp"
#include "transrad/nn.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

struct NeckConfig {
  std::array<int, 3> out_channels{64, 128, 256};
  int c2f_depth = 1;
};

struct HeadConfig {
  int num_classes = 6;
  int reg_max = 16;
  int width = 64;        // hidden width of every head branch
  double prior = 0.01;   // initial objectness / class probability
  double dfl_init_slope = 1.0;  // initial box logits 1 - slope * bin
};

struct ModelConfig {
  BackboneConfig backbone;
  NeckConfig neck;
  HeadConfig head;
  int input_height = 256;  // azimuth bins
  int input_width = 256;   // range bins
  double input_scale = 1.0;  // cube values are divided by this
  std::uint64_t seed = 0;

  void validate() const;
  // Reduced model for CPU-scale experiments and tests.
  static ModelConfig desk();
};

// Split-transform-merge block: 1x1 conv, split, n bottlenecks, concat, 1x1 conv.
class C2f {
 public:
  C2f() = default;
  C2f(int in, int out, int depth, nn::Rng& rng);
  ad::Tensor forward(const ad::Tensor& x, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  int hidden = 0;
  nn::ConvBnAct cv1, cv2;
  std::vector<std::array<nn::ConvBnAct, 2>> bottlenecks;
};

class Neck {
 public:
  Neck() = default;
  Neck(const std::array<int, 3>& in_channels, const NeckConfig& cfg, nn::Rng& rng);
  // N5 = C2f(P5); N4 = C2f([P4, up(N5)]); N3 = C2f([P3, up(N4)]).
  FeaturePyramid forward(const FeaturePyramid& pyr, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  std::array<int, 3> in_channels{};
  C2f n5, n4, n3;
};

enum class HeadKind { kObj = 0, kCls = 1, kBox = 2, kDopl = 3 };
const char* head_name(HeadKind kind);

// Two 3x3 conv-bn-act layers and a 1x1 projection.
class HeadBranch {
 public:
  HeadBranch() = default;
  HeadBranch(int in, int width, int out, double bias_init, nn::Rng& rng);
  ad::Tensor forward(const ad::Tensor& x, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::ConvBnAct conv1, conv2;
  nn::Conv2d proj;
};

struct LevelOutputs {
  ad::Tensor obj, cls, box, dopl;  // [N, 1 | C | 4 * reg_max | 2, H, W]
  int stride = 0;
};
using HeadOutputs = std::array<LevelOutputs, 3>;

class Heads {
 public:
  Heads() = default;
  Heads(const std::array<int, 3>& in_channels, const HeadConfig& cfg, nn::Rng& rng);
  HeadOutputs forward(const FeaturePyramid& fused, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  HeadConfig cfg;
  // branches[kind][level]
  std::array<std::array<HeadBranch, 3>, 4> branches;
};

// Per-frame head outputs in anchor-major layout:
//   obj[a], cls[a * C + c], box[(a * 4 + side) * reg_max + bin], dopl[a * 2 + k]
// with sides ordered (left, top, right, bottom) and a = row * width + col.
struct LevelPredictions {
  int height = 0, width = 0, stride = 0;
  std::vector<double> obj, cls, box, dopl;
  int num_anchors() const { return height * width; }
};

struct RawPredictions {
  int num_classes = 0;
  int reg_max = 0;
  std::array<LevelPredictions, 3> levels;

  int num_anchors() const;
  // Zero-valued predictions with the same layout.
  RawPredictions zeros_like() const;
};

struct Anchor {
  double cx = 0, cy = 0;  // grid-cell centre in input (range, azimuth) units
  int stride = 0;
  int level = 0;
  int local = 0;  // index within its level
};

// Anchors of all levels flattened in level order, row-major within a level.
std::vector<Anchor> make_anchors(const RawPredictions& preds);

RawPredictions extract_frame(const HeadOutputs& out, int frame, const HeadConfig& cfg);
// Adds per-frame gradients into tensor-shaped buffers ordered like
// prediction_tensors().
void scatter_frame_grads(const RawPredictions& grads, int frame, int batch,
                         std::vector<std::vector<double>>& buffers);
std::vector<ad::Tensor> prediction_tensors(const HeadOutputs& out);

class Detector {
 public:
  explicit Detector(const ModelConfig& cfg);

  HeadOutputs forward(const ad::Tensor& x, bool training);
  nn::ParamList params() const;
  std::int64_t num_params() const { return params().learnable_count(); }
  const ModelConfig& config() const { return cfg_; }

  Backbone backbone;
  Neck neck;
  Heads heads;

 private:
  ModelConfig cfg_;
};

// Cubes (already at the model's Doppler length) to the [N, D, A, R] input.
ad::Tensor cubes_to_input(const std::vector<const RadCube*>& cubes, double input_scale);

}  // namespace transrad
