#pragma once

// Light retentive vision-transformer backbone: a four-convolution patch
// embedding stem followed by four stages of RMT blocks separated by stride-2
// patch-merging convolutions. The stages 1..3 outputs form the P3/P4/P5
// pyramid at strides 8/16/32.

#include <array>
#include <string>
#include <vector>

#include "transrad/masa.hpp"
#include "transrad/nn.hpp"

namespace transrad {

struct BackboneConfig {
  int input_channels = 256;  // Doppler bins used as channels
  std::array<int, 4> stage_dims{32, 64, 128, 256};
  std::array<int, 4> stage_blocks{2, 2, 8, 2};
  std::array<int, 4> stage_heads{1, 2, 4, 8};
  std::array<bool, 4> decomposed_stages{true, true, true, false};
  double ffn_expansion = 4.0;
  int lce_kernel = 5;
  int cpe_kernel = 3;

  void validate() const;
  MasaConfig masa_config(int stage) const;
};

struct FeaturePyramid {
  std::array<ad::Tensor, 3> maps;  // P3, P4, P5 as [N, C, H, W]
  std::array<int, 3> strides{8, 16, 32};
};

class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(int in_channels, int out_channels, nn::Rng& rng);
  ad::Tensor forward(const ad::Tensor& x, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  std::array<nn::ConvBnAct, 4> convs;
};

class RmtBlock {
 public:
  RmtBlock() = default;
  RmtBlock(int dim, const MasaConfig& masa, double ffn_expansion, int cpe_kernel, nn::Rng& rng);
  // x <- x + CPE(x); x <- x + MaSA_out(LN(x)); x <- x + FFN(LN(x))
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  MasaConfig masa_cfg;
  nn::DwConv2d cpe;
  nn::LayerNorm2d norm1, norm2;
  MasaWeights attn;
  nn::Conv2d fc1, fc2;
};

// Single stride-2 3x3 convolution changing the channel count.
class PatchMerge {
 public:
  PatchMerge() = default;
  PatchMerge(int in_channels, int out_channels, nn::Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d conv;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, nn::Rng& rng);
  // x is [N, input_channels, H, W] with H and W divisible by 32.
  FeaturePyramid forward(const ad::Tensor& x, bool training);
  void collect(const std::string& prefix, nn::ParamList& out) const;
  const BackboneConfig& config() const { return cfg_; }

  PatchEmbed stem;
  std::array<std::vector<RmtBlock>, 4> stages;
  std::array<PatchMerge, 3> merges;

 private:
  BackboneConfig cfg_;
};

}  // namespace transrad
