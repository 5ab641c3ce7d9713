#pragma once

// Parameterized building blocks on top of the autodiff engine. Every layer
// registers its tensors under hierarchical dotted names so that checkpoints,
// optimizers and parameter counting all see the same flat list.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "transrad/tensor.hpp"

namespace transrad::nn {

using ad::Tensor;
using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool learnable = true;  // false for buffers such as running statistics
};

class ParamList {
 public:
  void add(std::string name, Tensor t, bool learnable = true);
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> learnable() const;
  std::int64_t learnable_count() const;

 private:
  std::vector<NamedTensor> entries_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor uniform_param(ad::Shape shape, int fan_in, Rng& rng);

enum class Act { kNone, kGelu, kSilu };
Tensor activate(const Tensor& x, Act act);

struct Conv2d {
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, bool with_bias, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight, bias;
  int stride = 1;
  int pad = 0;
};

struct DwConv2d {
  DwConv2d() = default;
  DwConv2d(int channels, int kernel, ad::PadMode mode, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight, bias;
  int pad = 0;
  ad::PadMode mode = ad::PadMode::kZero;
};

struct BatchNorm2d {
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight, bias, running_mean, running_var;
  double momentum = 0.03;
  double eps = 1e-5;
};

struct LayerNorm2d {
  LayerNorm2d() = default;
  explicit LayerNorm2d(int channels);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor weight, bias;
  double eps = 1e-6;
};

// Convolution without bias, batch normalization, activation.
struct ConvBnAct {
  ConvBnAct() = default;
  ConvBnAct(int in, int out, int kernel, int stride, Act act, Rng& rng);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamList& out) const;

  Conv2d conv;
  BatchNorm2d bn;
  Act act = Act::kSilu;
};

}  // namespace transrad::nn
