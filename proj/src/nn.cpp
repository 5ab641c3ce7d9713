#include "transrad/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace transrad::nn {

void ParamList::add(std::string name, Tensor t, bool learnable) {
  entries_.push_back({std::move(name), std::move(t), learnable});
}

std::vector<Tensor> ParamList::learnable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.learnable) out.push_back(e.tensor);
  }
  return out;
}

std::int64_t ParamList::learnable_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.learnable) n += e.tensor.size();
  }
  return n;
}

Tensor uniform_param(ad::Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor activate(const Tensor& x, Act act) {
  switch (act) {
    case Act::kGelu:
      return ad::gelu(x);
    case Act::kSilu:
      return ad::silu(x);
    case Act::kNone:
      break;
  }
  return x;
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, bool with_bias, Rng& rng)
    : stride(stride_), pad(kernel / 2) {
  const int fan_in = in * kernel * kernel;
  weight = uniform_param({out, in, kernel, kernel}, fan_in, rng);
  if (with_bias) bias = uniform_param({out}, fan_in, rng);
}

Tensor Conv2d::forward(const Tensor& x) const { return ad::conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".weight", weight);
  if (bias) out.add(prefix + ".bias", bias);
}

DwConv2d::DwConv2d(int channels, int kernel, ad::PadMode mode_, Rng& rng)
    : pad(kernel / 2), mode(mode_) {
  if (kernel % 2 == 0) throw std::invalid_argument("depthwise kernel must be odd-sized");
  weight = uniform_param({channels, 1, kernel, kernel}, kernel * kernel, rng);
  bias = uniform_param({channels}, kernel * kernel, rng);
}

Tensor DwConv2d::forward(const Tensor& x) const {
  return ad::depthwise_conv2d(x, weight, bias, pad, mode);
}

void DwConv2d::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

BatchNorm2d::BatchNorm2d(int channels)
    : weight(Tensor::full({channels}, 1.0, true)),
      bias(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return ad::batch_norm(x, weight, bias, running_mean.values_mut(), running_var.values_mut(),
                        training, momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
  out.add(prefix + ".running_mean", running_mean, false);
  out.add(prefix + ".running_var", running_var, false);
}

LayerNorm2d::LayerNorm2d(int channels)
    : weight(Tensor::full({channels}, 1.0, true)), bias(Tensor::zeros({channels}, true)) {}

Tensor LayerNorm2d::forward(const Tensor& x) const {
  return ad::layer_norm_channels(x, weight, bias, eps);
}

void LayerNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

ConvBnAct::ConvBnAct(int in, int out, int kernel, int stride, Act act_, Rng& rng)
    : conv(in, out, kernel, stride, false, rng), bn(out), act(act_) {}

Tensor ConvBnAct::forward(const Tensor& x, bool training) {
  return activate(bn.forward(conv.forward(x), training), act);
}

void ConvBnAct::collect(const std::string& prefix, ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

}  // namespace transrad::nn
