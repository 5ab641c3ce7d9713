#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Tensors are row-major. Image tensors use the layout [N, C, H, W]. Every op
// records a backward closure on its result when gradient recording is enabled
// and at least one input requires a gradient; `Tensor::backward` replays the
// closures in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace transrad::ad {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const double> values() const { return node_->value; }
  // Direct mutation is reserved for leaves (parameter updates, buffers).
  std::span<double> values_mut() { return node_->value; }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;
  double at(std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

  void backward(double seed = 1.0) const;
  void backward(std::span<const double> seed) const;
  void zero_grad() const;

  // Copy of the values with no history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

enum class PadMode { kZero, kReplicate };

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
// sum_i x_i * w_i with a constant weight vector.
Tensor dot_const(const Tensor& x, std::span<const double> w);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int start, int count);
Tensor upsample_nearest2x(const Tensor& x);

// Batched matrix product: a [B, M, K] times b [B, K, N] (or b [B, N, K] when
// transpose_b) gives [B, M, N]. Rank-2 operands are treated as B = 1.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Attention weighting with a constant decay prior. scores is [B, T, S];
// decay holds `groups` matrices of shape [T, S]; batch b uses matrix
// (b / inner) % groups. With apply_softmax the rows of scores are softmaxed
// before the Hadamard product, otherwise scores are multiplied directly.
Tensor decay_attention(const Tensor& scores,
                       std::shared_ptr<const std::vector<double>> decay,
                       int groups, int inner, bool apply_softmax);

// Rotates consecutive feature pairs of x [T, d] by angle sign * t * theta[j]
// for row t and pair j.
Tensor rotate_pairs(const Tensor& x, std::span<const double> theta, double sign);

// Dense convolution. x [N, Ci, H, W], w [Co, Ci, k, k], bias [Co] or empty.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
// Depthwise convolution with stride 1. w [C, 1, k, k].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int pad, PadMode mode);

// Batch normalization over (N, H, W) per channel. In training mode the
// running statistics are updated in place.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::span<double> running_mean, std::span<double> running_var,
                  bool training, double momentum, double eps);
// Normalization over channels at every spatial position.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, double eps);

// Scalar node carrying an externally computed value whose gradient with
// respect to each input is supplied up front.
Tensor external_loss(const std::vector<Tensor>& inputs, double value,
                     std::vector<std::vector<double>> grads);

}  // namespace transrad::ad
