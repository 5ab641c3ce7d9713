#pragma once

// Retention and Manhattan self-attention.
//
// Tokens of an H x W feature map are enumerated row-major: token n sits at
// column x_n = n % W and row y_n = n / W. Feature maps are [N, C, H, W].

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "transrad/nn.hpp"
#include "transrad/tensor.hpp"

namespace transrad {

enum class DecayForm { kTemporal, kBidirectional1d, kManhattan2d, kAxialH, kAxialW };

struct DecayMatrix {
  int n = 0;
  DecayForm form = DecayForm::kTemporal;
  double gamma = 1.0;
  std::vector<double> values;  // n x n, row-major

  double operator()(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
};

// gamma^(i-j) for i >= j, else 0.
DecayMatrix temporal_decay_matrix(int length, double gamma);
// gamma^|i-j|.
DecayMatrix bidirectional_decay_matrix(int length, double gamma);
// gamma^(|x_n - x_m| + |y_n - y_m|) over the row-major H x W token grid.
DecayMatrix spatial_decay_matrix(int height, int width, double gamma);
struct AxialDecay {
  DecayMatrix h;  // H x H over row indices
  DecayMatrix w;  // W x W over column indices
};
AxialDecay axial_decay_matrices(int height, int width, double gamma);

// --- 1-D retention ----------------------------------------------------------

struct RetentionParams {
  ad::Tensor w_q;  // [d_model, d_head]
  ad::Tensor w_k;  // [d_model, d_head]
  ad::Tensor w_v;  // [d_model, d_value]
  std::vector<double> theta;  // d_head / 2 rotation angles
  double gamma = 1.0;
};

// Parallel form (Q K^T ⊙ D) V with Q = rot(X W_Q, +n theta), K = rot(X W_K, +m theta)
// so that Q_n . K_m = Re(sum_j q_nj conj(k_mj) e^{i (n - m) theta_j}).
ad::Tensor retention_1d(const ad::Tensor& x, const RetentionParams& params);

// --- MaSA ---------------------------------------------------------------------

struct MasaConfig {
  int num_heads = 1;
  std::vector<double> gamma_per_head;
  int head_dim = 0;
  bool decomposed = false;
  int lce_kernel = 5;

  // gamma_i = 1 - 2^-(3 + i)
  static std::vector<double> default_gammas(int num_heads);
  void validate(int channels) const;
};

// Learnable tensors of one attention layer. Projections are 1x1 convolutions
// with weight [C, C, 1, 1] and bias [C]; the LCE branch is a depthwise
// convolution with replicate padding.
struct MasaWeights {
  MasaWeights() = default;
  MasaWeights(int channels, int lce_kernel, nn::Rng& rng);
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d q, k, v, out;
  nn::DwConv2d lce;
};

// Full MaSA: per head (Softmax(Q K^T / sqrt(d)) ⊙ D^{Bi,2d}) V, heads
// concatenated, then the output projection.
ad::Tensor masa_core(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);
// Decomposed MaSA: decayed attention along W within every row, then along H
// within every column, applied to the row result.
ad::Tensor masa_decomposed(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);
// Local context enhancement: depthwise convolution of V.
ad::Tensor lce(const ad::Tensor& v, const nn::DwConv2d& conv);
// MaSA(X) + LCE(V), with MaSA full or decomposed per cfg.decomposed.
ad::Tensor masa_out(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);

}  // namespace transrad
