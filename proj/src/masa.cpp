#include "transrad/masa.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

#include "transrad/errors.hpp"

namespace transrad {

using ad::Tensor;

namespace {

void check_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("decay gamma must lie in (0, 1], got " + std::to_string(gamma));
  }
}

void check_length(int n, const char* what) {
  if (n < 1) throw std::invalid_argument(std::string(what) + " must be >= 1");
}

}  // namespace

DecayMatrix temporal_decay_matrix(int length, double gamma) {
  check_length(length, "length");
  check_gamma(gamma);
  DecayMatrix d{length, DecayForm::kTemporal, gamma, std::vector<double>(static_cast<std::size_t>(length) * length, 0.0)};
  for (int i = 0; i < length; ++i)
    for (int j = 0; j <= i; ++j) d.values[static_cast<std::size_t>(i) * length + j] = std::pow(gamma, i - j);
  return d;
}

DecayMatrix bidirectional_decay_matrix(int length, double gamma) {
  check_length(length, "length");
  check_gamma(gamma);
  DecayMatrix d{length, DecayForm::kBidirectional1d, gamma, std::vector<double>(static_cast<std::size_t>(length) * length)};
  for (int i = 0; i < length; ++i)
    for (int j = 0; j < length; ++j)
      d.values[static_cast<std::size_t>(i) * length + j] = std::pow(gamma, std::abs(i - j));
  return d;
}

DecayMatrix spatial_decay_matrix(int height, int width, double gamma) {
  check_length(height, "height");
  check_length(width, "width");
  check_gamma(gamma);
  const int n = height * width;
  DecayMatrix d{n, DecayForm::kManhattan2d, gamma, std::vector<double>(static_cast<std::size_t>(n) * n)};
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const int dist = std::abs(a % width - b % width) + std::abs(a / width - b / width);
      d.values[static_cast<std::size_t>(a) * n + b] = std::pow(gamma, dist);
    }
  }
  return d;
}

AxialDecay axial_decay_matrices(int height, int width, double gamma) {
  AxialDecay out{bidirectional_decay_matrix(height, gamma), bidirectional_decay_matrix(width, gamma)};
  out.h.form = DecayForm::kAxialH;
  out.w.form = DecayForm::kAxialW;
  return out;
}

// ---------------------------------------------------------------------------

Tensor retention_1d(const Tensor& x, const RetentionParams& p) {
  if (x.ndim() != 2 || x.dim(0) < 1) throw std::invalid_argument("retention_1d: x must be [T, d_model] with T >= 1");
  const int t = x.dim(0), d_model = x.dim(1);
  if (p.w_q.ndim() != 2 || p.w_k.ndim() != 2 || p.w_v.ndim() != 2 || p.w_q.dim(0) != d_model ||
      p.w_k.dim(0) != d_model || p.w_v.dim(0) != d_model || p.w_q.dim(1) != p.w_k.dim(1) ||
      static_cast<int>(p.theta.size()) * 2 != p.w_q.dim(1)) {
    throw std::invalid_argument("retention_1d: projection shapes are inconsistent");
  }
  auto decay = std::make_shared<const std::vector<double>>(temporal_decay_matrix(t, p.gamma).values);
  Tensor q = ad::rotate_pairs(ad::matmul(x, p.w_q), p.theta, 1.0);
  Tensor k = ad::rotate_pairs(ad::matmul(x, p.w_k), p.theta, 1.0);
  Tensor v = ad::matmul(x, p.w_v);
  Tensor scores = ad::reshape(ad::matmul(q, k, true), {1, t, t});
  Tensor weights = ad::decay_attention(scores, decay, 1, 1, false);
  Tensor out = ad::matmul(weights, ad::reshape(v, {1, t, v.dim(1)}));
  return ad::reshape(out, {t, v.dim(1)});
}

// ---------------------------------------------------------------------------

std::vector<double> MasaConfig::default_gammas(int num_heads) {
  std::vector<double> g(static_cast<std::size_t>(num_heads));
  for (int i = 0; i < num_heads; ++i) g[i] = 1.0 - std::ldexp(1.0, -(3 + i));
  return g;
}

void MasaConfig::validate(int channels) const {
  if (num_heads < 1) throw ConfigError("MaSA: num_heads must be >= 1");
  if (channels % num_heads != 0) {
    throw ConfigError("MaSA: channels " + std::to_string(channels) + " not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (head_dim != channels / num_heads) {
    throw ConfigError("MaSA: head_dim must equal channels / num_heads");
  }
  if (static_cast<int>(gamma_per_head.size()) != num_heads) {
    throw ConfigError("MaSA: need one gamma per head");
  }
  for (double g : gamma_per_head) {
    if (!(g > 0.0 && g <= 1.0)) throw ConfigError("MaSA: gamma must lie in (0, 1]");
  }
  if (lce_kernel < 1 || lce_kernel % 2 == 0) throw ConfigError("MaSA: LCE kernel must be odd");
}

MasaWeights::MasaWeights(int channels, int lce_kernel, nn::Rng& rng)
    : q(channels, channels, 1, 1, true, rng),
      k(channels, channels, 1, 1, true, rng),
      v(channels, channels, 1, 1, true, rng),
      out(channels, channels, 1, 1, true, rng),
      lce(channels, lce_kernel, ad::PadMode::kReplicate, rng) {}

void MasaWeights::collect(const std::string& prefix, nn::ParamList& list) const {
  q.collect(prefix + ".q", list);
  k.collect(prefix + ".k", list);
  v.collect(prefix + ".v", list);
  out.collect(prefix + ".out", list);
  lce.collect(prefix + ".lce", list);
}

namespace {

std::shared_ptr<const std::vector<double>> stacked_decay(const MasaConfig& cfg, int h, int w,
                                                         DecayForm form) {
  auto all = std::make_shared<std::vector<double>>();
  for (double g : cfg.gamma_per_head) {
    const DecayMatrix m = form == DecayForm::kManhattan2d ? spatial_decay_matrix(h, w, g)
                          : form == DecayForm::kAxialH    ? axial_decay_matrices(h, w, g).h
                                                          : axial_decay_matrices(h, w, g).w;
    all->insert(all->end(), m.values.begin(), m.values.end());
  }
  return all;
}

// Attention of already-projected q, k, v ([N, C, H, W]) without the output
// projection.
Tensor attend_full(const Tensor& q, const Tensor& k, const Tensor& v, const MasaConfig& cfg) {
  const int n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  const int heads = cfg.num_heads, hd = c / heads, hw = h * w;
  auto tokens = [&](const Tensor& t) {
    return ad::reshape(ad::permute(ad::reshape(t, {n, heads, hd, hw}), {0, 1, 3, 2}),
                       {n * heads, hw, hd});
  };
  Tensor scores = ad::scale(ad::matmul(tokens(q), tokens(k), true), 1.0 / std::sqrt(hd));
  Tensor attn = ad::decay_attention(scores, stacked_decay(cfg, h, w, DecayForm::kManhattan2d), heads, 1, true);
  Tensor o = ad::matmul(attn, tokens(v));
  return ad::reshape(ad::permute(ad::reshape(o, {n, heads, hw, hd}), {0, 1, 3, 2}), {n, c, h, w});
}

Tensor attend_decomposed(const Tensor& q, const Tensor& k, const Tensor& v, const MasaConfig& cfg) {
  const int n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  const int heads = cfg.num_heads, hd = c / heads;
  const double s = 1.0 / std::sqrt(hd);
  // Rows: [N, heads, hd, H, W] -> [N * heads * H, W, hd].
  auto rows = [&](const Tensor& t) {
    return ad::reshape(ad::permute(ad::reshape(t, {n, heads, hd, h, w}), {0, 1, 3, 4, 2}),
                       {n * heads * h, w, hd});
  };
  // Columns: [N, heads, hd, H, W] -> [N * heads * W, H, hd].
  auto cols = [&](const Tensor& t) {
    return ad::reshape(ad::permute(ad::reshape(t, {n, heads, hd, h, w}), {0, 1, 4, 3, 2}),
                       {n * heads * w, h, hd});
  };
  Tensor attn_w = ad::decay_attention(ad::scale(ad::matmul(rows(q), rows(k), true), s),
                                      stacked_decay(cfg, h, w, DecayForm::kAxialW), heads, h, true);
  Tensor vw = ad::matmul(attn_w, rows(v));  // [N * heads * H, W, hd]
  Tensor vw_cols = ad::reshape(ad::permute(ad::reshape(vw, {n, heads, h, w, hd}), {0, 1, 3, 2, 4}),
                               {n * heads * w, h, hd});
  Tensor attn_h = ad::decay_attention(ad::scale(ad::matmul(cols(q), cols(k), true), s),
                                      stacked_decay(cfg, h, w, DecayForm::kAxialH), heads, w, true);
  Tensor o = ad::matmul(attn_h, vw_cols);  // [N * heads * W, H, hd]
  return ad::reshape(ad::permute(ad::reshape(o, {n, heads, w, h, hd}), {0, 1, 4, 3, 2}), {n, c, h, w});
}

void check_input(const Tensor& x, const MasaConfig& cfg) {
  if (x.ndim() != 4) throw std::invalid_argument("MaSA: input must be [N, C, H, W]");
  cfg.validate(x.dim(1));
}

}  // namespace

Tensor masa_core(const Tensor& x, const MasaConfig& cfg, const MasaWeights& w) {
  check_input(x, cfg);
  if (cfg.decomposed) throw ConfigError("masa_core: config requests the decomposed form");
  return w.out.forward(attend_full(w.q.forward(x), w.k.forward(x), w.v.forward(x), cfg));
}

Tensor masa_decomposed(const Tensor& x, const MasaConfig& cfg, const MasaWeights& w) {
  check_input(x, cfg);
  if (!cfg.decomposed) throw ConfigError("masa_decomposed: config requests the full form");
  return w.out.forward(attend_decomposed(w.q.forward(x), w.k.forward(x), w.v.forward(x), cfg));
}

Tensor lce(const Tensor& v, const nn::DwConv2d& conv) {
  if (conv.weight.dim(2) % 2 == 0) throw ConfigError("LCE: kernel must be odd-sized");
  return conv.forward(v);
}

Tensor masa_out(const Tensor& x, const MasaConfig& cfg, const MasaWeights& w) {
  check_input(x, cfg);
  Tensor q = w.q.forward(x), k = w.k.forward(x), v = w.v.forward(x);
  Tensor attn = cfg.decomposed ? attend_decomposed(q, k, v, cfg) : attend_full(q, k, v, cfg);
  return ad::add(w.out.forward(attn), lce(v, w.lce));
}

}  // namespace transrad
