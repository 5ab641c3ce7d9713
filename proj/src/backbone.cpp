#include "transrad/backbone.hpp"

#include <cmath>

#include "transrad/errors.hpp"

namespace transrad {

using ad::Tensor;

void BackboneConfig::validate() const {
  if (input_channels < 1) throw ConfigError("backbone: input_channels must be >= 1");
  for (int i = 0; i < 4; ++i) {
    if (stage_dims[i] < 1 || stage_blocks[i] < 0 || stage_heads[i] < 1) {
      throw ConfigError("backbone: stage " + std::to_string(i) + " has a non-positive size");
    }
    if (stage_dims[i] % stage_heads[i] != 0) {
      throw ConfigError("backbone: stage " + std::to_string(i) + " dim not divisible by its heads");
    }
  }
  if (stage_dims[0] % 2 != 0) throw ConfigError("backbone: first stage dim must be even");
  if (!(ffn_expansion > 0.0)) throw ConfigError("backbone: ffn_expansion must be > 0");
  if (lce_kernel % 2 == 0 || cpe_kernel % 2 == 0) throw ConfigError("backbone: kernels must be odd");
}

MasaConfig BackboneConfig::masa_config(int stage) const {
  MasaConfig m;
  m.num_heads = stage_heads[stage];
  m.head_dim = stage_dims[stage] / stage_heads[stage];
  m.gamma_per_head = MasaConfig::default_gammas(m.num_heads);
  m.decomposed = decomposed_stages[stage];
  m.lce_kernel = lce_kernel;
  return m;
}

PatchEmbed::PatchEmbed(int in_channels, int out_channels, nn::Rng& rng) {
  const int mid = out_channels / 2;
  convs[0] = nn::ConvBnAct(in_channels, mid, 3, 2, nn::Act::kGelu, rng);
  convs[1] = nn::ConvBnAct(mid, mid, 3, 1, nn::Act::kGelu, rng);
  convs[2] = nn::ConvBnAct(mid, out_channels, 3, 2, nn::Act::kGelu, rng);
  convs[3] = nn::ConvBnAct(out_channels, out_channels, 3, 1, nn::Act::kGelu, rng);
}

Tensor PatchEmbed::forward(const Tensor& x, bool training) {
  if (x.ndim() != 4 || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
    throw ConfigError("patch_embed: spatial dims must be divisible by 4, got " + ad::shape_str(x.shape()));
  }
  Tensor y = x;
  for (auto& c : convs) y = c.forward(y, training);
  return y;
}

void PatchEmbed::collect(const std::string& prefix, nn::ParamList& out) const {
  for (int i = 0; i < 4; ++i) convs[i].collect(prefix + ".conv" + std::to_string(i), out);
}

RmtBlock::RmtBlock(int dim, const MasaConfig& masa, double ffn_expansion, int cpe_kernel, nn::Rng& rng)
    : masa_cfg(masa),
      cpe(dim, cpe_kernel, ad::PadMode::kZero, rng),
      norm1(dim),
      norm2(dim),
      attn(dim, masa.lce_kernel, rng) {
  masa_cfg.validate(dim);
  const int hidden = static_cast<int>(std::lround(dim * ffn_expansion));
  fc1 = nn::Conv2d(dim, hidden, 1, 1, true, rng);
  fc2 = nn::Conv2d(hidden, dim, 1, 1, true, rng);
}

Tensor RmtBlock::forward(const Tensor& x_in) const {
  Tensor x = ad::add(x_in, cpe.forward(x_in));
  x = ad::add(x, masa_out(norm1.forward(x), masa_cfg, attn));
  Tensor h = fc2.forward(ad::gelu(fc1.forward(norm2.forward(x))));
  return ad::add(x, h);
}

void RmtBlock::collect(const std::string& prefix, nn::ParamList& out) const {
  cpe.collect(prefix + ".cpe", out);
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  fc1.collect(prefix + ".ffn.fc1", out);
  fc2.collect(prefix + ".ffn.fc2", out);
}

PatchMerge::PatchMerge(int in_channels, int out_channels, nn::Rng& rng)
    : conv(in_channels, out_channels, 3, 2, true, rng) {}

Tensor PatchMerge::forward(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ConfigError("patch_merge: spatial dims must be even, got " + ad::shape_str(x.shape()));
  }
  return conv.forward(x);
}

void PatchMerge::collect(const std::string& prefix, nn::ParamList& out) const {
  conv.collect(prefix, out);
}

Backbone::Backbone(const BackboneConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem = PatchEmbed(cfg.input_channels, cfg.stage_dims[0], rng);
  for (int s = 0; s < 4; ++s) {
    const MasaConfig masa = cfg.masa_config(s);
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      stages[s].emplace_back(cfg.stage_dims[s], masa, cfg.ffn_expansion, cfg.cpe_kernel, rng);
    }
    if (s < 3) merges[s] = PatchMerge(cfg.stage_dims[s], cfg.stage_dims[s + 1], rng);
  }
}

FeaturePyramid Backbone::forward(const Tensor& x, bool training) {
  if (x.ndim() != 4 || x.dim(1) != cfg_.input_channels) {
    throw ConfigError("backbone: expected [N, " + std::to_string(cfg_.input_channels) +
                      ", H, W], got " + ad::shape_str(x.shape()));
  }
  if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0) {
    throw ConfigError("backbone: spatial dims must be divisible by 32, got " + ad::shape_str(x.shape()));
  }
  FeaturePyramid pyr;
  Tensor y = stem.forward(x, training);
  for (int s = 0; s < 4; ++s) {
    for (const auto& blk : stages[s]) y = blk.forward(y);
    if (s >= 1) pyr.maps[s - 1] = y;
    if (s < 3) y = merges[s].forward(y);
  }
  return pyr;
}

void Backbone::collect(const std::string& prefix, nn::ParamList& out) const {
  const std::string p = prefix.empty() ? "" : prefix + ".";
  stem.collect(p + "stem", out);
  for (int s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect(p + "stage" + std::to_string(s) + ".block" + std::to_string(b), out);
    }
    if (s < 3) merges[s].collect(p + "stage" + std::to_string(s) + ".merge", out);
  }
}

}  // namespace transrad
