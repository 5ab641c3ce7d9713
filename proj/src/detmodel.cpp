#include "transrad/detmodel.hpp"

#include <cmath>

#include "transrad/errors.hpp"

namespace transrad {

using ad::Tensor;

void ModelConfig::validate() const {
  backbone.validate();
  for (int c : neck.out_channels) {
    if (c < 2 || c % 2 != 0) throw ConfigError("neck: out_channels must be even and >= 2");
  }
  if (neck.c2f_depth < 0) throw ConfigError("neck: c2f_depth must be >= 0");
  if (head.num_classes < 1) throw ConfigError("head: num_classes must be >= 1");
  if (head.reg_max < 2) throw ConfigError("head: reg_max must be >= 2");
  if (head.width < 1) throw ConfigError("head: width must be >= 1");
  if (!(head.prior > 0.0 && head.prior < 1.0)) throw ConfigError("head: prior must lie in (0, 1)");
  if (!(head.dfl_init_slope >= 0.0)) throw ConfigError("head: dfl_init_slope must be >= 0");
  if (input_height < 32 || input_width < 32 || input_height % 32 != 0 || input_width % 32 != 0) {
    throw ConfigError("model: input size must be a positive multiple of 32");
  }
  if (!(input_scale > 0.0)) throw ConfigError("model: input_scale must be > 0");
}

ModelConfig ModelConfig::desk() {
  ModelConfig m;
  m.backbone.input_channels = 16;
  m.backbone.stage_dims = {16, 32, 64, 128};
  m.backbone.stage_blocks = {1, 1, 1, 1};
  m.backbone.stage_heads = {1, 1, 2, 4};
  m.backbone.ffn_expansion = 2.0;
  m.neck.out_channels = {32, 64, 128};
  m.head.width = 32;
  m.input_height = 64;
  m.input_width = 64;
  return m;
}

// ---------------------------------------------------------------------------

C2f::C2f(int in, int out, int depth, nn::Rng& rng) : hidden(out / 2) {
  cv1 = nn::ConvBnAct(in, 2 * hidden, 1, 1, nn::Act::kSilu, rng);
  for (int i = 0; i < depth; ++i) {
    bottlenecks.push_back({nn::ConvBnAct(hidden, hidden, 3, 1, nn::Act::kSilu, rng),
                           nn::ConvBnAct(hidden, hidden, 3, 1, nn::Act::kSilu, rng)});
  }
  cv2 = nn::ConvBnAct((2 + depth) * hidden, out, 1, 1, nn::Act::kSilu, rng);
}

Tensor C2f::forward(const Tensor& x, bool training) {
  Tensor y = cv1.forward(x, training);
  std::vector<Tensor> parts{ad::slice_channels(y, 0, hidden), ad::slice_channels(y, hidden, hidden)};
  for (auto& b : bottlenecks) {
    parts.push_back(b[1].forward(b[0].forward(parts.back(), training), training));
  }
  return cv2.forward(ad::concat_channels(parts), training);
}

void C2f::collect(const std::string& prefix, nn::ParamList& out) const {
  cv1.collect(prefix + ".cv1", out);
  for (std::size_t i = 0; i < bottlenecks.size(); ++i) {
    bottlenecks[i][0].collect(prefix + ".m" + std::to_string(i) + ".cv1", out);
    bottlenecks[i][1].collect(prefix + ".m" + std::to_string(i) + ".cv2", out);
  }
  cv2.collect(prefix + ".cv2", out);
}

Neck::Neck(const std::array<int, 3>& in, const NeckConfig& cfg, nn::Rng& rng) : in_channels(in) {
  const auto& oc = cfg.out_channels;
  n5 = C2f(in[2], oc[2], cfg.c2f_depth, rng);
  n4 = C2f(in[1] + oc[2], oc[1], cfg.c2f_depth, rng);
  n3 = C2f(in[0] + oc[1], oc[0], cfg.c2f_depth, rng);
}

FeaturePyramid Neck::forward(const FeaturePyramid& pyr, bool training) {
  for (int l = 0; l < 3; ++l) {
    if (!pyr.maps[l] || pyr.maps[l].ndim() != 4 || pyr.maps[l].dim(1) != in_channels[l]) {
      throw ConfigError("neck: level " + std::to_string(l) + " expects " + std::to_string(in_channels[l]) +
                        " channels");
    }
  }
  const auto& p = pyr.maps;
  if (p[1].dim(2) != 2 * p[2].dim(2) || p[1].dim(3) != 2 * p[2].dim(3) || p[0].dim(2) != 2 * p[1].dim(2) ||
      p[0].dim(3) != 2 * p[1].dim(3)) {
    throw ConfigError("neck: pyramid levels must differ by a factor of 2");
  }
  FeaturePyramid out;
  out.strides = pyr.strides;
  out.maps[2] = n5.forward(p[2], training);
  out.maps[1] = n4.forward(ad::concat_channels({p[1], ad::upsample_nearest2x(out.maps[2])}), training);
  out.maps[0] = n3.forward(ad::concat_channels({p[0], ad::upsample_nearest2x(out.maps[1])}), training);
  return out;
}

void Neck::collect(const std::string& prefix, nn::ParamList& out) const {
  n3.collect(prefix + ".n3", out);
  n4.collect(prefix + ".n4", out);
  n5.collect(prefix + ".n5", out);
}

// ---------------------------------------------------------------------------

const char* head_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::kObj:
      return "obj";
    case HeadKind::kCls:
      return "cls";
    case HeadKind::kBox:
      return "box";
    case HeadKind::kDopl:
      return "dopl";
  }
  return "?";
}

HeadBranch::HeadBranch(int in, int width, int out, double bias_init, nn::Rng& rng)
    : conv1(in, width, 3, 1, nn::Act::kSilu, rng),
      conv2(width, width, 3, 1, nn::Act::kSilu, rng),
      proj(width, out, 1, 1, true, rng) {
  for (double& b : proj.bias.values_mut()) b = bias_init;
}

Tensor HeadBranch::forward(const Tensor& x, bool training) {
  return proj.forward(conv2.forward(conv1.forward(x, training), training));
}

void HeadBranch::collect(const std::string& prefix, nn::ParamList& out) const {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
  proj.collect(prefix + ".proj", out);
}

Heads::Heads(const std::array<int, 3>& in, const HeadConfig& c, nn::Rng& rng) : cfg(c) {
  const double logit_prior = std::log(cfg.prior / (1.0 - cfg.prior));
  const std::array<int, 4> outs{1, cfg.num_classes, 4 * cfg.reg_max, 2};
  const std::array<double, 4> bias{logit_prior, logit_prior, 1.0, 0.0};
  for (int k = 0; k < 4; ++k)
    for (int l = 0; l < 3; ++l) branches[k][l] = HeadBranch(in[l], cfg.width, outs[k], bias[k], rng);
  // Bin logits fall off linearly so the initial distances are short.
  for (auto& b : branches[static_cast<int>(HeadKind::kBox)]) {
    auto v = b.proj.bias.values_mut();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - cfg.dfl_init_slope * static_cast<double>(i % cfg.reg_max);
  }
}

HeadOutputs Heads::forward(const FeaturePyramid& fused, bool training) {
  HeadOutputs out;
  for (int l = 0; l < 3; ++l) {
    const Tensor& x = fused.maps[l];
    out[l].obj = branches[0][l].forward(x, training);
    out[l].cls = branches[1][l].forward(x, training);
    out[l].box = branches[2][l].forward(x, training);
    out[l].dopl = branches[3][l].forward(x, training);
    out[l].stride = fused.strides[l];
  }
  return out;
}

void Heads::collect(const std::string& prefix, nn::ParamList& out) const {
  for (int k = 0; k < 4; ++k)
    for (int l = 0; l < 3; ++l)
      branches[k][l].collect(prefix + "." + head_name(static_cast<HeadKind>(k)) + ".p" + std::to_string(l + 3),
                             out);
}

// ---------------------------------------------------------------------------

int RawPredictions::num_anchors() const {
  int n = 0;
  for (const auto& l : levels) n += l.num_anchors();
  return n;
}

RawPredictions RawPredictions::zeros_like() const {
  RawPredictions z = *this;
  for (auto& l : z.levels) {
    std::fill(l.obj.begin(), l.obj.end(), 0.0);
    std::fill(l.cls.begin(), l.cls.end(), 0.0);
    std::fill(l.box.begin(), l.box.end(), 0.0);
    std::fill(l.dopl.begin(), l.dopl.end(), 0.0);
  }
  return z;
}

std::vector<Anchor> make_anchors(const RawPredictions& preds) {
  std::vector<Anchor> out;
  out.reserve(static_cast<std::size_t>(preds.num_anchors()));
  for (int l = 0; l < 3; ++l) {
    const auto& lv = preds.levels[l];
    for (int h = 0; h < lv.height; ++h) {
      for (int w = 0; w < lv.width; ++w) {
        out.push_back({(w + 0.5) * lv.stride, (h + 0.5) * lv.stride, lv.stride, l, h * lv.width + w});
      }
    }
  }
  return out;
}

namespace {

// Copies channel-planar values of frame n into anchor-major order.
void gather(const Tensor& t, int n, std::vector<double>& dst) {
  const int ch = t.dim(1), hw = t.dim(2) * t.dim(3);
  dst.assign(static_cast<std::size_t>(ch) * hw, 0.0);
  const auto v = t.values();
  const std::size_t base = static_cast<std::size_t>(n) * ch * hw;
  for (int c = 0; c < ch; ++c)
    for (int a = 0; a < hw; ++a) dst[static_cast<std::size_t>(a) * ch + c] = v[base + static_cast<std::size_t>(c) * hw + a];
}

void scatter(const std::vector<double>& src, int n, int ch, int hw, std::vector<double>& dst) {
  const std::size_t base = static_cast<std::size_t>(n) * ch * hw;
  for (int c = 0; c < ch; ++c)
    for (int a = 0; a < hw; ++a) dst[base + static_cast<std::size_t>(c) * hw + a] += src[static_cast<std::size_t>(a) * ch + c];
}

}  // namespace

RawPredictions extract_frame(const HeadOutputs& out, int frame, const HeadConfig& cfg) {
  RawPredictions p;
  p.num_classes = cfg.num_classes;
  p.reg_max = cfg.reg_max;
  for (int l = 0; l < 3; ++l) {
    auto& lv = p.levels[l];
    lv.height = out[l].obj.dim(2);
    lv.width = out[l].obj.dim(3);
    lv.stride = out[l].stride;
    gather(out[l].obj, frame, lv.obj);
    gather(out[l].cls, frame, lv.cls);
    gather(out[l].box, frame, lv.box);
    gather(out[l].dopl, frame, lv.dopl);
  }
  return p;
}

std::vector<Tensor> prediction_tensors(const HeadOutputs& out) {
  std::vector<Tensor> t;
  for (const auto& l : out) {
    t.push_back(l.obj);
    t.push_back(l.cls);
    t.push_back(l.box);
    t.push_back(l.dopl);
  }
  return t;
}

void scatter_frame_grads(const RawPredictions& g, int frame, int batch, std::vector<std::vector<double>>& buffers) {
  buffers.resize(12);
  for (int l = 0; l < 3; ++l) {
    const auto& lv = g.levels[l];
    const int hw = lv.num_anchors();
    const std::array<const std::vector<double>*, 4> src{&lv.obj, &lv.cls, &lv.box, &lv.dopl};
    const std::array<int, 4> ch{1, g.num_classes, 4 * g.reg_max, 2};
    for (int k = 0; k < 4; ++k) {
      auto& buf = buffers[static_cast<std::size_t>(l * 4 + k)];
      if (buf.empty()) buf.assign(static_cast<std::size_t>(batch) * ch[k] * hw, 0.0);
      scatter(*src[k], frame, ch[k], hw, buf);
    }
  }
}

// ---------------------------------------------------------------------------

Detector::Detector(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  nn::Rng rng(cfg.seed);
  backbone = Backbone(cfg.backbone, rng);
  const auto& d = cfg.backbone.stage_dims;
  neck = Neck({d[1], d[2], d[3]}, cfg.neck, rng);
  heads = Heads(cfg.neck.out_channels, cfg.head, rng);
}

HeadOutputs Detector::forward(const Tensor& x, bool training) {
  return heads.forward(neck.forward(backbone.forward(x, training), training), training);
}

nn::ParamList Detector::params() const {
  nn::ParamList list;
  backbone.collect("", list);
  neck.collect("neck", list);
  heads.collect("head", list);
  return list;
}

Tensor cubes_to_input(const std::vector<const RadCube*>& cubes, double input_scale) {
  if (cubes.empty()) throw DataError("no cubes to batch");
  const CubeShape s = cubes.front()->shape();
  const int n = static_cast<int>(cubes.size());
  std::vector<double> v(static_cast<std::size_t>(n) * s.doppler * s.azimuth * s.range);
  const double inv = 1.0 / input_scale;
  std::size_t o = 0;
  for (const RadCube* c : cubes) {
    if (!(c->shape() == s)) throw DataError("cubes in one batch must share a shape");
    for (int d = 0; d < s.doppler; ++d)
      for (int a = 0; a < s.azimuth; ++a)
        for (int r = 0; r < s.range; ++r) v[o++] = c->at(r, a, d) * inv;
  }
  return Tensor({n, s.doppler, s.azimuth, s.range}, std::move(v));
}

}  // namespace transrad
