#include "transrad/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "transrad/dual.hpp"
#include "transrad/errors.hpp"
#include "transrad/mathutil.hpp"

namespace transrad {

CiouParts<double> ciou_loss(const Box2D& pred, const Box2D& gt) { return ciou_parts(pred, gt); }

double center_loss(const Box2D& pred, const Box2D& gt) { return center_distance_sq(pred, gt); }

double dfl_decode(std::span<const double> probs) {
  double e = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) e += probs[i] * static_cast<double>(i);
  return e;
}

namespace {

struct BinSplit {
  int lo = 0;
  double w_lo = 1.0, w_hi = 0.0;
  bool clamped = false;
};

BinSplit split_target(double y, int bins) {
  if (bins < 2) throw std::invalid_argument("dfl: need at least two bins");
  BinSplit s;
  const double top = bins - 1;
  if (!(y >= 0.0)) {
    s.clamped = true;
    y = 0.0;
  } else if (y > top) {
    s.clamped = true;
    y = top;
  }
  s.lo = std::min(static_cast<int>(std::floor(y)), bins - 1);
  const double frac = y - s.lo;
  s.w_lo = 1.0 - frac;
  s.w_hi = frac;
  return s;
}

}  // namespace

double dfl_loss(std::span<const double> probs, double y) {
  const BinSplit s = split_target(y, static_cast<int>(probs.size()));
  double loss = -s.w_lo * std::log(probs[static_cast<std::size_t>(s.lo)]);
  if (s.w_hi > 0.0) loss -= s.w_hi * std::log(probs[static_cast<std::size_t>(s.lo + 1)]);
  return loss;
}

DflResult dfl_loss_logits(std::span<const double> logits, double y) {
  const int bins = static_cast<int>(logits.size());
  const BinSplit s = split_target(y, bins);
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lse = m + std::log(z);

  DflResult r;
  r.clamped = s.clamped;
  r.dlogits.resize(logits.size());
  for (int j = 0; j < bins; ++j) r.dlogits[j] = std::exp(logits[j] - lse);
  r.loss = -s.w_lo * (logits[s.lo] - lse);
  r.dlogits[s.lo] -= s.w_lo;
  if (s.w_hi > 0.0) {
    r.loss -= s.w_hi * (logits[s.lo + 1] - lse);
    r.dlogits[s.lo + 1] -= s.w_hi;
  }
  return r;
}

double focal_loss(double p, int y, const FocalConfig& cfg, double w) {
  const double pt = y == 1 ? p : 1.0 - p;
  const double at = y == 1 ? cfg.alpha : 1.0 - cfg.alpha;
  return at * std::pow(1.0 - pt, cfg.gamma) * w * -std::log(pt);
}

FocalResult focal_loss_logit(double x, int y, const FocalConfig& cfg, double w) {
  const double p = sigmoid(x);
  const double log_p = log_sigmoid(x), log_q = log_sigmoid(-x);
  const double g = cfg.gamma;
  FocalResult r;
  if (y == 1) {
    const double q = 1.0 - p;
    const double mod = std::pow(q, g);
    r.loss = cfg.alpha * w * mod * -log_p;
    r.dlogit = cfg.alpha * w * mod * (g * p * log_p - q);
  } else {
    const double mod = std::pow(p, g);
    r.loss = (1.0 - cfg.alpha) * w * mod * -log_q;
    r.dlogit = (1.0 - cfg.alpha) * w * mod * (p - g * (1.0 - p) * log_q);
  }
  return r;
}

double smooth_l1(double p, double y) {
  const double d = std::abs(p - y);
  return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

double smooth_l1_grad(double p, double y) {
  const double d = p - y;
  if (std::abs(d) < 1.0) return d;
  return d > 0.0 ? 1.0 : -1.0;
}

const char* loss_term_name(int term) {
  static const char* names[kNumLossTerms] = {"fl_obj",  "fl_cls",  "ciou_ra", "cent_ra", "dfl_ra",
                                             "ciou_rd", "cent_rd", "sl1_dopl", "iou_rad"};
  if (term < 0 || term >= kNumLossTerms) return "?";
  return names[term];
}

void LossWeights::validate() const {
  for (double a : alpha) {
    if (!(a >= 0.0)) throw ConfigError("loss weights must be >= 0");
  }
}

// ---------------------------------------------------------------------------

namespace {

using D6 = Dual<6>;

template <class T>
T smooth_l1_t(const T& p, double y) {
  const T d = p - y;
  const double ad = std::abs(value_of(d));
  if (ad < 1.0) return 0.5 * d * d;
  return (value_of(d) > 0.0 ? d : -d) - 0.5;
}

struct BoxTerms {
  D6 ciou_ra, cent_ra, ciou_rd, cent_rd, sl1, iou_rad;
};

// v[0..3]: DFL expectations (left, top, right, bottom) in stride units;
// v[4..5]: squashed Doppler outputs.
BoxTerms box_terms(const Anchor& an, const std::array<double, 6>& v, const Box3D& gt, int doppler_bins,
                   bool normalized_center) {
  std::array<D6, 6> x;
  for (int i = 0; i < 6; ++i) x[i] = D6::variable(v[i], i);
  const double s = an.stride;
  const D6 x1 = an.cx - x[0] * s, y1 = an.cy - x[1] * s, x2 = an.cx + x[2] * s, y2 = an.cy + x[3] * s;
  const D6 zlo = vmin(x[4], x[5]), zhi = vmax(x[4], x[5]);
  const double dbins = doppler_bins;
  const Box3T<D6> pred{x1, y1, zlo * dbins, x2, y2, zhi * dbins};
  const Box3T<D6> g{gt.x1, gt.y1, gt.z1, gt.x2, gt.y2, gt.z2};

  BoxTerms t;
  const auto ra = ciou_parts(pred.ra(), g.ra());
  t.ciou_ra = ra.loss;
  t.cent_ra = normalized_center ? ra.l_ncent : center_distance_sq(pred.ra(), g.ra());
  const auto rd = ciou_parts(pred.rd(), g.rd());
  t.ciou_rd = rd.loss;
  t.cent_rd = normalized_center ? rd.l_ncent : center_distance_sq(pred.rd(), g.rd());
  t.sl1 = 0.5 * (smooth_l1_t(zlo, gt.z1 / dbins) + smooth_l1_t(zhi, gt.z2 / dbins));
  t.iou_rad = 1.0 - iou_3d(pred, g);
  return t;
}

}  // namespace

LossBreakdown total_loss(const std::vector<RawPredictions>& preds, const std::vector<AssignmentResult>& assign,
                         const LossConfig& cfg, std::span<const double> class_weights, int doppler_bins,
                         std::vector<RawPredictions>* grads) {
  if (preds.size() != assign.size()) throw std::invalid_argument("total_loss: one assignment per frame");
  if (doppler_bins < 1) throw std::invalid_argument("total_loss: doppler_bins must be >= 1");
  cfg.weights.validate();
  LossBreakdown out;
  if (preds.empty()) return out;
  const int nc = preds.front().num_classes, rm = preds.front().reg_max;
  if (static_cast<int>(class_weights.size()) != nc) {
    throw std::invalid_argument("total_loss: need one class weight per class");
  }

  std::int64_t total_anchors = 0;
  int npos = 0;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    if (assign[f].num_anchors() != preds[f].num_anchors()) {
      throw std::invalid_argument("total_loss: assignment does not match predictions");
    }
    total_anchors += preds[f].num_anchors();
    npos += assign[f].num_positives();
  }
  out.num_positives = npos;
  const auto& al = cfg.weights.alpha;
  const double inv_anchors = 1.0 / static_cast<double>(total_anchors);
  const double inv_pos = npos > 0 ? 1.0 / npos : 0.0;

  if (grads) {
    grads->clear();
    for (const auto& p : preds) grads->push_back(p.zeros_like());
  }

  auto& comp = out.components;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    const RawPredictions& p = preds[f];
    const AssignmentResult& as = assign[f];
    RawPredictions* g = grads ? &(*grads)[f] : nullptr;
    int a = 0;
    for (int l = 0; l < 3; ++l) {
      const LevelPredictions& lv = p.levels[l];
      for (int i = 0; i < lv.num_anchors(); ++i, ++a) {
        const bool pos = as.positive(a);
        const int tcls = pos ? as.target_class(a) : -1;
        const auto ia = static_cast<std::size_t>(i);

        const FocalResult fo = focal_loss_logit(lv.obj[ia], pos ? 1 : 0, cfg.focal, 1.0);
        comp[kFlObj] += fo.loss * inv_anchors;
        if (g) g->levels[l].obj[ia] += al[kFlObj] * inv_anchors * fo.dlogit;
        for (int c = 0; c < nc; ++c) {
          const std::size_t k = ia * nc + c;
          const FocalResult fc = focal_loss_logit(lv.cls[k], c == tcls ? 1 : 0, cfg.focal, class_weights[c]);
          comp[kFlCls] += fc.loss * inv_anchors;
          if (g) g->levels[l].cls[k] += al[kFlCls] * inv_anchors * fc.dlogit;
        }
        if (!pos) continue;

        const Anchor an{(i % lv.width + 0.5) * lv.stride, (i / lv.width + 0.5) * lv.stride, lv.stride, l, i};
        const Box3D gt = as.target_box(a);
        const double t = as.t[static_cast<std::size_t>(a)];
        const std::array<double, 4> side_target{(an.cx - gt.x1) / an.stride, (an.cy - gt.y1) / an.stride,
                                                (gt.x2 - an.cx) / an.stride, (gt.y2 - an.cy) / an.stride};
        std::array<double, 6> v{};
        std::array<std::vector<double>, 4> probs;
        double dfl = 0.0;
        for (int s = 0; s < 4; ++s) {
          const auto logits = std::span(lv.box).subspan((ia * 4 + s) * rm, static_cast<std::size_t>(rm));
          probs[s] = softmax(logits);
          v[s] = dfl_decode(probs[s]);
          const DflResult d = dfl_loss_logits(logits, side_target[s]);
          out.dfl_clamped += d.clamped ? 1 : 0;
          dfl += 0.25 * d.loss;
          if (g) {
            const double k = al[kDflRa] * inv_pos * t * 0.25;
            for (int j = 0; j < rm; ++j) g->levels[l].box[(ia * 4 + s) * rm + j] += k * d.dlogits[j];
          }
        }
        const std::array<double, 2> sig{sigmoid(lv.dopl[ia * 2]), sigmoid(lv.dopl[ia * 2 + 1])};
        v[4] = sig[0];
        v[5] = sig[1];
        const BoxTerms bt = box_terms(an, v, gt, doppler_bins, cfg.normalized_center);

        comp[kCiouRa] += t * bt.ciou_ra.v * inv_pos;
        comp[kCentRa] += t * bt.cent_ra.v * inv_pos;
        comp[kDflRa] += t * dfl * inv_pos;
        comp[kCiouRd] += bt.ciou_rd.v * inv_pos;
        comp[kCentRd] += bt.cent_rd.v * inv_pos;
        comp[kSl1Dopl] += bt.sl1.v * inv_pos;
        comp[kIouRad] += bt.iou_rad.v * inv_pos;

        if (!g) continue;
        std::array<double, 6> dv{};
        for (int k = 0; k < 6; ++k) {
          dv[k] = inv_pos * (t * (al[kCiouRa] * bt.ciou_ra.d[k] + al[kCentRa] * bt.cent_ra.d[k]) +
                             al[kCiouRd] * bt.ciou_rd.d[k] + al[kCentRd] * bt.cent_rd.d[k] +
                             al[kSl1Dopl] * bt.sl1.d[k] + al[kIouRad] * bt.iou_rad.d[k]);
        }
        for (int s = 0; s < 4; ++s) {
          for (int j = 0; j < rm; ++j) {
            g->levels[l].box[(ia * 4 + s) * rm + j] += dv[s] * probs[s][j] * (j - v[s]);
          }
        }
        for (int k = 0; k < 2; ++k) g->levels[l].dopl[ia * 2 + k] += dv[4 + k] * sig[k] * (1.0 - sig[k]);
      }
    }
  }

  for (int k = 0; k < kNumLossTerms; ++k) out.total += al[k] * comp[k];
  return out;
}

}  // namespace transrad
