#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>

namespace transrad::oracle {

namespace {

double overlap(double a1, double a2, double b1, double b2) {
  const double lo = a1 > b1 ? a1 : b1;
  const double hi = a2 < b2 ? a2 : b2;
  return hi > lo ? hi - lo : 0.0;
}

double len(double a, double b) { return b > a ? b - a : 0.0; }

double box_iou(const Box3D& a, const Box3D& b, EvalMode mode) {
  switch (mode) {
    case EvalMode::k3d:
      return iou3(a, b);
    case EvalMode::kRa:
      return iou2(a.ra(), b.ra());
    case EvalMode::kRd:
      return iou2(a.rd(), b.rd());
  }
  return 0.0;
}

}  // namespace

double iou3(const Box3D& a, const Box3D& b) {
  const double inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2) *
                       overlap(a.z1, a.z2, b.z1, b.z2);
  const double va = len(a.x1, a.x2) * len(a.y1, a.y2) * len(a.z1, a.z2);
  const double vb = len(b.x1, b.x2) * len(b.y1, b.y2) * len(b.z1, b.z2);
  const double u = va + vb - inter;
  return u > 0 ? inter / u : 0.0;
}

double iou2(const Box2D& a, const Box2D& b) {
  const double inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
  const double u = len(a.x1, a.x2) * len(a.y1, a.y2) + len(b.x1, b.x2) * len(b.y1, b.y2) - inter;
  return u > 0 ? inter / u : 0.0;
}

std::vector<Detection> la_nms_literal(const std::vector<Detection>& input, double thr) {
  std::vector<std::size_t> idx(input.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return input[a].class_score > input[b].class_score; });
  std::vector<Detection> bbox;
  for (auto i : idx) bbox.push_back(input[i]);

  std::vector<Detection> selected;
  while (!bbox.empty()) {
    const Detection current = bbox[0];
    selected.push_back(current);
    bbox.erase(bbox.begin());
    std::vector<double> ious;
    for (const auto& box : bbox) ious.push_back(iou3(current.box, box.box));
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < bbox.size(); ++i) {
      if (ious[i] <= thr || bbox[i].class_id == current.class_id) keep.push_back(i);
    }
    std::vector<Detection> next;
    for (auto i : keep) next.push_back(bbox[i]);
    bbox = std::move(next);
  }
  return selected;
}

double ap_bruteforce(const std::vector<bool>& tp, int num_gt) {
  if (num_gt <= 0) return 0.0;
  const int n = static_cast<int>(tp.size());
  double ap = 0.0;
  int seen = 0;
  for (int k = 0; k < n; ++k) {
    if (!tp[k]) continue;
    ++seen;
    double best = 0.0;
    int cum = seen;
    for (int j = k; j < n; ++j) {
      if (j > k && tp[j]) ++cum;
      best = std::max(best, static_cast<double>(cum) / (j + 1));
    }
    ap += best / num_gt;
  }
  return ap;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation3D>>& gts,
                    int num_classes, const std::vector<double>& thresholds, EvalMode mode) {
  EvalResult r;
  for (double thr : thresholds) {
    std::vector<double> row(num_classes, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < num_classes; ++c) {
      int num_gt = 0, num_det = 0;
      for (const auto& f : gts)
        for (const auto& g : f) num_gt += g.class_id == c;
      struct Item {
        double score;
        std::size_t frame;
        Box3D box;
      };
      std::vector<Item> items;
      for (std::size_t f = 0; f < dets.size(); ++f)
        for (const auto& d : dets[f])
          if (d.class_id == c) items.push_back({d.class_score, f, d.box});
      num_det = static_cast<int>(items.size());
      if (num_gt == 0 && num_det == 0) continue;
      std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

      std::vector<std::vector<char>> taken(gts.size());
      for (std::size_t f = 0; f < gts.size(); ++f) taken[f].assign(gts[f].size(), 0);
      std::vector<bool> tp;
      for (const auto& it : items) {
        double best = -1.0;
        int arg = -1;
        for (std::size_t g = 0; g < gts[it.frame].size(); ++g) {
          const auto& gt = gts[it.frame][g];
          if (gt.class_id != c || taken[it.frame][g]) continue;
          const double v = box_iou(it.box, gt.box(), mode);
          if (v > best) best = v, arg = static_cast<int>(g);
        }
        const bool hit = arg >= 0 && best >= thr;
        if (hit) taken[it.frame][static_cast<std::size_t>(arg)] = 1;
        tp.push_back(hit);
      }
      row[c] = ap_bruteforce(tp, num_gt);
      sum += row[c];
      ++used;
    }
    r.ap.push_back(row);
    r.map_at.push_back(used ? sum / used : 0.0);
  }
  double total = 0.0;
  for (double m : r.map_at) total += m;
  r.map = r.map_at.empty() ? 0.0 : total / r.map_at.size();
  return r;
}

std::vector<double> depthwise_replicate(const ad::Tensor& x, const ad::Tensor& weight, const ad::Tensor& bias) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = weight.dim(2), p = k / 2;
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  auto xv = x.values();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double s = bias ? bias.at(ch) : 0.0;
          for (int di = 0; di < k; ++di)
            for (int dj = 0; dj < k; ++dj) {
              const int ii = std::clamp(i + di - p, 0, h - 1), jj = std::clamp(j + dj - p, 0, w - 1);
              s += weight.at((ch * k + di) * k + dj) * xv[((b * c + ch) * h + ii) * w + jj];
            }
          out[((b * c + ch) * h + i) * w + j] = s;
        }
  return out;
}

std::vector<double> pointwise(const std::vector<double>& x, int channels, int tokens, const nn::Conv2d& conv) {
  const int co = conv.weight.dim(0);
  std::vector<double> y(static_cast<std::size_t>(co) * tokens);
  for (int o = 0; o < co; ++o)
    for (int t = 0; t < tokens; ++t) {
      double s = conv.bias ? conv.bias.at(o) : 0.0;
      for (int i = 0; i < channels; ++i) s += conv.weight.at(o * channels + i) * x[i * tokens + t];
      y[o * tokens + t] = s;
    }
  return y;
}

namespace {

struct Projected {
  int c, h, w, heads, hd;
  std::vector<double> q, k, v;  // [C, H*W]
};

Projected project(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& wt) {
  Projected p;
  p.c = x.dim(1), p.h = x.dim(2), p.w = x.dim(3), p.heads = cfg.num_heads, p.hd = p.c / p.heads;
  std::vector<double> xs(x.values().begin(), x.values().end());
  const int t = p.h * p.w;
  p.q = pointwise(xs, p.c, t, wt.q);
  p.k = pointwise(xs, p.c, t, wt.k);
  p.v = pointwise(xs, p.c, t, wt.v);
  return p;
}

// Softmax over the candidate set `keys` of query token n, then decay and sum.
// decay(n, m) and the key set are supplied by the caller.
template <class KeyFn, class DecayFn>
void attend_token(const Projected& p, int head, int n, int count, KeyFn key, DecayFn decay,
                  const std::vector<double>& values, std::vector<double>& out_row) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.hd));
  const int t = p.h * p.w;
  std::vector<double> s(count);
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < count; ++i) {
    const int m = key(i);
    double dot = 0.0;
    for (int d = 0; d < p.hd; ++d) dot += p.q[(head * p.hd + d) * t + n] * p.k[(head * p.hd + d) * t + m];
    s[i] = dot * scale;
    mx = std::max(mx, s[i]);
  }
  double z = 0.0;
  for (double& e : s) z += (e = std::exp(e - mx));
  for (int d = 0; d < p.hd; ++d) {
    double acc = 0.0;
    for (int i = 0; i < count; ++i) acc += s[i] / z * decay(i) * values[(head * p.hd + d) * t + key(i)];
    out_row[d] = acc;
  }
}

std::vector<double> finish(const Projected& p, const std::vector<double>& attn, const MasaWeights& wt) {
  return pointwise(attn, p.c, p.h * p.w, wt.out);
}

}  // namespace

std::vector<double> masa_pairwise(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& wt) {
  const Projected p = project(x, cfg, wt);
  const int t = p.h * p.w;
  std::vector<double> attn(static_cast<std::size_t>(p.c) * t), row(p.hd);
  for (int head = 0; head < p.heads; ++head) {
    const double g = cfg.gamma_per_head[head];
    for (int n = 0; n < t; ++n) {
      attend_token(
          p, head, n, t, [](int i) { return i; },
          [&](int m) { return std::pow(g, std::abs(n % p.w - m % p.w) + std::abs(n / p.w - m / p.w)); }, p.v, row);
      for (int d = 0; d < p.hd; ++d) attn[(head * p.hd + d) * t + n] = row[d];
    }
  }
  return finish(p, attn, wt);
}

std::vector<double> masa_axial(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& wt) {
  const Projected p = project(x, cfg, wt);
  const int t = p.h * p.w;
  std::vector<double> mid(static_cast<std::size_t>(p.c) * t), out(static_cast<std::size_t>(p.c) * t), row(p.hd);
  for (int head = 0; head < p.heads; ++head) {
    const double g = cfg.gamma_per_head[head];
    // Along W inside each row.
    for (int n = 0; n < t; ++n) {
      const int y = n / p.w, x0 = n % p.w;
      attend_token(
          p, head, n, p.w, [&](int i) { return y * p.w + i; }, [&](int i) { return std::pow(g, std::abs(x0 - i)); },
          p.v, row);
      for (int d = 0; d < p.hd; ++d) mid[(head * p.hd + d) * t + n] = row[d];
    }
    // Along H inside each column, applied to the row result.
    for (int n = 0; n < t; ++n) {
      const int y0 = n / p.w, x = n % p.w;
      attend_token(
          p, head, n, p.h, [&](int i) { return i * p.w + x; }, [&](int i) { return std::pow(g, std::abs(y0 - i)); },
          mid, row);
      for (int d = 0; d < p.hd; ++d) out[(head * p.hd + d) * t + n] = row[d];
    }
  }
  return finish(p, out, wt);
}

std::vector<double> softmax_attention(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& wt) {
  const Projected p = project(x, cfg, wt);
  const int t = p.h * p.w;
  std::vector<double> attn(static_cast<std::size_t>(p.c) * t), row(p.hd);
  for (int head = 0; head < p.heads; ++head)
    for (int n = 0; n < t; ++n) {
      attend_token(p, head, n, t, [](int i) { return i; }, [](int) { return 1.0; }, p.v, row);
      for (int d = 0; d < p.hd; ++d) attn[(head * p.hd + d) * t + n] = row[d];
    }
  return finish(p, attn, wt);
}

std::vector<double> retention_summation(const ad::Tensor& x, const RetentionParams& p) {
  const int t = x.dim(0), dm = x.dim(1), dk = p.w_q.dim(1), dv = p.w_v.dim(1);
  auto proj = [&](const ad::Tensor& w, int cols) {
    std::vector<double> y(static_cast<std::size_t>(t) * cols, 0.0);
    for (int n = 0; n < t; ++n)
      for (int j = 0; j < cols; ++j)
        for (int i = 0; i < dm; ++i) y[n * cols + j] += x.at(n * dm + i) * w.at(i * cols + j);
    return y;
  };
  const auto q = proj(p.w_q, dk), k = proj(p.w_k, dk), v = proj(p.w_v, dv);
  using C = std::complex<double>;
  std::vector<double> out(static_cast<std::size_t>(t) * dv, 0.0);
  for (int n = 0; n < t; ++n) {
    for (int m = 0; m <= n; ++m) {
      C s = 0.0;
      for (int j = 0; j < dk / 2; ++j) {
        const C qn = C(q[n * dk + 2 * j], q[n * dk + 2 * j + 1]) * std::polar(1.0, n * p.theta[j]);
        const C km = C(k[m * dk + 2 * j], k[m * dk + 2 * j + 1]) * std::polar(1.0, m * p.theta[j]);
        s += qn * std::conj(km);
      }
      const double wgt = std::pow(p.gamma, n - m) * s.real();
      for (int j = 0; j < dv; ++j) out[n * dv + j] += wgt * v[m * dv + j];
    }
  }
  return out;
}

Assignment tal(const CandidateSet& cand, const std::vector<Annotation3D>& gts, const AssignConfig& cfg) {
  const int n = static_cast<int>(cand.anchors.size());
  std::vector<std::vector<int>> chosen(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box2D b = gts[g].ra_box();
    std::vector<std::pair<double, int>> list;
    for (int a = 0; a < n; ++a) {
      const auto& an = cand.anchors[a];
      if (an.cx <= b.x1 || an.cx >= b.x2 || an.cy <= b.y1 || an.cy >= b.y2) continue;
      const double c = cand.cls_prob[static_cast<std::size_t>(a) * cand.num_classes + gts[g].class_id];
      const double l = iou2(cand.ra_boxes[a], b);
      list.emplace_back(std::pow(c, cfg.alpha) * std::pow(l, cfg.beta), a);
    }
    // Descending t, ascending anchor index on ties.
    std::sort(list.begin(), list.end(), [](const auto& x, const auto& y) {
      return x.first != y.first ? x.first > y.first : x.second < y.second;
    });
    for (int i = 0; i < std::min<int>(cfg.top_k, static_cast<int>(list.size())); ++i) chosen[g].push_back(list[i].second);
  }
  Assignment r;
  r.gt_index.assign(n, -1);
  r.t.assign(n, 0.0);
  for (int a = 0; a < n; ++a) {
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (std::find(chosen[g].begin(), chosen[g].end(), a) == chosen[g].end()) continue;
      const double l = iou2(cand.ra_boxes[a], gts[g].ra_box());
      if (l > best) {
        best = l;
        r.gt_index[a] = static_cast<int>(g);
        const double c = cand.cls_prob[static_cast<std::size_t>(a) * cand.num_classes + gts[g].class_id];
        r.t[a] = std::pow(c, cfg.alpha) * std::pow(l, cfg.beta);
      }
    }
  }
  return r;
}

}  // namespace transrad::oracle
