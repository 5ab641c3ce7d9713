#include "transrad/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "transrad/errors.hpp"
#include "transrad/losses.hpp"
#include "transrad/mathutil.hpp"

namespace transrad {

void AssignConfig::validate() const {
  if (top_k < 1) throw ConfigError("assign: top_k must be >= 1");
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("assign: alpha and beta must be > 0");
}

double alignment_metric(double c, double l, const AssignConfig& cfg) {
  if (!(c >= 0.0 && c <= 1.0) || !(l >= 0.0 && l <= 1.0)) {
    throw std::invalid_argument("alignment_metric: c and l must lie in [0, 1]");
  }
  return std::pow(c, cfg.alpha) * std::pow(l, cfg.beta);
}

CandidateSet make_candidates(const RawPredictions& preds) {
  CandidateSet cs;
  cs.num_classes = preds.num_classes;
  cs.anchors = make_anchors(preds);
  const int n = static_cast<int>(cs.anchors.size());
  const int r = preds.reg_max;
  cs.ra_boxes.resize(static_cast<std::size_t>(n));
  cs.cls_prob.resize(static_cast<std::size_t>(n) * preds.num_classes);
  int a = 0;
  for (const auto& lv : preds.levels) {
    for (int i = 0; i < lv.num_anchors(); ++i, ++a) {
      const Anchor& an = cs.anchors[static_cast<std::size_t>(a)];
      std::array<double, 4> dist{};
      for (int s = 0; s < 4; ++s) {
        const auto p = softmax(std::span(lv.box).subspan(static_cast<std::size_t>((i * 4 + s) * r), static_cast<std::size_t>(r)));
        dist[s] = dfl_decode(p) * an.stride;
      }
      cs.ra_boxes[static_cast<std::size_t>(a)] = {an.cx - dist[0], an.cy - dist[1], an.cx + dist[2], an.cy + dist[3]};
      for (int c = 0; c < preds.num_classes; ++c) {
        cs.cls_prob[static_cast<std::size_t>(a) * preds.num_classes + c] =
            sigmoid(lv.cls[static_cast<std::size_t>(i) * preds.num_classes + c]);
      }
    }
  }
  return cs;
}

int AssignmentResult::num_positives() const {
  return static_cast<int>(std::count_if(gt_index.begin(), gt_index.end(), [](int g) { return g >= 0; }));
}

AssignmentResult tal_assign(const CandidateSet& cand, const std::vector<Annotation3D>& gts,
                            const AssignConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(cand.anchors.size());
  AssignmentResult res;
  res.gt_index.assign(static_cast<std::size_t>(n), -1);
  res.t.assign(static_cast<std::size_t>(n), 0.0);
  res.iou.assign(static_cast<std::size_t>(n), 0.0);
  res.gts = gts;

  struct Pick {
    int anchor;
    double t, iou;
  };
  // Selected anchors per GT before conflict resolution.
  std::vector<std::vector<Pick>> picks(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box2D box = gts[g].ra_box();
    const int cls = gts[g].class_id;
    if (cls < 0 || cls >= cand.num_classes) throw std::invalid_argument("tal_assign: GT class out of range");
    std::vector<Pick> cands;
    for (int a = 0; a < n; ++a) {
      const Anchor& an = cand.anchors[static_cast<std::size_t>(a)];
      if (!(an.cx > box.x1 && an.cx < box.x2 && an.cy > box.y1 && an.cy < box.y2)) continue;
      const double c = cand.cls_prob[static_cast<std::size_t>(a) * cand.num_classes + cls];
      const double l = iou_2d(cand.ra_boxes[static_cast<std::size_t>(a)], box);
      cands.push_back({a, alignment_metric(c, l, cfg), l});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Pick& x, const Pick& y) { return x.t > y.t; });
    if (static_cast<int>(cands.size()) > cfg.top_k) cands.resize(static_cast<std::size_t>(cfg.top_k));
    picks[g] = std::move(cands);
  }

  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (const Pick& p : picks[g]) {
      const auto a = static_cast<std::size_t>(p.anchor);
      if (res.gt_index[a] < 0 || p.iou > res.iou[a]) {
        res.gt_index[a] = static_cast<int>(g);
        res.t[a] = p.t;
        res.iou[a] = p.iou;
      }
    }
  }

  if (cfg.normalized_t) {
    std::vector<double> max_t(gts.size(), 0.0), max_iou(gts.size(), 0.0);
    for (int a = 0; a < n; ++a) {
      const int g = res.gt_index[static_cast<std::size_t>(a)];
      if (g < 0) continue;
      max_t[g] = std::max(max_t[g], res.t[static_cast<std::size_t>(a)]);
      max_iou[g] = std::max(max_iou[g], res.iou[static_cast<std::size_t>(a)]);
    }
    for (int a = 0; a < n; ++a) {
      const int g = res.gt_index[static_cast<std::size_t>(a)];
      if (g < 0) continue;
      auto& t = res.t[static_cast<std::size_t>(a)];
      t = max_t[g] > 0.0 ? t / max_t[g] * max_iou[g] : 0.0;
    }
  }
  return res;
}

}  // namespace transrad
