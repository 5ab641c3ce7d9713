#include "transrad/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "transrad/errors.hpp"

namespace transrad {

const char* eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::k3d:
      return "3d";
    case EvalMode::kRa:
      return "ra";
    case EvalMode::kRd:
      return "rd";
  }
  return "?";
}

double eval_iou(const Box3D& a, const Box3D& b, EvalMode mode) {
  switch (mode) {
    case EvalMode::k3d:
      return iou_3d(a, b);
    case EvalMode::kRa:
      return iou_2d(a.ra(), b.ra());
    case EvalMode::kRd:
      return iou_2d(a.rd(), b.rd());
  }
  return 0.0;
}

void EvalConfig::validate() const {
  for (const auto* v : {&iou_thresholds_3d, &iou_thresholds_2d}) {
    if (v->empty()) throw ConfigError("eval: threshold list is empty");
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!((*v)[i] > 0.0 && (*v)[i] < 1.0)) throw ConfigError("eval: thresholds must lie in (0, 1)");
      if (i > 0 && !((*v)[i] > (*v)[i - 1])) throw ConfigError("eval: thresholds must be strictly increasing");
    }
  }
}

MatchResult match_detections(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<Annotation3D>>& gts, double iou_thr, int class_id,
                             EvalMode mode) {
  if (dets.size() != gts.size()) throw std::invalid_argument("match_detections: frame count mismatch");
  struct Ref {
    std::size_t frame;
    const Detection* det;
  };
  std::vector<Ref> refs;
  MatchResult res;
  for (std::size_t f = 0; f < dets.size(); ++f) {
    for (const auto& d : dets[f]) {
      if (d.class_id == class_id) refs.push_back({f, &d});
    }
    for (const auto& g : gts[f]) res.num_gt += g.class_id == class_id ? 1 : 0;
  }
  std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) {
    if (a.det->class_score != b.det->class_score) return a.det->class_score > b.det->class_score;
    return detection_order(*a.det, *b.det);
  });

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  for (const Ref& r : refs) {
    int best = -1;
    double best_iou = -1.0;
    const auto& frame_gts = gts[r.frame];
    for (std::size_t g = 0; g < frame_gts.size(); ++g) {
      if (frame_gts[g].class_id != class_id || used[r.frame][g]) continue;
      const double iou = eval_iou(r.det->box, frame_gts[g].box(), mode);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    const bool tp = best >= 0 && best_iou >= iou_thr;
    if (tp) used[r.frame][static_cast<std::size_t>(best)] = true;
    res.tp.push_back(tp);
    res.scores.push_back(r.det->class_score);
  }
  return res;
}

double average_precision(const std::vector<bool>& tp, int num_gt) {
  if (num_gt <= 0 || tp.empty()) return 0.0;
  const std::size_t n = tp.size();
  std::vector<double> prec(n), rec(n);
  int ctp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ctp += tp[i] ? 1 : 0;
    prec[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(ctp) / num_gt;
  }
  for (std::size_t i = n - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

ApTable mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation3D>>& gts,
                int num_classes, const std::vector<double>& thresholds, EvalMode mode) {
  ApTable t;
  t.mode = mode;
  t.thresholds = thresholds;
  std::vector<bool> present(static_cast<std::size_t>(num_classes), false);
  for (const auto& f : gts)
    for (const auto& g : f)
      if (g.class_id >= 0 && g.class_id < num_classes) present[g.class_id] = true;
  for (const auto& f : dets)
    for (const auto& d : f)
      if (d.class_id >= 0 && d.class_id < num_classes) present[d.class_id] = true;

  for (double thr : thresholds) {
    std::vector<double> row(static_cast<std::size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int count = 0;
    for (int c = 0; c < num_classes; ++c) {
      if (!present[c]) continue;
      const MatchResult m = match_detections(dets, gts, thr, c, mode);
      row[c] = average_precision(m.tp, m.num_gt);
      sum += row[c];
      ++count;
    }
    t.ap.push_back(std::move(row));
    t.map_at.push_back(count > 0 ? sum / count : 0.0);
  }
  t.map = t.map_at.empty() ? 0.0 : std::accumulate(t.map_at.begin(), t.map_at.end(), 0.0) / t.map_at.size();
  return t;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<Annotation3D>>& gts, int num_classes,
                               const EvalConfig& cfg) {
  cfg.validate();
  EvalReport r;
  r.d3 = mean_ap(dets, gts, num_classes, cfg.iou_thresholds_3d, EvalMode::k3d);
  r.ra = mean_ap(dets, gts, num_classes, cfg.iou_thresholds_2d, EvalMode::kRa);
  r.rd = mean_ap(dets, gts, num_classes, cfg.iou_thresholds_2d, EvalMode::kRd);
  return r;
}

namespace {

std::string class_label(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : "class" + std::to_string(c);
}

std::string thr_str(double t) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << t;
  return s.str();
}

}  // namespace

void write_report_text(std::ostream& os, const EvalReport& r, const std::vector<std::string>& names) {
  for (const ApTable* t : {&r.d3, &r.ra, &r.rd}) {
    os << "[" << eval_mode_name(t->mode) << "]  mAP " << std::fixed << std::setprecision(4) << t->map << "\n";
    os << std::left << std::setw(14) << "class";
    for (double thr : t->thresholds) os << std::right << std::setw(10) << ("AP@" + thr_str(thr));
    os << "\n";
    const std::size_t nc = t->ap.empty() ? 0 : t->ap.front().size();
    for (std::size_t c = 0; c < nc; ++c) {
      os << std::left << std::setw(14) << class_label(names, c);
      for (std::size_t i = 0; i < t->thresholds.size(); ++i) {
        const double v = t->ap[i][c];
        os << std::right << std::setw(10);
        if (std::isnan(v)) {
          os << "-";
        } else {
          os << std::fixed << std::setprecision(4) << v;
        }
      }
      os << "\n";
    }
    os << std::left << std::setw(14) << "mean";
    for (double v : t->map_at) os << std::right << std::setw(10) << std::fixed << std::setprecision(4) << v;
    os << "\n\n";
  }
}

void write_report_kv(std::ostream& os, const EvalReport& r, const std::vector<std::string>& names) {
  os << std::setprecision(10);
  for (const ApTable* t : {&r.d3, &r.ra, &r.rd}) {
    const std::string m = eval_mode_name(t->mode);
    os << m << ".map=" << t->map << "\n";
    for (std::size_t i = 0; i < t->thresholds.size(); ++i) {
      os << m << ".ap@" << thr_str(t->thresholds[i]) << "=" << t->map_at[i] << "\n";
      for (std::size_t c = 0; c < t->ap[i].size(); ++c) {
        if (std::isnan(t->ap[i][c])) continue;
        os << m << ".class." << class_label(names, c) << ".ap@" << thr_str(t->thresholds[i]) << "=" << t->ap[i][c]
           << "\n";
      }
    }
  }
}

std::int64_t count_params(const nn::ParamList& params) { return params.learnable_count(); }

std::int64_t count_params(const Detector& model) { return model.num_params(); }

}  // namespace transrad
