#pragma once

// Average precision over 3D boxes and their RA / RD projections.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "transrad/detmodel.hpp"
#include "transrad/postprocess.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

enum class EvalMode { k3d, kRa, kRd };
const char* eval_mode_name(EvalMode mode);

double eval_iou(const Box3D& a, const Box3D& b, EvalMode mode);

struct EvalConfig {
  std::vector<double> iou_thresholds_3d{0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> iou_thresholds_2d{0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::string> class_names;

  void validate() const;
  const std::vector<double>& thresholds(EvalMode mode) const {
    return mode == EvalMode::k3d ? iou_thresholds_3d : iou_thresholds_2d;
  }
};

struct MatchResult {
  std::vector<bool> tp;        // per detection of the class, in score order
  std::vector<double> scores;  // matching scores
  int num_gt = 0;
};

// Detections of class_id over all frames, sorted by score descending; each
// is matched to the highest-IoU unmatched GT of the same class in its frame.
MatchResult match_detections(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<Annotation3D>>& gts, double iou_thr,
                             int class_id, EvalMode mode = EvalMode::k3d);

// All-point AP with the precision envelope taken from the right.
double average_precision(const std::vector<bool>& tp, int num_gt);

struct ApTable {
  EvalMode mode = EvalMode::k3d;
  std::vector<double> thresholds;
  std::vector<std::vector<double>> ap;  // [threshold][class]; NaN when the class is excluded
  std::vector<double> map_at;           // per threshold, mean over included classes
  double map = 0.0;                     // mean of map_at
};

// Per-class AP table, then the class mean (classes with neither GT nor
// predictions excluded) and the threshold mean.
ApTable mean_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation3D>>& gts,
                int num_classes, const std::vector<double>& thresholds, EvalMode mode);

struct EvalReport {
  ApTable d3, ra, rd;
};
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<Annotation3D>>& gts, int num_classes,
                               const EvalConfig& cfg);

void write_report_text(std::ostream& os, const EvalReport& r, const std::vector<std::string>& class_names);
// key=value lines, e.g. "3d.map=0.61", "ra.ap@0.50=0.7", "rd.class.car.ap@0.50=0.8".
void write_report_kv(std::ostream& os, const EvalReport& r, const std::vector<std::string>& class_names);

std::int64_t count_params(const nn::ParamList& params);
std::int64_t count_params(const Detector& model);

}  // namespace transrad
