#pragma once

// Task-aligned label assignment on the RA plane.

#include <vector>

#include "transrad/boxes.hpp"
#include "transrad/detmodel.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

struct AssignConfig {
  double alpha = 1.0;
  double beta = 6.0;
  int top_k = 10;
  // Report t_hat = t / max(t) * max(IoU) per GT instead of the raw metric.
  bool normalized_t = false;

  void validate() const;
};

// t = c^alpha * l^beta for c, l in [0, 1].
double alignment_metric(double c, double l, const AssignConfig& cfg);

// Decoded per-anchor quantities the assigner ranks on.
struct CandidateSet {
  int num_classes = 0;
  std::vector<Anchor> anchors;
  std::vector<Box2D> ra_boxes;   // predicted RA boxes in input units
  std::vector<double> cls_prob;  // [anchor * C + c], sigmoid of class logits
};

CandidateSet make_candidates(const RawPredictions& preds);

struct AssignmentResult {
  std::vector<int> gt_index;  // per anchor, -1 for negatives
  std::vector<double> t;      // alignment metric, 0 for negatives
  std::vector<double> iou;    // RA IoU with the assigned GT, 0 for negatives
  std::vector<Annotation3D> gts;

  int num_anchors() const { return static_cast<int>(gt_index.size()); }
  bool positive(int a) const { return gt_index[static_cast<std::size_t>(a)] >= 0; }
  int num_positives() const;

  // Targets of a positive anchor.
  const Annotation3D& target(int a) const { return gts[static_cast<std::size_t>(gt_index[static_cast<std::size_t>(a)])]; }
  int target_class(int a) const { return target(a).class_id; }
  Box2D target_ra(int a) const { return target(a).ra_box(); }
  Box2D target_rd(int a) const { return target(a).rd_box(); }
  Box3D target_box(int a) const { return target(a).box(); }
};

// Candidates of a GT are anchors whose centre lies strictly inside its RA
// box; the top_k candidates by t become positives (ties to the lower anchor
// index). An anchor selected by several GTs keeps the one with the highest
// RA IoU (ties to the lower GT index).
AssignmentResult tal_assign(const CandidateSet& cand, const std::vector<Annotation3D>& gts,
                            const AssignConfig& cfg);

}  // namespace transrad
