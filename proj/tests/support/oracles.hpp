#pragma once

// Independent reference implementations used as test oracles. They are
// written as direct loops over the defining formulas and share no code with
// the library beyond its data types.

#include <vector>

#include "transrad/assignment.hpp"
#include "transrad/evalmetrics.hpp"
#include "transrad/masa.hpp"
#include "transrad/postprocess.hpp"

namespace transrad::oracle {

double iou3(const Box3D& a, const Box3D& b);
double iou2(const Box2D& a, const Box2D& b);

// Literal transcription of the location-aware NMS pseudocode: argsort by
// score, take the head, recompute IoUs against every remaining box, keep
// those with IoU <= thr or the same class.
std::vector<Detection> la_nms_literal(const std::vector<Detection>& boxes, double thr);

// AP as the sum over true positives of max precision at any later rank,
// divided by the GT count.
double ap_bruteforce(const std::vector<bool>& tp, int num_gt);

// Full evaluation from raw detections: per class sort, greedy match, AP,
// class mean over classes seen in GT or detections, threshold mean.
struct EvalResult {
  std::vector<std::vector<double>> ap;  // [threshold][class], NaN when excluded
  std::vector<double> map_at;
  double map = 0.0;
};
EvalResult evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation3D>>& gts,
                    int num_classes, const std::vector<double>& thresholds, EvalMode mode);

// Depthwise convolution by sliding window with clamped (replicate) indexing.
std::vector<double> depthwise_replicate(const ad::Tensor& x, const ad::Tensor& weight, const ad::Tensor& bias);

// 1x1 convolution as an explicit channel mix; x and the result are [C, H*W].
std::vector<double> pointwise(const std::vector<double>& x, int channels, int tokens, const nn::Conv2d& conv);

// Full MaSA of a single frame by looping over all token pairs.
std::vector<double> masa_pairwise(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);
// Decomposed MaSA of a single frame: row attention then column attention,
// evaluated as explicit sums.
std::vector<double> masa_axial(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);
// Plain multi-head softmax attention with the output projection, no decay.
std::vector<double> softmax_attention(const ad::Tensor& x, const MasaConfig& cfg, const MasaWeights& w);

// Retention through the recurrent summation with complex rotations:
// o_n = sum_{m<=n} gamma^(n-m) Re(<q_n e^{in theta}, k_m e^{im theta}>) v_m.
std::vector<double> retention_summation(const ad::Tensor& x, const RetentionParams& p);

// Exhaustive task-aligned assignment: enumerate candidates of every GT,
// sort them by t, take the top k, resolve conflicts by IoU.
struct Assignment {
  std::vector<int> gt_index;
  std::vector<double> t;
};
Assignment tal(const CandidateSet& cand, const std::vector<Annotation3D>& gts, const AssignConfig& cfg);

}  // namespace transrad::oracle
