#pragma once

// Loss terms of the detector and their weighted combination. Every term comes
// with its derivative so the total loss can be injected into the autodiff
// graph as a single node over the raw head outputs.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "transrad/assignment.hpp"
#include "transrad/boxes.hpp"
#include "transrad/detmodel.hpp"

namespace transrad {

// --- elementwise terms ---------------------------------------------------------

CiouParts<double> ciou_loss(const Box2D& pred, const Box2D& gt);
// Squared centre distance, un-normalized.
double center_loss(const Box2D& pred, const Box2D& gt);

// Expectation of the bin index under probs.
double dfl_decode(std::span<const double> probs);

struct DflResult {
  double loss = 0.0;
  std::vector<double> dlogits;
  bool clamped = false;  // target was outside [0, bins - 1]
};
// Two-bin cross-entropy around y; probs must be a distribution.
double dfl_loss(std::span<const double> probs, double y);
DflResult dfl_loss_logits(std::span<const double> logits, double y);

struct FocalConfig {
  double alpha = 0.25;
  double gamma = 2.0;
};
// alpha_t (1 - p_t)^gamma * w * BCE(p, y).
double focal_loss(double p, int y, const FocalConfig& cfg, double w = 1.0);
struct FocalResult {
  double loss = 0.0;
  double dlogit = 0.0;
};
FocalResult focal_loss_logit(double logit, int y, const FocalConfig& cfg, double w = 1.0);

double smooth_l1(double p, double y);
double smooth_l1_grad(double p, double y);

// --- total -----------------------------------------------------------------------

enum LossTerm {
  kFlObj = 0,
  kFlCls,
  kCiouRa,
  kCentRa,
  kDflRa,
  kCiouRd,
  kCentRd,
  kSl1Dopl,
  kIouRad,
  kNumLossTerms
};
const char* loss_term_name(int term);

struct LossWeights {
  std::array<double, kNumLossTerms> alpha{30, 7.5, 7.5, 0.5, 1.5, 5.0, 5.0, 80, 40};
  void apply_phase2() {
    alpha[kFlObj] = 40;
    alpha[kFlCls] = 15;
  }
  void validate() const;
};

struct LossConfig {
  LossWeights weights;
  FocalConfig focal;
  bool normalized_center = false;  // use the CIoU-normalized centre distance
};

struct LossBreakdown {
  std::array<double, kNumLossTerms> components{};
  double total = 0.0;
  int num_positives = 0;
  int dfl_clamped = 0;
};

// Batch loss. preds[i] and assign[i] describe frame i; doppler_bins is the
// Doppler length of the model input. When grads is non-null it receives
// d total / d raw output per frame, in the RawPredictions layout.
LossBreakdown total_loss(const std::vector<RawPredictions>& preds,
                         const std::vector<AssignmentResult>& assign, const LossConfig& cfg,
                         std::span<const double> class_weights, int doppler_bins,
                         std::vector<RawPredictions>* grads = nullptr);

}  // namespace transrad
