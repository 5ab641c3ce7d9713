#pragma once

// Detection decoding and the two-stage suppression (class-wise NMS followed
// by location-aware NMS).

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "transrad/boxes.hpp"
#include "transrad/detmodel.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

struct Detection {
  Box3D box;
  int class_id = 0;
  double class_score = 0.0;  // objectness * class probability
  double objectness = 0.0;
  int level = 0;
};

enum class NmsIou { k3d, kRa2d };

double detection_iou(const Detection& a, const Detection& b, NmsIou mode);

// Score descending, then class_id, then lexicographic box corners.
bool detection_order(const Detection& a, const Detection& b);

std::vector<Detection> decode(const RawPredictions& preds, const CubeShape& cube, double score_thr);
// Greedy per-class NMS: a box is dropped when it overlaps a kept box of its
// class with IoU > iou_thr.
std::vector<Detection> class_nms(std::vector<Detection> dets, double iou_thr, NmsIou mode = NmsIou::k3d);
// Location-aware NMS: a box is dropped when it overlaps an already selected
// box of a different class with IoU > thr. Output is in selection order.
std::vector<Detection> la_nms(std::vector<Detection> dets, double thr = 0.1, NmsIou mode = NmsIou::k3d);

struct PostprocessConfig {
  double score_thr = 0.3;
  double class_nms_thr = 0.3;
  double la_thr = 0.1;
  NmsIou iou_mode = NmsIou::k3d;
};

std::vector<Detection> postprocess_pipeline(const RawPredictions& preds, const CubeShape& cube,
                                            const PostprocessConfig& cfg);

// Dump format, one line per detection:
//   frame_id class_id class_score objectness x1 y1 z1 x2 y2 z2
struct FrameDetections {
  std::string frame_id;
  std::vector<Detection> dets;
};
void write_detections(std::ostream& os, const std::vector<FrameDetections>& frames);
void save_detections(const std::filesystem::path& file, const std::vector<FrameDetections>& frames);
// Frames appear in order of first occurrence.
std::vector<FrameDetections> read_detections(std::istream& is);
std::vector<FrameDetections> load_detections(const std::filesystem::path& file);

}  // namespace transrad
