#include "transrad/postprocess.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "transrad/errors.hpp"
#include "transrad/losses.hpp"
#include "transrad/mathutil.hpp"

namespace transrad {

double detection_iou(const Detection& a, const Detection& b, NmsIou mode) {
  return mode == NmsIou::k3d ? iou_3d(a.box, b.box) : iou_2d(a.box.ra(), b.box.ra());
}

bool detection_order(const Detection& a, const Detection& b) {
  if (a.class_score != b.class_score) return a.class_score > b.class_score;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  const std::array<double, 6> ka{a.box.x1, a.box.y1, a.box.z1, a.box.x2, a.box.y2, a.box.z2};
  const std::array<double, 6> kb{b.box.x1, b.box.y1, b.box.z1, b.box.x2, b.box.y2, b.box.z2};
  return ka < kb;
}

std::vector<Detection> decode(const RawPredictions& preds, const CubeShape& cube, double score_thr) {
  std::vector<Detection> out;
  const int nc = preds.num_classes, rm = preds.reg_max;
  const double dbins = cube.doppler;
  for (int l = 0; l < 3; ++l) {
    const auto& lv = preds.levels[l];
    for (int i = 0; i < lv.num_anchors(); ++i) {
      const auto ia = static_cast<std::size_t>(i);
      const double obj = sigmoid(lv.obj[ia]);
      int best = 0;
      for (int c = 1; c < nc; ++c) {
        if (lv.cls[ia * nc + c] > lv.cls[ia * nc + best]) best = c;
      }
      const double score = obj * sigmoid(lv.cls[ia * nc + best]);
      if (score < score_thr) continue;

      const double cx = (i % lv.width + 0.5) * lv.stride, cy = (i / lv.width + 0.5) * lv.stride;
      std::array<double, 4> dist{};
      for (int s = 0; s < 4; ++s) {
        dist[s] = dfl_decode(softmax(std::span(lv.box).subspan((ia * 4 + s) * rm, static_cast<std::size_t>(rm)))) *
                  lv.stride;
      }
      double z1 = sigmoid(lv.dopl[ia * 2]) * dbins, z2 = sigmoid(lv.dopl[ia * 2 + 1]) * dbins;
      if (z1 > z2) std::swap(z1, z2);
      Detection d;
      d.box = {std::clamp(cx - dist[0], 0.0, double(cube.range)), std::clamp(cy - dist[1], 0.0, double(cube.azimuth)),
               std::clamp(z1, 0.0, dbins), std::clamp(cx + dist[2], 0.0, double(cube.range)),
               std::clamp(cy + dist[3], 0.0, double(cube.azimuth)), std::clamp(z2, 0.0, dbins)};
      d.class_id = best;
      d.class_score = score;
      d.objectness = obj;
      d.level = l;
      out.push_back(d);
    }
  }
  std::sort(out.begin(), out.end(), detection_order);
  return out;
}

std::vector<Detection> class_nms(std::vector<Detection> dets, double iou_thr, NmsIou mode) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && detection_iou(k, d, mode) > iou_thr;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> la_nms(std::vector<Detection> dets, double thr, NmsIou mode) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> selected;
  std::vector<Detection> rest;
  std::size_t head = 0;
  while (head < dets.size()) {
    const Detection cur = dets[head];
    selected.push_back(cur);
    rest.clear();
    for (std::size_t i = head + 1; i < dets.size(); ++i) {
      if (dets[i].class_id == cur.class_id || detection_iou(cur, dets[i], mode) <= thr) rest.push_back(dets[i]);
    }
    dets.swap(rest);
    head = 0;
  }
  return selected;
}

std::vector<Detection> postprocess_pipeline(const RawPredictions& preds, const CubeShape& cube,
                                            const PostprocessConfig& cfg) {
  return la_nms(class_nms(decode(preds, cube, cfg.score_thr), cfg.class_nms_thr, cfg.iou_mode), cfg.la_thr,
                cfg.iou_mode);
}

// ---------------------------------------------------------------------------

namespace {

void put(std::string& s, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  s.append(buf, r.ptr);
}

double get(std::string_view tok, const std::string& line) {
  double v = 0.0;
  auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (r.ec != std::errc() || r.ptr != tok.data() + tok.size()) throw DataError("bad detection line: " + line);
  return v;
}

}  // namespace

void write_detections(std::ostream& os, const std::vector<FrameDetections>& frames) {
  std::string line;
  for (const auto& f : frames) {
    for (const auto& d : f.dets) {
      line = f.frame_id;
      line += ' ';
      line += std::to_string(d.class_id);
      for (double v : {d.class_score, d.objectness, d.box.x1, d.box.y1, d.box.z1, d.box.x2, d.box.y2, d.box.z2}) {
        line += ' ';
        put(line, v);
      }
      os << line << '\n';
    }
  }
}

void save_detections(const std::filesystem::path& file, const std::vector<FrameDetections>& frames) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file.string());
  write_detections(os, frames);
}

std::vector<FrameDetections> read_detections(std::istream& is) {
  std::vector<FrameDetections> out;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.size() != 10) throw DataError("detection line needs 10 fields: " + line);
    Detection d;
    d.class_id = static_cast<int>(get(tok[1], line));
    d.class_score = get(tok[2], line);
    d.objectness = get(tok[3], line);
    d.box = {get(tok[4], line), get(tok[5], line), get(tok[6], line),
             get(tok[7], line), get(tok[8], line), get(tok[9], line)};
    auto [it, inserted] = index.emplace(tok[0], out.size());
    if (inserted) out.push_back({tok[0], {}});
    out[it->second].dets.push_back(d);
  }
  return out;
}

std::vector<FrameDetections> load_detections(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot read " + file.string());
  return read_detections(is);
}

}  // namespace transrad
