#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "transrad/postprocess.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

struct RgbImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const std::filesystem::path& file, const RgbImage& img);

// RA (max over Doppler) and RD (max over azimuth) heatmaps side by side, range
// along the horizontal axis, with ground truth in green and detections in red.
RgbImage render_frame(const RadCube& cube, const std::vector<Detection>& dets,
                      const std::vector<Annotation3D>& gts);

}  // namespace transrad
