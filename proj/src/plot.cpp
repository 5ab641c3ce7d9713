#include "transrad/plot.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "transrad/errors.hpp"

namespace transrad {

void RgbImage::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void write_png(const std::filesystem::path& file, const RgbImage& img) {
  FILE* fp = std::fopen(file.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng failed writing " + file.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&img.pixels[static_cast<std::size_t>(y) * img.width * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

namespace {

std::array<std::uint8_t, 3> colormap(double t) {
  static const std::array<std::array<double, 3>, 5> stops{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - i;
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] * (1 - f) + stops[i + 1][k] * f));
  return c;
}

struct Panel {
  int x0, rows, cols, scale;
};

void rect(RgbImage& img, const Panel& p, double x1, double y1, double x2, double y2, std::array<std::uint8_t, 3> c) {
  const int px1 = p.x0 + static_cast<int>(std::floor(x1 * p.scale));
  const int px2 = p.x0 + static_cast<int>(std::ceil(x2 * p.scale)) - 1;
  const int py1 = static_cast<int>(std::floor(y1 * p.scale));
  const int py2 = static_cast<int>(std::ceil(y2 * p.scale)) - 1;
  for (int x = px1; x <= px2; ++x) {
    img.set(x, py1, c[0], c[1], c[2]);
    img.set(x, py2, c[0], c[1], c[2]);
  }
  for (int y = py1; y <= py2; ++y) {
    img.set(px1, y, c[0], c[1], c[2]);
    img.set(px2, y, c[0], c[1], c[2]);
  }
}

}  // namespace

RgbImage render_frame(const RadCube& cube, const std::vector<Detection>& dets, const std::vector<Annotation3D>& gts) {
  const CubeShape s = cube.shape();
  const int rows = std::max(s.azimuth, s.doppler);
  const int scale = std::max(1, 256 / rows);
  const Panel ra{0, s.azimuth, s.range, scale};
  const Panel rd{s.range * scale + 4, s.doppler, s.range, scale};
  RgbImage img(rd.x0 + s.range * scale, rows * scale);

  std::vector<double> ra_max(static_cast<std::size_t>(s.range) * s.azimuth, 0.0);
  std::vector<double> rd_max(static_cast<std::size_t>(s.range) * s.doppler, 0.0);
  double top = 1e-12;
  for (int r = 0; r < s.range; ++r)
    for (int a = 0; a < s.azimuth; ++a)
      for (int d = 0; d < s.doppler; ++d) {
        const double v = cube.at(r, a, d);
        auto& m1 = ra_max[static_cast<std::size_t>(a) * s.range + r];
        auto& m2 = rd_max[static_cast<std::size_t>(d) * s.range + r];
        m1 = std::max(m1, v);
        m2 = std::max(m2, v);
        top = std::max(top, v);
      }
  auto paint = [&](const Panel& p, const std::vector<double>& m) {
    for (int y = 0; y < p.rows * p.scale; ++y)
      for (int x = 0; x < p.cols * p.scale; ++x) {
        const auto c = colormap(m[static_cast<std::size_t>(y / p.scale) * p.cols + x / p.scale] / top);
        img.set(p.x0 + x, y, c[0], c[1], c[2]);
      }
  };
  paint(ra, ra_max);
  paint(rd, rd_max);
  for (const auto& g : gts) {
    const Box3D b = g.box();
    rect(img, ra, b.x1, b.y1, b.x2, b.y2, {0, 255, 0});
    rect(img, rd, b.x1, b.z1, b.x2, b.z2, {0, 255, 0});
  }
  for (const auto& d : dets) {
    rect(img, ra, d.box.x1, d.box.y1, d.box.x2, d.box.y2, {255, 40, 40});
    rect(img, rd, d.box.x1, d.box.z1, d.box.x2, d.box.z2, {255, 40, 40});
  }
  return img;
}

}  // namespace transrad
