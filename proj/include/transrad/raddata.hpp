#pragma once

// Range-azimuth-Doppler cubes and their annotations.
//
// Axis convention, used everywhere in this project:
//   x = range (R), y = azimuth (A), z = Doppler (D).
// A cube stores values in row-major order over (R, A, D). Box corners
// [x1, y1, z1, x2, y2, z2] and centers (r, a, d) are in cube-cell units; the
// cell with integer index i spans [i, i + 1). The RA plane is (range,
// azimuth) and the RD plane is (range, Doppler).

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "transrad/boxes.hpp"

namespace transrad {

struct CubeShape {
  int range = 0;
  int azimuth = 0;
  int doppler = 0;

  std::int64_t size() const {
    return static_cast<std::int64_t>(range) * azimuth * doppler;
  }
  friend bool operator==(const CubeShape&, const CubeShape&) = default;
};

class RadCube {
 public:
  RadCube() = default;
  explicit RadCube(CubeShape shape, float fill = 0.0f);
  RadCube(CubeShape shape, std::vector<float> values);

  const CubeShape& shape() const { return shape_; }
  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  float at(int r, int a, int d) const { return values_[index(r, a, d)]; }
  float& at(int r, int a, int d) { return values_[index(r, a, d)]; }

  friend bool operator==(const RadCube&, const RadCube&) = default;

 private:
  std::size_t index(int r, int a, int d) const {
    return (static_cast<std::size_t>(r) * shape_.azimuth + a) * shape_.doppler + d;
  }

  CubeShape shape_;
  std::vector<float> values_;
};

struct Annotation3D {
  int class_id = 0;
  std::array<double, 3> center{};  // (r, a, d)
  std::array<double, 3> size{};    // (w along range, h along azimuth, depth along Doppler)

  Box3D box() const;
  Box2D ra_box() const { return box().ra(); }
  Box2D rd_box() const { return box().rd(); }

  friend bool operator==(const Annotation3D&, const Annotation3D&) = default;
};

Annotation3D annotation_from_box(int class_id, const Box3D& box);

// Throws std::invalid_argument naming the violated invariant.
void validate_annotation(const Annotation3D& ann, const CubeShape& shape, int num_classes);

struct FrameRecord {
  std::string frame_id;
  RadCube cube;
  std::vector<Annotation3D> annotations;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

// Nearest-neighbour resampling of the Doppler axis:
// out[r, a, k] = in[r, a, floor(k * D / target_d)].
RadCube resize_doppler(const RadCube& cube, int target_d);
Annotation3D rescale_annotation(const Annotation3D& ann, int src_d, int target_d);

struct ClassWeightConfig {
  double w_min = 0.05;
  std::vector<std::int64_t> counts;
};

// Inverse-frequency class weights, floored at w_min and normalized to sum 1.
std::vector<double> compute_class_weights(const ClassWeightConfig& cfg);

// Synthetic scenes ----------------------------------------------------------

struct ClassSizeRange {
  std::array<double, 3> min_size{8, 8, 4};
  std::array<double, 3> max_size{16, 16, 8};
};

struct SceneSpec {
  CubeShape shape{64, 64, 16};
  int num_targets = 2;
  std::vector<double> class_mix;        // relative frequency per class
  std::vector<ClassSizeRange> sizes;    // per class
  double peak_min = 0.6;
  double peak_max = 1.0;
  double noise_level = 0.0;             // uniform background noise amplitude
  int max_placement_attempts = 200;

  int num_classes() const { return static_cast<int>(class_mix.size()); }
  // Six-class scene with class-dependent extents, scaled to the cube.
  static SceneSpec default_for(CubeShape shape, int num_targets, double noise_level);
};

// Targets are separable raised-cosine bumps centred on a cell centre, so the
// intensity peaks at the annotated centre cell and vanishes exactly at the
// annotated box boundary. RA footprints of different targets never overlap.
FrameRecord synth_frame(std::uint64_t seed, const SceneSpec& spec, std::string frame_id = {});

// Dataset directory I/O -------------------------------------------------------
//
// <root>/labels.txt            class names, one per line, in class_id order
// <root>/<split>/<id>.rad      "RAD1" + u32 R, A, D (little endian) + float32 values
// <root>/<split>/<id>.ann      "class_id r a d w h depth" per line

std::vector<std::string> default_class_names();
void save_labels(const std::filesystem::path& root, const std::vector<std::string>& names);
std::vector<std::string> load_labels(const std::filesystem::path& root);

void save_cube(const std::filesystem::path& file, const RadCube& cube);
RadCube load_cube(const std::filesystem::path& file);
void save_annotations(const std::filesystem::path& file, const std::vector<Annotation3D>& anns);
std::vector<Annotation3D> load_annotations(const std::filesystem::path& file);

void save_frames(const std::vector<FrameRecord>& frames, const std::filesystem::path& split_dir);
// Frames sorted by frame_id. num_classes bounds class ids (0 disables).
std::vector<FrameRecord> load_frames(const std::filesystem::path& split_dir, int num_classes = 0);
FrameRecord load_frame(const std::filesystem::path& split_dir, const std::string& frame_id,
                       int num_classes = 0);
std::vector<std::string> list_frame_ids(const std::filesystem::path& split_dir);

}  // namespace transrad
