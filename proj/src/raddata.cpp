#include "transrad/raddata.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "transrad/errors.hpp"

namespace transrad {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "cube files are little-endian float32; big-endian hosts are not supported");

RadCube::RadCube(CubeShape shape, float fill) : shape_(shape) {
  if (shape.range < 1 || shape.azimuth < 1 || shape.doppler < 1) {
    throw std::invalid_argument("RadCube: every shape component must be >= 1");
  }
  values_.assign(static_cast<std::size_t>(shape.size()), fill);
}

RadCube::RadCube(CubeShape shape, std::vector<float> values) : shape_(shape), values_(std::move(values)) {
  if (shape.range < 1 || shape.azimuth < 1 || shape.doppler < 1) {
    throw std::invalid_argument("RadCube: every shape component must be >= 1");
  }
  if (static_cast<std::int64_t>(values_.size()) != shape.size()) {
    throw std::invalid_argument("RadCube: value count does not match shape");
  }
  for (float v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("RadCube: non-finite value");
  }
}

Box3D Annotation3D::box() const {
  return {center[0] - size[0] / 2, center[1] - size[1] / 2, center[2] - size[2] / 2,
          center[0] + size[0] / 2, center[1] + size[1] / 2, center[2] + size[2] / 2};
}

Annotation3D annotation_from_box(int class_id, const Box3D& b) {
  Annotation3D a;
  a.class_id = class_id;
  a.center = {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, (b.z1 + b.z2) / 2};
  a.size = {b.x2 - b.x1, b.y2 - b.y1, b.z2 - b.z1};
  return a;
}

void validate_annotation(const Annotation3D& ann, const CubeShape& shape, int num_classes) {
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(ann.center[i]) || !std::isfinite(ann.size[i])) {
      throw std::invalid_argument("annotation has non-finite fields");
    }
    if (!(ann.size[i] > 0.0)) {
      throw std::invalid_argument("annotation size component " + std::to_string(i) +
                                  " must be > 0");
    }
  }
  if (ann.class_id < 0 || (num_classes > 0 && ann.class_id >= num_classes)) {
    throw std::invalid_argument("annotation class_id " + std::to_string(ann.class_id) +
                                " outside the label map");
  }
  const Box3D b = ann.box();
  const double tol = 1e-9;
  if (b.x1 < -tol || b.y1 < -tol || b.z1 < -tol || b.x2 > shape.range + tol ||
      b.y2 > shape.azimuth + tol || b.z2 > shape.doppler + tol) {
    throw std::invalid_argument("annotation box lies outside the cube bounds");
  }
}

RadCube resize_doppler(const RadCube& cube, int target_d) {
  if (target_d < 1) throw std::invalid_argument("resize_doppler: target_d must be >= 1");
  const auto& s = cube.shape();
  if (target_d == s.doppler) return cube;
  std::vector<int> src(static_cast<std::size_t>(target_d));
  for (int k = 0; k < target_d; ++k) {
    src[k] = static_cast<int>((static_cast<std::int64_t>(k) * s.doppler) / target_d);
  }
  RadCube out({s.range, s.azimuth, target_d});
  auto in = cube.values();
  auto dst = out.values();
  for (std::int64_t ra = 0; ra < static_cast<std::int64_t>(s.range) * s.azimuth; ++ra) {
    const float* row = in.data() + ra * s.doppler;
    float* orow = dst.data() + ra * target_d;
    for (int k = 0; k < target_d; ++k) orow[k] = row[src[k]];
  }
  return out;
}

Annotation3D rescale_annotation(const Annotation3D& ann, int src_d, int target_d) {
  if (src_d < 1 || target_d < 1) {
    throw std::invalid_argument("rescale_annotation: Doppler lengths must be >= 1");
  }
  if (src_d == target_d) return ann;
  const double f = static_cast<double>(target_d) / src_d;
  Annotation3D out = ann;
  out.center[2] *= f;
  out.size[2] *= f;
  return out;
}

std::vector<double> compute_class_weights(const ClassWeightConfig& cfg) {
  if (cfg.counts.empty()) throw std::invalid_argument("compute_class_weights: no classes");
  std::int64_t total = 0;
  for (auto n : cfg.counts) {
    if (n < 0) throw std::invalid_argument("compute_class_weights: negative count");
    total += n;
  }
  if (total == 0) throw std::invalid_argument("compute_class_weights: all counts are zero");
  const auto c = cfg.counts.size();
  // sum_i (total - N_i) = (C - 1) * total; zero only for a single class.
  const double denom = static_cast<double>(c - 1) * static_cast<double>(total);
  std::vector<double> w(c);
  for (std::size_t i = 0; i < c; ++i) {
    w[i] = denom > 0.0 ? static_cast<double>(total - cfg.counts[i]) / denom : 1.0;
  }
  for (double& x : w) x = std::max(x, cfg.w_min);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= s;
  return w;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SceneSpec SceneSpec::default_for(CubeShape shape, int num_targets, double noise_level) {
  SceneSpec s;
  s.shape = shape;
  s.num_targets = num_targets;
  s.noise_level = noise_level;
  s.class_mix = {1, 1, 1, 1, 1, 1};
  // Fractions of the cube extent: (range, azimuth, Doppler) min/max per class
  // for person, bicycle, car, motorcycle, bus, truck.
  const double frac[6][6] = {
      {0.14, 0.14, 0.10, 0.18, 0.18, 0.16},  // person
      {0.16, 0.14, 0.14, 0.20, 0.20, 0.20},  // bicycle
      {0.20, 0.18, 0.18, 0.28, 0.26, 0.28},  // car
      {0.16, 0.16, 0.20, 0.22, 0.22, 0.30},  // motorcycle
      {0.28, 0.22, 0.16, 0.36, 0.30, 0.24},  // bus
      {0.26, 0.24, 0.22, 0.34, 0.32, 0.34},  // truck
  };
  const int dims[3] = {shape.range, shape.azimuth, shape.doppler};
  for (const auto& f : frac) {
    ClassSizeRange r;
    for (int a = 0; a < 3; ++a) {
      r.min_size[a] = std::max(2.0, std::round(f[a] * dims[a]));
      r.max_size[a] = std::max(r.min_size[a], std::round(f[a + 3] * dims[a]));
    }
    s.sizes.push_back(r);
  }
  return s;
}

namespace {

// Raised cosine bump with half-width hw centred at c: 1 at c, 0 at |x-c| >= hw.
double bump(double x, double c, double hw) {
  const double t = std::abs(x - c) / hw;
  return t >= 1.0 ? 0.0 : 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

bool ra_overlap(const Annotation3D& a, const Annotation3D& b) {
  const Box2D p = a.ra_box(), q = b.ra_box();
  return p.x1 < q.x2 && q.x1 < p.x2 && p.y1 < q.y2 && q.y1 < p.y2;
}

}  // namespace

FrameRecord synth_frame(std::uint64_t seed, const SceneSpec& spec, std::string frame_id) {
  if (spec.num_targets < 0) throw GenerationError("synth_frame: num_targets must be >= 0");
  if (spec.num_targets > 0) {
    if (spec.class_mix.empty() || spec.sizes.size() != spec.class_mix.size()) {
      throw GenerationError("synth_frame: class_mix and sizes must have one entry per class");
    }
    const int dims[3] = {spec.shape.range, spec.shape.azimuth, spec.shape.doppler};
    for (const auto& r : spec.sizes) {
      for (int a = 0; a < 3; ++a) {
        if (r.min_size[a] <= 0 || r.max_size[a] < r.min_size[a] || r.max_size[a] > dims[a]) {
          throw GenerationError("synth_frame: size range does not fit the cube");
        }
      }
    }
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  FrameRecord rec;
  rec.frame_id = std::move(frame_id);
  rec.cube = RadCube(spec.shape);
  std::vector<double> peaks;
  if (spec.num_targets > 0) {
    std::discrete_distribution<int> pick_class(spec.class_mix.begin(), spec.class_mix.end());
    const int dims[3] = {spec.shape.range, spec.shape.azimuth, spec.shape.doppler};
    for (int t = 0; t < spec.num_targets; ++t) {
      bool placed = false;
      for (int attempt = 0; attempt < spec.max_placement_attempts && !placed; ++attempt) {
        Annotation3D ann;
        ann.class_id = pick_class(rng);
        const auto& range = spec.sizes[static_cast<std::size_t>(ann.class_id)];
        bool fits = true;
        for (int a = 0; a < 3 && fits; ++a) {
          // Size 2m + 1 cells around centre cell i: corners i - m and i + m + 1.
          const int lo = std::max(0, static_cast<int>(std::ceil((range.min_size[a] - 1) / 2)));
          const int hi = std::max(lo, static_cast<int>(std::floor((range.max_size[a] - 1) / 2)));
          const int half = lo + std::min(hi - lo, static_cast<int>(unit(rng) * (hi - lo + 1)));
          const int cmin = half;
          const int cmax = dims[a] - half - 1;
          fits = cmax >= cmin;
          if (!fits) break;
          const int cell = cmin + std::min(cmax - cmin, static_cast<int>(unit(rng) * (cmax - cmin + 1)));
          ann.center[a] = cell + 0.5;
          ann.size[a] = 2.0 * half + 1.0;
        }
        if (!fits) continue;
        bool clash = false;
        for (const auto& other : rec.annotations) clash |= ra_overlap(ann, other);
        if (clash) continue;
        rec.annotations.push_back(ann);
        peaks.push_back(spec.peak_min + (spec.peak_max - spec.peak_min) * unit(rng));
        placed = true;
      }
      if (!placed) {
        throw GenerationError("synth_frame: could not place target " + std::to_string(t) +
                              " without RA overlap");
      }
    }
  }

  auto cube = rec.cube.values();
  const auto& s = spec.shape;
  if (spec.noise_level > 0.0) {
    for (float& v : cube) v = static_cast<float>(spec.noise_level * unit(rng));
  }
  for (std::size_t t = 0; t < rec.annotations.size(); ++t) {
    const auto& ann = rec.annotations[t];
    const Box3D b = ann.box();
    // Half-widths reach the box faces; cells strictly inside get signal.
    const double hw[3] = {ann.size[0] / 2 + 0.5, ann.size[1] / 2 + 0.5, ann.size[2] / 2 + 0.5};
    for (int r = std::max(0, static_cast<int>(b.x1)); r < std::min(s.range, static_cast<int>(std::ceil(b.x2))); ++r) {
      const double fr = bump(r + 0.5, ann.center[0], hw[0]);
      for (int a = std::max(0, static_cast<int>(b.y1)); a < std::min(s.azimuth, static_cast<int>(std::ceil(b.y2))); ++a) {
        const double fa = bump(a + 0.5, ann.center[1], hw[1]);
        for (int d = std::max(0, static_cast<int>(b.z1)); d < std::min(s.doppler, static_cast<int>(std::ceil(b.z2))); ++d) {
          const double v = peaks[t] * fr * fa * bump(d + 0.5, ann.center[2], hw[2]);
          float& cell = rec.cube.at(r, a, d);
          cell = std::max(cell, static_cast<float>(v));
        }
      }
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// I/O

std::vector<std::string> default_class_names() {
  return {"person", "bicycle", "car", "motorcycle", "bus", "truck"};
}

void save_labels(const fs::path& root, const std::vector<std::string>& names) {
  fs::create_directories(root);
  std::ofstream out(root / "labels.txt");
  if (!out) throw DataError("cannot write " + (root / "labels.txt").string());
  for (const auto& n : names) out << n << '\n';
}

std::vector<std::string> load_labels(const fs::path& root) {
  std::ifstream in(root / "labels.txt");
  if (!in) throw DataError("missing label map " + (root / "labels.txt").string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  if (names.empty()) throw DataError("label map " + (root / "labels.txt").string() + " is empty");
  return names;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void save_cube(const fs::path& file, const RadCube& cube) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out.write("RAD1", 4);
  put_u32(out, static_cast<std::uint32_t>(cube.shape().range));
  put_u32(out, static_cast<std::uint32_t>(cube.shape().azimuth));
  put_u32(out, static_cast<std::uint32_t>(cube.shape().doppler));
  auto v = cube.values();
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!out) throw DataError("short write to " + file.string());
}

RadCube load_cube(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("missing cube file " + file.string());
  unsigned char header[16];
  in.read(reinterpret_cast<char*>(header), 16);
  if (in.gcount() != 16) throw DataError(file.string() + ": truncated header");
  if (std::memcmp(header, "RAD1", 4) != 0) throw DataError(file.string() + ": bad magic");
  const CubeShape shape{static_cast<int>(get_u32(header + 4)), static_cast<int>(get_u32(header + 8)),
                        static_cast<int>(get_u32(header + 12))};
  if (shape.range < 1 || shape.azimuth < 1 || shape.doppler < 1) {
    throw DataError(file.string() + ": shape header has a zero component");
  }
  std::vector<float> values(static_cast<std::size_t>(shape.size()));
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != values.size() * sizeof(float)) {
    throw DataError(file.string() + ": truncated cube data (shape header says " +
                    std::to_string(shape.range) + "x" + std::to_string(shape.azimuth) + "x" +
                    std::to_string(shape.doppler) + ")");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError(file.string() + ": trailing bytes after cube data (shape header mismatch)");
  }
  try {
    return RadCube(shape, std::move(values));
  } catch (const std::invalid_argument& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

void save_annotations(const fs::path& file, const std::vector<Annotation3D>& anns) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& a : anns) {
    out << a.class_id;
    for (double v : a.center) out << ' ' << format_double(v);
    for (double v : a.size) out << ' ' << format_double(v);
    out << '\n';
  }
}

std::vector<Annotation3D> load_annotations(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("missing annotation file " + file.string());
  std::vector<Annotation3D> anns;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream is(line);
    std::string tok[7];
    for (auto& t : tok) is >> t;
    std::string extra;
    if (tok[6].empty() || (is >> extra)) {
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    }
    Annotation3D a;
    auto parse = [&](const std::string& s, auto& dst) {
      auto res = std::from_chars(s.data(), s.data() + s.size(), dst);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw DataError(file.string() + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
      }
    };
    parse(tok[0], a.class_id);
    for (int i = 0; i < 3; ++i) parse(tok[1 + i], a.center[i]);
    for (int i = 0; i < 3; ++i) parse(tok[4 + i], a.size[i]);
    anns.push_back(a);
  }
  return anns;
}

void save_frames(const std::vector<FrameRecord>& frames, const fs::path& split_dir) {
  fs::create_directories(split_dir);
  for (const auto& f : frames) {
    if (f.frame_id.empty()) throw DataError("save_frames: frame without an id");
    save_cube(split_dir / (f.frame_id + ".rad"), f.cube);
    save_annotations(split_dir / (f.frame_id + ".ann"), f.annotations);
  }
}

std::vector<std::string> list_frame_ids(const fs::path& split_dir) {
  if (!fs::is_directory(split_dir)) throw DataError("missing split directory " + split_dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(split_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".rad") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

FrameRecord load_frame(const fs::path& split_dir, const std::string& frame_id, int num_classes) {
  FrameRecord rec;
  rec.frame_id = frame_id;
  try {
    rec.cube = load_cube(split_dir / (frame_id + ".rad"));
    rec.annotations = load_annotations(split_dir / (frame_id + ".ann"));
  } catch (const DataError& e) {
    throw DataError("frame '" + frame_id + "': " + e.what());
  }
  for (std::size_t i = 0; i < rec.annotations.size(); ++i) {
    try {
      validate_annotation(rec.annotations[i], rec.cube.shape(), num_classes);
    } catch (const std::invalid_argument& e) {
      throw DataError("frame '" + frame_id + "' annotation " + std::to_string(i) + ": " + e.what());
    }
  }
  return rec;
}

std::vector<FrameRecord> load_frames(const fs::path& split_dir, int num_classes) {
  std::vector<FrameRecord> frames;
  for (const auto& id : list_frame_ids(split_dir)) frames.push_back(load_frame(split_dir, id, num_classes));
  return frames;
}

}  // namespace transrad
