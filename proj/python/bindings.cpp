// Python bindings for the transrad core: data generation, geometry and loss
// terms, NMS, AP evaluation, and the detector with training and inference.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "transrad/checkpoint.hpp"
#include "transrad/config.hpp"
#include "transrad/errors.hpp"
#include "transrad/masa.hpp"
#include "transrad/trainer.hpp"

namespace py = pybind11;
using namespace transrad;

namespace {

using Array3f = py::array_t<float, py::array::c_style | py::array::forcecast>;

RadCube cube_from_numpy(const Array3f& a) {
  if (a.ndim() != 3) throw std::invalid_argument("cube must be a 3-D array (range, azimuth, Doppler)");
  const CubeShape s{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2))};
  return RadCube(s, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> cube_to_numpy(const RadCube& c) {
  const auto& s = c.shape();
  py::array_t<float> out({s.range, s.azimuth, s.doppler});
  std::copy(c.values().begin(), c.values().end(), out.mutable_data());
  return out;
}

py::array_t<double> matrix_to_numpy(const DecayMatrix& m) {
  py::array_t<double> out({m.n, m.n});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

Box2D box2(const std::array<double, 4>& b) { return {b[0], b[1], b[2], b[3]}; }
Box3D box3(const std::array<double, 6>& b) { return {b[0], b[1], b[2], b[3], b[4], b[5]}; }
std::array<double, 6> box_tuple(const Box3D& b) { return {b.x1, b.y1, b.z1, b.x2, b.y2, b.z2}; }

FrameRecord make_frame(const Array3f& cube, const std::vector<Annotation3D>& anns, const std::string& id) {
  return FrameRecord{id, cube_from_numpy(cube), anns};
}

}  // namespace

PYBIND11_MODULE(_transrad, m) {
  m.doc() = "TransRAD radar object detector";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<GenerationError>(m, "GenerationError", PyExc_ValueError);

  // --- data -------------------------------------------------------------------
  py::class_<Annotation3D>(m, "Annotation3D")
      .def(py::init([](int cls, std::array<double, 3> center, std::array<double, 3> size) {
             return Annotation3D{cls, center, size};
           }),
           py::arg("class_id"), py::arg("center"), py::arg("size"))
      .def_readwrite("class_id", &Annotation3D::class_id)
      .def_readwrite("center", &Annotation3D::center)
      .def_readwrite("size", &Annotation3D::size)
      .def_property_readonly("box", [](const Annotation3D& a) { return box_tuple(a.box()); })
      .def("__repr__", [](const Annotation3D& a) {
        return "Annotation3D(class_id=" + std::to_string(a.class_id) + ")";
      });

  m.def("annotation_from_box", [](int cls, std::array<double, 6> b) { return annotation_from_box(cls, box3(b)); },
        py::arg("class_id"), py::arg("box"));

  m.def(
      "resize_doppler",
      [](const Array3f& cube, int target_d) { return cube_to_numpy(resize_doppler(cube_from_numpy(cube), target_d)); },
      py::arg("cube"), py::arg("target_d"));
  m.def("rescale_annotation", &rescale_annotation, py::arg("annotation"), py::arg("src_d"), py::arg("target_d"));
  m.def(
      "compute_class_weights",
      [](std::vector<std::int64_t> counts, double w_min) { return compute_class_weights({w_min, std::move(counts)}); },
      py::arg("counts"), py::arg("w_min") = 0.05);

  m.def(
      "synth_frame",
      [](std::uint64_t seed, std::array<int, 3> shape, int num_targets, double noise, const std::string& id) {
        const FrameRecord f = synth_frame(seed, SceneSpec::default_for({shape[0], shape[1], shape[2]}, num_targets, noise), id);
        return py::make_tuple(cube_to_numpy(f.cube), f.annotations);
      },
      py::arg("seed"), py::arg("shape") = std::array<int, 3>{64, 64, 16}, py::arg("num_targets") = 2,
      py::arg("noise") = 0.0, py::arg("frame_id") = "");

  m.def(
      "save_frames",
      [](const std::vector<std::tuple<std::string, Array3f, std::vector<Annotation3D>>>& frames,
         const std::filesystem::path& dir) {
        std::vector<FrameRecord> recs;
        for (const auto& [id, cube, anns] : frames) recs.push_back(make_frame(cube, anns, id));
        save_frames(recs, dir);
      },
      py::arg("frames"), py::arg("split_dir"));
  m.def(
      "load_frames",
      [](const std::filesystem::path& dir, int num_classes) {
        py::list out;
        for (const auto& f : load_frames(dir, num_classes))
          out.append(py::make_tuple(f.frame_id, cube_to_numpy(f.cube), f.annotations));
        return out;
      },
      py::arg("split_dir"), py::arg("num_classes") = 0);

  // --- attention priors ----------------------------------------------------------
  m.def("temporal_decay_matrix", [](int n, double g) { return matrix_to_numpy(temporal_decay_matrix(n, g)); },
        py::arg("length"), py::arg("gamma"));
  m.def("spatial_decay_matrix", [](int h, int w, double g) { return matrix_to_numpy(spatial_decay_matrix(h, w, g)); },
        py::arg("height"), py::arg("width"), py::arg("gamma"));
  m.def(
      "axial_decay_matrices",
      [](int h, int w, double g) {
        const AxialDecay a = axial_decay_matrices(h, w, g);
        return py::make_tuple(matrix_to_numpy(a.h), matrix_to_numpy(a.w));
      },
      py::arg("height"), py::arg("width"), py::arg("gamma"));

  // --- geometry and losses -----------------------------------------------------------
  m.def("iou_2d", [](std::array<double, 4> a, std::array<double, 4> b) { return iou_2d(box2(a), box2(b)); });
  m.def("iou_3d", [](std::array<double, 6> a, std::array<double, 6> b) { return iou_3d(box3(a), box3(b)); });
  m.def(
      "ciou_loss",
      [](std::array<double, 4> pred, std::array<double, 4> gt) {
        const auto p = ciou_loss(box2(pred), box2(gt));
        py::dict d;
        d["iou"] = p.iou;
        d["l_iou"] = p.l_iou;
        d["l_ncent"] = p.l_ncent;
        d["l_aspect"] = p.l_aspect;
        d["alpha"] = p.alpha;
        d["loss"] = p.loss;
        return d;
      },
      py::arg("pred"), py::arg("gt"));
  m.def("center_loss", [](std::array<double, 4> a, std::array<double, 4> b) { return center_loss(box2(a), box2(b)); });
  m.def("dfl_decode", [](std::vector<double> p) { return dfl_decode(p); }, py::arg("probs"));
  m.def("dfl_loss", [](std::vector<double> p, double y) { return dfl_loss(p, y); }, py::arg("probs"), py::arg("y"));
  m.def(
      "focal_loss", [](double p, int y, double alpha, double gamma, double w) { return focal_loss(p, y, {alpha, gamma}, w); },
      py::arg("p"), py::arg("y"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0, py::arg("w") = 1.0);
  m.def("smooth_l1", &smooth_l1, py::arg("p"), py::arg("y"));
  m.def("alignment_metric",
        [](double c, double l, double alpha, double beta) { return alignment_metric(c, l, AssignConfig{alpha, beta}); },
        py::arg("c"), py::arg("l"), py::arg("alpha") = 1.0, py::arg("beta") = 6.0);

  // --- detections -------------------------------------------------------------------
  py::class_<Detection>(m, "Detection")
      .def(py::init([](std::array<double, 6> box, int cls, double score, double obj) {
             Detection d;
             d.box = box3(box);
             d.class_id = cls;
             d.class_score = score;
             d.objectness = obj;
             return d;
           }),
           py::arg("box"), py::arg("class_id"), py::arg("class_score"), py::arg("objectness") = 1.0)
      .def_property(
          "box", [](const Detection& d) { return box_tuple(d.box); },
          [](Detection& d, std::array<double, 6> b) { d.box = box3(b); })
      .def_readwrite("class_id", &Detection::class_id)
      .def_readwrite("class_score", &Detection::class_score)
      .def_readwrite("objectness", &Detection::objectness)
      .def_readwrite("level", &Detection::level)
      .def("__repr__", [](const Detection& d) {
        return "Detection(class_id=" + std::to_string(d.class_id) + ", class_score=" + std::to_string(d.class_score) + ")";
      });

  m.def("class_nms", [](std::vector<Detection> d, double thr) { return class_nms(std::move(d), thr); },
        py::arg("dets"), py::arg("iou_thr") = 0.3);
  m.def("la_nms", [](std::vector<Detection> d, double thr) { return la_nms(std::move(d), thr); }, py::arg("dets"),
        py::arg("thr") = 0.1);

  // --- evaluation -----------------------------------------------------------------------
  m.def("average_precision", &average_precision, py::arg("tp"), py::arg("num_gt"));
  m.def(
      "mean_ap",
      [](const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation3D>>& gts,
         int num_classes, std::vector<double> thresholds, const std::string& mode) {
        const EvalMode em = mode == "3d" ? EvalMode::k3d : mode == "ra" ? EvalMode::kRa
                            : mode == "rd" ? EvalMode::kRd
                                           : throw std::invalid_argument("mode must be '3d', 'ra' or 'rd'");
        const ApTable t = mean_ap(dets, gts, num_classes, thresholds, em);
        py::dict d;
        d["ap"] = t.ap;
        d["map_at"] = t.map_at;
        d["map"] = t.map;
        return d;
      },
      py::arg("dets"), py::arg("gts"), py::arg("num_classes"), py::arg("thresholds"), py::arg("mode") = "3d");

  // --- schedule ----------------------------------------------------------------------------
  m.def(
      "lr_at",
      [](int step, int total, double lr_init, double lr_min, double warmup_ratio) {
        TrainConfig c;
        c.lr_init = lr_init;
        c.lr_min = lr_min;
        c.warmup_ratio = warmup_ratio;
        return lr_at(step, total, c);
      },
      py::arg("step"), py::arg("total_steps"), py::arg("lr_init") = 1e-3, py::arg("lr_min") = 1e-5,
      py::arg("warmup_ratio") = 0.05);

  m.def("resolve_config", [](const std::string& json) { return run_config_to_json(run_config_from_json(json)); },
        py::arg("json") = "{}");

  // --- model ------------------------------------------------------------------------------
  py::class_<Detector>(m, "Detector")
      .def(py::init([](const std::string& json) { return std::make_unique<Detector>(model_config_from_json(json)); }),
           py::arg("model_json") = "{}")
      .def_static("desk", [] { return std::make_unique<Detector>(ModelConfig::desk()); })
      .def_static("load", [](const std::filesystem::path& p) { return std::move(load_checkpoint(p).model); })
      .def("save", [](const Detector& d, const std::filesystem::path& p) { save_checkpoint(p, d); })
      .def_property_readonly("num_params", &Detector::num_params)
      .def_property_readonly("config_json", [](const Detector& d) { return model_config_to_json(d.config()); })
      .def(
          "detect",
          [](Detector& d, const Array3f& cube, double score_thr, double class_nms_thr, double la_thr) {
            PostprocessConfig post;
            post.score_thr = score_thr;
            post.class_nms_thr = class_nms_thr;
            post.la_thr = la_thr;
            const FrameRecord f{"frame", cube_from_numpy(cube), {}};
            py::gil_scoped_release release;
            return detect(d, f, post);
          },
          py::arg("cube"), py::arg("score_thr") = 0.3, py::arg("class_nms_thr") = 0.3, py::arg("la_thr") = 0.1)
      .def(
          "train",
          [](Detector& d, const std::string& run_json,
             const std::vector<std::tuple<std::string, Array3f, std::vector<Annotation3D>>>& frames) {
            RunConfig cfg = run_config_from_json(run_json);
            cfg.model = d.config();
            cfg.out_dir.clear();
            std::vector<FrameRecord> recs;
            for (const auto& [id, cube, anns] : frames) recs.push_back(make_frame(cube, anns, id));
            std::vector<double> totals;
            {
              py::gil_scoped_release release;
              for (const auto& s : train_model(d, cfg, recs, {}).log) totals.push_back(s.loss.total);
            }
            return totals;
          },
          py::arg("run_json"), py::arg("frames"), "Trains in place and returns the per-step total loss.");
}
