// transrad command-line tool: train, eval, detect, synth, bench, config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "transrad/checkpoint.hpp"
#include "transrad/config.hpp"
#include "transrad/errors.hpp"
#include "transrad/plot.hpp"
#include "transrad/trainer.hpp"

namespace fs = std::filesystem;
using namespace transrad;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

std::vector<std::string> names_from_meta(const std::string& extra, int num_classes) {
  const auto j = nlohmann::json::parse(extra);
  if (j.contains("class_names")) {
    auto names = j.at("class_names").get<std::vector<std::string>>();
    if (static_cast<int>(names.size()) == num_classes) return names;
  }
  auto names = default_class_names();
  if (static_cast<int>(names.size()) == num_classes) return names;
  return {};
}

// A directory holding .rad files directly, or a dataset root with a test/ split.
fs::path resolve_split(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("no such data directory: " + dir.string());
  if (!list_frame_ids(dir).empty()) return dir;
  for (const char* split : {"test", "val", "train"}) {
    if (fs::is_directory(dir / split) && !list_frame_ids(dir / split).empty()) return dir / split;
  }
  throw DataError("no frames found under " + dir.string());
}

int cmd_train(const std::string& config_path, bool phase2) {
  RunConfig cfg = load_run_config(config_path);
  if (phase2) cfg.train.phase2 = true;
  const fs::path root = cfg.data.root;
  const int nc = cfg.model.head.num_classes;
  std::vector<FrameRecord> all = load_frames(root / cfg.data.train_split, nc);
  if (all.empty()) throw DataError("no training frames in " + (root / cfg.data.train_split).string());
  std::vector<FrameRecord> train_frames, val_frames;
  const fs::path val_dir = root / cfg.data.val_split;
  if (!cfg.data.val_split.empty() && fs::is_directory(val_dir) && !list_frame_ids(val_dir).empty()) {
    train_frames = std::move(all);
    val_frames = load_frames(val_dir, nc);
  } else {
    hash_split(all, cfg.data.val_fraction, train_frames, val_frames);
  }
  std::cerr << "train frames " << train_frames.size() << ", validation frames " << val_frames.size() << "\n";
  TrainHooks hooks;
  hooks.progress = &std::cerr;
  const TrainResult r = train(cfg, train_frames, val_frames, hooks);
  std::cout << "steps " << r.steps << "\n";
  if (!r.log.empty()) std::cout << "final loss " << r.log.back().loss.total << "\n";
  std::cout << "best 3D mAP@0.3 " << r.best_map << "\n";
  std::cout << "last checkpoint " << r.last_checkpoint.string() << "\n";
  std::cout << "best checkpoint " << r.best_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const PostprocessConfig& post, const std::string& out) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  const int nc = lc.model->config().head.num_classes;
  const auto frames = load_frames(resolve_split(data), nc);
  EvalConfig ec;
  ec.class_names = names_from_meta(lc.extra_json, nc);
  const Evaluation ev = evaluate(*lc.model, frames, post, ec);
  write_report_text(std::cout, ev.report, ec.class_names);
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream txt(fs::path(out) / "results.txt");
    write_report_text(txt, ev.report, ec.class_names);
    std::ofstream kv(fs::path(out) / "results.kv");
    write_report_kv(kv, ev.report, ec.class_names);
    save_detections(fs::path(out) / "detections.txt", ev.detections);
    std::cerr << "wrote " << out << "/results.txt, results.kv, detections.txt\n";
  }
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& frame, const std::string& data, const PostprocessConfig& post,
               const std::string& plot, const std::string& out) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  const int nc = lc.model->config().head.num_classes;
  FrameRecord rec;
  const fs::path as_file(frame);
  if (fs::is_regular_file(as_file)) {
    rec.frame_id = as_file.stem().string();
    rec.cube = load_cube(as_file);
    const fs::path ann = fs::path(as_file).replace_extension(".ann");
    if (fs::is_regular_file(ann)) rec.annotations = load_annotations(ann);
  } else {
    rec = load_frame(resolve_split(data), frame, nc);
  }
  const auto dets = detect(*lc.model, rec, post);
  const std::vector<FrameDetections> dump{{rec.frame_id, dets}};
  write_detections(std::cout, dump);
  if (!out.empty()) save_detections(out, dump);
  if (!plot.empty()) {
    write_png(plot, render_frame(rec.cube, dets, rec.annotations));
    std::cerr << "wrote " << plot << "\n";
  }
  return 0;
}

int cmd_synth(const std::string& out, int frames, std::uint64_t seed, const std::string& split, CubeShape shape,
              int targets, double noise) {
  if (frames < 1) throw ConfigError("synth: --frames must be >= 1");
  if (shape.range < 1 || shape.azimuth < 1 || shape.doppler < 1) throw ConfigError("synth: cube dims must be >= 1");
  const SceneSpec spec = SceneSpec::default_for(shape, targets, noise);
  std::vector<FrameRecord> recs;
  for (int i = 0; i < frames; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "frame_%06d", i);
    recs.push_back(synth_frame(seed * 1000003ull + static_cast<std::uint64_t>(i), spec, id));
  }
  save_labels(out, default_class_names());
  save_frames(recs, fs::path(out) / split);
  std::cout << "wrote " << frames << " frames to " << (fs::path(out) / split).string() << "\n";
  return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& config, int frames, int warmup) {
  std::unique_ptr<Detector> model;
  if (!ckpt.empty()) {
    model = std::move(load_checkpoint(ckpt).model);
  } else if (!config.empty()) {
    model = std::make_unique<Detector>(load_run_config(config).model);
  } else {
    throw ConfigError("bench: pass --ckpt or --config");
  }
  const BenchResult r = bench(*model, frames, warmup, 0);
  std::cout << std::fixed << std::setprecision(3) << "frames " << r.frames << "\nmean_ms " << r.mean_ms
            << "\nmedian_ms " << r.median_ms << "\np90_ms " << r.p90_ms << "\nmin_ms " << r.min_ms << "\nmax_ms "
            << r.max_ms << "\nparams " << r.params << "\n";
  return 0;
}

void add_post_options(CLI::App* app, PostprocessConfig& post, bool& iou_2d) {
  app->add_option("--score-thr", post.score_thr, "Minimum objectness x class score")->capture_default_str();
  app->add_option("--class-nms-thr", post.class_nms_thr, "IoU threshold of class-wise NMS")->capture_default_str();
  app->add_option("--la-thr", post.la_thr, "IoU threshold of location-aware NMS")->capture_default_str();
  app->add_flag("--nms-2d", iou_2d, "Use RA-plane IoU inside both NMS stages");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransRAD radar detector"};
  app.require_subcommand(1);

  std::string config, ckpt, data = "data", frame, plot, out;
  bool phase2 = false, iou_2d = false;
  int frames = 8, warmup = 2, targets = 2;
  std::uint64_t seed = 0;
  std::string split = "train";
  CubeShape shape{256, 256, 64};
  double noise = 0.05;
  PostprocessConfig post;

  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config, "Config file")->required();
  train->add_flag("--phase2", phase2, "Use the second-round objectness/classification weights");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data, "Split directory or dataset root")->required();
  eval->add_option("--out", out, "Directory for results.txt, results.kv and detections.txt");
  add_post_options(eval, post, iou_2d);

  auto* det = app.add_subcommand("detect", "Detect objects in one frame");
  det->add_option("--ckpt", ckpt, "Checkpoint")->required();
  det->add_option("--frame", frame, "Frame id (looked up under --data) or .rad file")->required();
  det->add_option("--data", data, "Split directory or dataset root")->capture_default_str();
  det->add_option("--plot", plot, "Write RA/RD heatmaps with boxes to this PNG");
  det->add_option("--out", out, "Also write the detection dump to this file");
  add_post_options(det, post, iou_2d);

  auto* syn = app.add_subcommand("synth", "Generate synthetic RAD frames");
  syn->add_option("--out", out, "Dataset root")->required();
  syn->add_option("--frames", frames, "Number of frames")->required();
  syn->add_option("--seed", seed, "Random seed")->required();
  syn->add_option("--split", split, "Split subdirectory")->capture_default_str();
  syn->add_option("--range", shape.range, "Range bins")->capture_default_str();
  syn->add_option("--azimuth", shape.azimuth, "Azimuth bins")->capture_default_str();
  syn->add_option("--doppler", shape.doppler, "Doppler bins")->capture_default_str();
  syn->add_option("--targets", targets, "Targets per frame")->capture_default_str();
  syn->add_option("--noise", noise, "Uniform background noise level")->capture_default_str();

  auto* ben = app.add_subcommand("bench", "Per-frame inference latency");
  ben->add_option("--ckpt", ckpt, "Checkpoint");
  ben->add_option("--config", config, "Config file (untrained weights) instead of a checkpoint");
  ben->add_option("--frames", frames, "Timed frames")->capture_default_str();
  ben->add_option("--warmup", warmup, "Untimed warmup frames")->capture_default_str();

  std::string preset;
  auto* show = app.add_subcommand("config", "Print the fully resolved configuration");
  show->add_option("--config", config, "Config file");
  show->add_option("--preset", preset, "Built-in preset: default or overfit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  if (iou_2d) post.iou_mode = NmsIou::kRa2d;

  try {
    if (*train) return cmd_train(config, phase2);
    if (*eval) return cmd_eval(ckpt, data, post, out);
    if (*det) return cmd_detect(ckpt, frame, data, post, plot, out);
    if (*syn) return cmd_synth(out, frames, seed, split, shape, targets, noise);
    if (*ben) return cmd_bench(ckpt, config, frames, warmup);
    if (*show) {
      const std::string text = !config.empty() ? run_config_to_json(load_run_config(config))
                               : preset.empty() ? run_config_to_json(run_config_from_json("{}"))
                                                : run_config_to_json(run_config_from_json("{\"preset\":\"" + preset + "\"}"));
      std::cout << text << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const GenerationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
