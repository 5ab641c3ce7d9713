#pragma once

// Training loop, evaluation, detection and benchmarking on top of the model.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "transrad/config.hpp"
#include "transrad/evalmetrics.hpp"
#include "transrad/losses.hpp"
#include "transrad/postprocess.hpp"
#include "transrad/raddata.hpp"

namespace transrad {

// True when TRANSRAD_DETERMINISTIC=1 is set in the environment.
bool deterministic_from_env();

// Linear warmup 0 -> lr_init over warmup_ratio * total_steps, then cosine
// down to lr_min at total_steps.
double lr_at(int step, int total_steps, const TrainConfig& cfg);

// ema <- decay * ema + (1 - decay) * model
void ema_update(std::span<double> ema, std::span<const double> model, double decay);

class Adam {
 public:
  Adam(double beta1, double beta2, double eps, double weight_decay);
  void step(const std::vector<ad::Tensor>& params, double lr);
  long long steps() const { return t_; }

 private:
  double b1_, b2_, eps_, wd_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// EMA over every tensor of a model (parameters and normalization buffers).
class ModelEma {
 public:
  ModelEma(const Detector& model, double decay, double tau);
  void update(const Detector& model);
  double current_decay() const;
  Detector& model() { return *ema_; }

 private:
  std::unique_ptr<Detector> ema_;
  double decay_, tau_;
  long long updates_ = 0;
};

// Frames at the model's Doppler length, annotations rescaled to match.
FrameRecord to_model_frame(const FrameRecord& frame, int model_doppler);

// Deterministic 80/20-style split by FNV-1a hash of the frame id.
void hash_split(const std::vector<FrameRecord>& all, double val_fraction, std::vector<FrameRecord>& train,
                std::vector<FrameRecord>& val);

struct StepLog {
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};
std::string loss_log_header();
std::string loss_log_line(const StepLog& s);

struct TrainResult {
  std::vector<StepLog> log;
  std::filesystem::path best_checkpoint, last_checkpoint;
  double best_map = -1.0;
  int steps = 0;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::ostream* progress = nullptr;
};

// Runs the optimization on frames at native resolution. Writes last.ckpt,
// best.ckpt and loss_log.csv under cfg.out_dir (when non-empty).
TrainResult train(const RunConfig& cfg, const std::vector<FrameRecord>& train_frames,
                  const std::vector<FrameRecord>& val_frames, const TrainHooks& hooks = {});
TrainResult train_model(Detector& model, const RunConfig& cfg, const std::vector<FrameRecord>& train_frames,
                        const std::vector<FrameRecord>& val_frames, const TrainHooks& hooks = {});

// Head outputs of one native frame (Doppler resized for the model).
RawPredictions predict(Detector& model, const FrameRecord& frame);
// Detections of one native frame, with Doppler coordinates mapped back to the
// frame's own Doppler length.
std::vector<Detection> detect(Detector& model, const FrameRecord& frame, const PostprocessConfig& post);

struct Evaluation {
  EvalReport report;
  std::vector<FrameDetections> detections;
};
Evaluation evaluate(Detector& model, const std::vector<FrameRecord>& frames, const PostprocessConfig& post,
                    const EvalConfig& eval);
// 3D mAP at IoU 0.3, or at the first 3D threshold when 0.3 is not in the grid.
double headline_map(const EvalReport& r);

struct BenchResult {
  int frames = 0;
  double mean_ms = 0, median_ms = 0, p90_ms = 0, min_ms = 0, max_ms = 0;
  std::int64_t params = 0;
};
BenchResult bench(Detector& model, int frames, int warmup, std::uint64_t seed);

}  // namespace transrad
