#include "transrad/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "json.hpp"
#include "transrad/checkpoint.hpp"
#include "transrad/errors.hpp"

namespace transrad {

bool deterministic_from_env() {
  const char* v = std::getenv("TRANSRAD_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

double lr_at(int step, int total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw std::invalid_argument("lr_at: total_steps must be >= 1");
  step = std::clamp(step, 0, total_steps);
  const double warm = cfg.warmup_ratio * total_steps;
  if (step < warm) return cfg.lr_init * step / warm;
  const double span = total_steps - warm;
  if (span <= 0.0) return cfg.lr_min;
  const double progress = (step - warm) / span;
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void ema_update(std::span<double> ema, std::span<const double> model, double decay) {
  if (ema.size() != model.size()) throw std::invalid_argument("ema_update: size mismatch");
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * model[i];
}

Adam::Adam(double beta1, double beta2, double eps, double weight_decay)
    : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

void Adam::step(const std::vector<ad::Tensor>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor p = params[k];
    if (!p.has_grad()) continue;
    auto w = p.values_mut();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + wd_ * w[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

ModelEma::ModelEma(const Detector& model, double decay, double tau)
    : ema_(std::make_unique<Detector>(model.config())), decay_(decay), tau_(tau) {
  copy_weights(model, *ema_);
}

double ModelEma::current_decay() const {
  if (tau_ <= 0.0) return decay_;
  return decay_ * (1.0 - std::exp(-static_cast<double>(updates_) / tau_));
}

void ModelEma::update(const Detector& model) {
  ++updates_;
  const double d = current_decay();
  const auto src = model.params();
  const auto dst = ema_->params();
  for (std::size_t i = 0; i < src.entries().size(); ++i) {
    ema_update(ad::Tensor(dst.entries()[i].tensor).values_mut(), src.entries()[i].tensor.values(), d);
  }
}

FrameRecord to_model_frame(const FrameRecord& frame, int model_doppler) {
  const int src = frame.cube.shape().doppler;
  if (src == model_doppler) return frame;
  FrameRecord out{frame.frame_id, resize_doppler(frame.cube, model_doppler), {}};
  for (const auto& a : frame.annotations) out.annotations.push_back(rescale_annotation(a, src, model_doppler));
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void hash_split(const std::vector<FrameRecord>& all, double val_fraction, std::vector<FrameRecord>& train,
                std::vector<FrameRecord>& val) {
  train.clear();
  val.clear();
  const auto cut = static_cast<std::uint64_t>(val_fraction * 10000.0);
  for (const auto& f : all) {
    if (fnv1a(f.frame_id) % 10000 < cut) {
      val.push_back(f);
    } else {
      train.push_back(f);
    }
  }
  if (train.empty() && !val.empty()) {
    train.push_back(val.back());
    val.pop_back();
  }
}

// ---------------------------------------------------------------------------

namespace {

void put(std::string& s, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  s.append(buf, r.ptr);
}

}  // namespace

std::string loss_log_header() {
  std::string h = "step,lr,total";
  for (int k = 0; k < kNumLossTerms; ++k) h += std::string(",") + loss_term_name(k);
  return h + ",num_pos";
}

std::string loss_log_line(const StepLog& s) {
  std::string line = std::to_string(s.step) + ",";
  put(line, s.lr);
  line += ',';
  put(line, s.loss.total);
  for (double c : s.loss.components) {
    line += ',';
    put(line, c);
  }
  return line + "," + std::to_string(s.loss.num_positives);
}

namespace {

struct Batch {
  ad::Tensor input;
  std::vector<std::vector<Annotation3D>> anns;
  std::vector<double> class_weights;
};

Batch make_batch(const std::vector<FrameRecord>& frames, const std::vector<int>& idx, int num_classes,
                 double input_scale, double w_min) {
  Batch b;
  std::vector<const RadCube*> cubes;
  ClassWeightConfig cw;
  cw.w_min = w_min;
  cw.counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (int i : idx) {
    cubes.push_back(&frames[static_cast<std::size_t>(i)].cube);
    b.anns.push_back(frames[static_cast<std::size_t>(i)].annotations);
    for (const auto& a : b.anns.back()) cw.counts[static_cast<std::size_t>(a.class_id)] += 1;
  }
  b.input = cubes_to_input(cubes, input_scale);
  const bool any = std::any_of(cw.counts.begin(), cw.counts.end(), [](std::int64_t c) { return c > 0; });
  b.class_weights = any ? compute_class_weights(cw) : std::vector<double>(static_cast<std::size_t>(num_classes),
                                                                           1.0 / num_classes);
  return b;
}

// Bounded producer/consumer queue of prepared batches.
class Prefetcher {
 public:
  Prefetcher(std::function<Batch(int)> make, int count, int depth)
      : make_(std::move(make)), count_(count), depth_(std::max(depth, 1)) {
    worker_ = std::thread([this] { run(); });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  Batch next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  void run() {
    for (int i = 0; i < count_; ++i) {
      Batch b;
      try {
        b = make_(i);
      } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
        return;
      }
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return static_cast<int>(queue_.size()) < depth_ || stop_; });
      if (stop_) return;
      queue_.push_back(std::move(b));
      cv_.notify_all();
    }
  }

  std::function<Batch(int)> make_;
  int count_, depth_;
  std::deque<Batch> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

}  // namespace

TrainResult train(const RunConfig& cfg, const std::vector<FrameRecord>& train_frames,
                  const std::vector<FrameRecord>& val_frames, const TrainHooks& hooks) {
  cfg.validate();
  Detector model(cfg.model);
  return train_model(model, cfg, train_frames, val_frames, hooks);
}

TrainResult train_model(Detector& model, const RunConfig& cfg_in, const std::vector<FrameRecord>& train_native,
                        const std::vector<FrameRecord>& val_frames, const TrainHooks& hooks) {
  RunConfig cfg = cfg_in;
  if (deterministic_from_env()) cfg.train.deterministic = true;
  if (cfg.train.phase2) cfg.loss.weights.apply_phase2();
  cfg.validate();
  if (train_native.empty()) throw DataError("training set is empty");

  const ModelConfig& mc = model.config();
  const int model_d = mc.backbone.input_channels;
  std::vector<FrameRecord> frames;
  for (const auto& f : train_native) {
    if (f.cube.shape().range != mc.input_width || f.cube.shape().azimuth != mc.input_height) {
      throw DataError("frame " + f.frame_id + " does not match the model input size");
    }
    frames.push_back(to_model_frame(f, model_d));
    for (const auto& a : frames.back().annotations) {
      if (a.class_id < 0 || a.class_id >= mc.head.num_classes) throw DataError("frame " + f.frame_id + ": bad class id");
    }
  }

  const TrainConfig& tc = cfg.train;
  const int n = static_cast<int>(frames.size());
  const int per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int total_steps = tc.max_steps > 0 ? tc.max_steps : tc.epochs * per_epoch;
  const int epochs = (total_steps + per_epoch - 1) / per_epoch;

  // The whole batch schedule is fixed up front so that prefetching cannot
  // change the order.
  std::vector<std::vector<int>> schedule;
  for (int e = 0; e < epochs && static_cast<int>(schedule.size()) < total_steps; ++e) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (tc.shuffle) {
      std::mt19937_64 rng(tc.seed * 1000003ull + static_cast<std::uint64_t>(e));
      for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      }
    }
    for (int s = 0; s < n && static_cast<int>(schedule.size()) < total_steps; s += tc.batch_size) {
      schedule.emplace_back(order.begin() + s, order.begin() + std::min(n, s + tc.batch_size));
    }
  }

  auto make = [&](int step) {
    return make_batch(frames, schedule[static_cast<std::size_t>(step)], mc.head.num_classes, mc.input_scale,
                      tc.class_weight_min);
  };
  std::unique_ptr<Prefetcher> prefetch;
  if (!tc.deterministic && tc.prefetch > 0) prefetch = std::make_unique<Prefetcher>(make, total_steps, tc.prefetch);

  const auto learnable = model.params().learnable();
  Adam opt(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
  std::unique_ptr<ModelEma> ema;
  if (tc.use_ema) ema = std::make_unique<ModelEma>(model, tc.ema_decay, tc.ema_tau);

  TrainResult res;
  const std::filesystem::path out_dir = cfg.out_dir;
  std::ofstream log_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log_file.open(out_dir / "loss_log.csv");
    if (!log_file) throw DataError("cannot write " + (out_dir / "loss_log.csv").string());
    log_file << loss_log_header() << "\n";
  }
  const std::string meta_names = nlohmann::json(cfg.eval.class_names).dump();
  auto meta = [&](int step, double map) {
    return std::string("{\"step\":") + std::to_string(step) + ",\"map3d_030\":" + std::to_string(map) +
           ",\"class_names\":" + meta_names + "}";
  };

  LossConfig loss_cfg = cfg.loss;
  for (int step = 0; step < total_steps; ++step) {
    Batch batch = prefetch ? prefetch->next() : make(step);
    const double lr = lr_at(step, total_steps, tc);

    HeadOutputs out = model.forward(batch.input, true);
    const int bsz = batch.input.dim(0);
    std::vector<RawPredictions> raws;
    std::vector<AssignmentResult> assigns;
    for (int i = 0; i < bsz; ++i) {
      raws.push_back(extract_frame(out, i, mc.head));
      assigns.push_back(tal_assign(make_candidates(raws.back()), batch.anns[static_cast<std::size_t>(i)], cfg.assign));
    }
    std::vector<RawPredictions> grads;
    const LossBreakdown lb = total_loss(raws, assigns, loss_cfg, batch.class_weights, model_d, &grads);
    if (!std::isfinite(lb.total)) throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step));
    std::vector<std::vector<double>> buffers;
    for (int i = 0; i < bsz; ++i) scatter_frame_grads(grads[static_cast<std::size_t>(i)], i, bsz, buffers);

    for (const auto& p : learnable) p.zero_grad();
    ad::external_loss(prediction_tensors(out), lb.total, std::move(buffers)).backward();
    opt.step(learnable, lr);
    if (ema) ema->update(model);

    StepLog sl{step + 1, lr, lb};
    res.log.push_back(sl);
    if (log_file) log_file << loss_log_line(sl) << "\n";
    if (hooks.on_step) hooks.on_step(sl);
    if (hooks.progress && (step % 10 == 0 || step + 1 == total_steps)) {
      *hooks.progress << "step " << sl.step << "/" << total_steps << "  lr " << lr << "  loss " << lb.total
                      << "  pos " << lb.num_positives << std::endl;
    }

    const bool epoch_end = (step + 1) % per_epoch == 0 || step + 1 == total_steps;
    const int epoch = step / per_epoch + 1;
    if (epoch_end && tc.eval_every > 0 && !val_frames.empty() &&
        (epoch % tc.eval_every == 0 || step + 1 == total_steps)) {
      Detector& eval_model = ema ? ema->model() : model;
      const Evaluation ev = evaluate(eval_model, val_frames, cfg.post, cfg.eval);
      const double m = headline_map(ev.report);
      if (hooks.progress) *hooks.progress << "epoch " << epoch << "  val 3D mAP@0.3 " << m << std::endl;
      if (m > res.best_map) {
        res.best_map = m;
        if (!cfg.out_dir.empty()) {
          res.best_checkpoint = out_dir / "best.ckpt";
          save_checkpoint(res.best_checkpoint, eval_model, meta(step + 1, m));
        }
      }
    }
  }
  res.steps = total_steps;
  if (ema) copy_weights(ema->model(), model);
  if (!cfg.out_dir.empty()) {
    res.last_checkpoint = out_dir / "last.ckpt";
    save_checkpoint(res.last_checkpoint, model, meta(total_steps, res.best_map));
    if (res.best_checkpoint.empty()) {
      res.best_checkpoint = out_dir / "best.ckpt";
      save_checkpoint(res.best_checkpoint, model, meta(total_steps, res.best_map));
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

RawPredictions predict(Detector& model, const FrameRecord& frame) {
  const ModelConfig& mc = model.config();
  const CubeShape s = frame.cube.shape();
  if (s.range != mc.input_width || s.azimuth != mc.input_height) {
    throw DataError("frame " + frame.frame_id + " is " + std::to_string(s.range) + "x" + std::to_string(s.azimuth) +
                    ", model expects " + std::to_string(mc.input_width) + "x" + std::to_string(mc.input_height));
  }
  ad::NoGradGuard guard;
  const RadCube cube = s.doppler == mc.backbone.input_channels ? frame.cube
                                                               : resize_doppler(frame.cube, mc.backbone.input_channels);
  const HeadOutputs out = model.forward(cubes_to_input({&cube}, mc.input_scale), false);
  return extract_frame(out, 0, mc.head);
}

std::vector<Detection> detect(Detector& model, const FrameRecord& frame, const PostprocessConfig& post) {
  const ModelConfig& mc = model.config();
  const CubeShape native = frame.cube.shape();
  const CubeShape model_shape{native.range, native.azimuth, mc.backbone.input_channels};
  std::vector<Detection> dets = postprocess_pipeline(predict(model, frame), model_shape, post);
  const double k = static_cast<double>(native.doppler) / model_shape.doppler;
  for (auto& d : dets) {
    d.box.z1 *= k;
    d.box.z2 *= k;
  }
  return dets;
}

double headline_map(const EvalReport& r) {
  const auto& th = r.d3.thresholds;
  for (std::size_t i = 0; i < th.size(); ++i) {
    if (std::abs(th[i] - 0.3) < 1e-12) return r.d3.map_at[i];
  }
  return r.d3.map_at.empty() ? 0.0 : r.d3.map_at.front();
}

Evaluation evaluate(Detector& model, const std::vector<FrameRecord>& frames, const PostprocessConfig& post,
                    const EvalConfig& eval) {
  Evaluation ev;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation3D>> gts;
  for (const auto& f : frames) {
    dets.push_back(detect(model, f, post));
    gts.push_back(f.annotations);
    ev.detections.push_back({f.frame_id, dets.back()});
  }
  ev.report = evaluate_detections(dets, gts, model.config().head.num_classes, eval);
  return ev;
}

BenchResult bench(Detector& model, int frames, int warmup, std::uint64_t seed) {
  if (frames < 1 || warmup < 0) throw std::invalid_argument("bench: frames must be >= 1 and warmup >= 0");
  const ModelConfig& mc = model.config();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  FrameRecord f;
  f.frame_id = "bench";
  f.cube = RadCube({mc.input_width, mc.input_height, mc.backbone.input_channels});
  for (float& v : f.cube.values()) v = u(rng);
  PostprocessConfig post;
  std::vector<double> ms;
  for (int i = 0; i < warmup + frames; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)detect(model, f, post);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  BenchResult r;
  r.frames = frames;
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / ms.size();
  r.median_ms = ms[ms.size() / 2];
  r.p90_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.9 * ms.size())) - 1)];
  r.min_ms = ms.front();
  r.max_ms = ms.back();
  r.params = model.num_params();
  return r;
}

}  // namespace transrad
