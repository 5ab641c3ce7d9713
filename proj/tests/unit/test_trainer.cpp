#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "doctest.h"
#include "scenes.hpp"
#include "transrad/checkpoint.hpp"
#include "transrad/config.hpp"
#include "transrad/errors.hpp"
#include "transrad/trainer.hpp"

using namespace transrad;
namespace fs = std::filesystem;

namespace {

RunConfig short_run(int steps) {
  RunConfig cfg = scenes::overfit_config();
  cfg.train.max_steps = steps;
  cfg.train.batch_size = 4;
  cfg.train.use_ema = true;
  cfg.train.ema_tau = 2.0;
  cfg.train.deterministic = false;
  return cfg;
}

std::vector<std::string> log_lines(const TrainResult& r) {
  std::vector<std::string> out;
  for (const auto& s : r.log) out.push_back(loss_log_line(s));
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TRANSRAD_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_SUITE("trainer_cli") {

TEST_CASE("learning rate schedule endpoints") {
  const TrainConfig cfg;
  const int total = 1000, warm = 50;
  CHECK(lr_at(0, total, cfg) == 0.0);
  CHECK(lr_at(warm, total, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(total, total, cfg) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(warm / 2, total, cfg) == doctest::Approx(0.5e-3));
  CHECK(std::abs(lr_at(warm + 1, total, cfg) - lr_at(warm, total, cfg)) < 1e-6);
  CHECK(std::abs(lr_at(warm - 1, total, cfg) - lr_at(warm, total, cfg)) < 3e-5);
  for (int s = warm; s < total; ++s) CHECK(lr_at(s + 1, total, cfg) <= lr_at(s, total, cfg));
}

TEST_CASE("EMA update rule") {
  std::vector<double> ema{1.0, -2.0, 3.0};
  const std::vector<double> model{0.5, 0.5, 0.5};
  ema_update(ema, model, 1.0);
  CHECK(ema == std::vector<double>{1.0, -2.0, 3.0});
  ema_update(ema, model, 0.0);
  CHECK(ema == model);

  std::vector<double> e{0.0};
  const std::vector<double> target{2.0};
  for (int i = 1; i <= 20; ++i) {
    ema_update(e, target, 0.5);
    CHECK(e[0] == doctest::Approx(2.0 * (1.0 - std::pow(0.5, i))));
  }
}

TEST_CASE("hash split is deterministic and disjoint") {
  const auto frames = scenes::overfit_frames();
  std::vector<FrameRecord> a_train, a_val, b_train, b_val;
  hash_split(frames, 0.25, a_train, a_val);
  hash_split(frames, 0.25, b_train, b_val);
  CHECK(a_train == b_train);
  CHECK(a_val == b_val);
  CHECK(a_train.size() + a_val.size() == frames.size());
  for (const auto& v : a_val)
    for (const auto& t : a_train) CHECK(v.frame_id != t.frame_id);
}

TEST_CASE("frames are resized to the model's Doppler length") {
  const auto frames = scenes::overfit_frames();
  const FrameRecord f = to_model_frame(frames[0], 64);
  CHECK(f.cube.shape().doppler == 64);
  CHECK(f.annotations[0].center[2] == doctest::Approx(frames[0].annotations[0].center[2] * 4));
  CHECK(f.annotations[0].center[0] == frames[0].annotations[0].center[0]);
}

TEST_CASE("prefetched and inline loading train identically") {
  const auto frames = scenes::overfit_frames();
  RunConfig a = short_run(6);
  a.train.prefetch = 3;
  RunConfig b = a;
  b.train.prefetch = 0;
  const auto la = log_lines(train(a, frames, {}));
  const auto lb = log_lines(train(b, frames, {}));
  REQUIRE(la.size() == 6);
  CHECK(la == lb);
  for (const auto& s : train(a, frames, {}).log) CHECK(std::isfinite(s.loss.total));
}

TEST_CASE("training writes checkpoints that restore the model exactly") {
  scenes::TempDir dir("trainer_ckpt");
  const auto frames = scenes::overfit_frames();
  RunConfig cfg = short_run(3);
  cfg.out_dir = dir.path().string();
  cfg.train.eval_every = 1;
  cfg.train.epochs = 1;
  const TrainResult r = train(cfg, frames, {frames[0], frames[1]});
  CHECK(fs::exists(r.last_checkpoint));
  CHECK(fs::exists(r.best_checkpoint));
  CHECK(fs::exists(dir.path() / "loss_log.csv"));
  CHECK(r.best_map >= 0.0);

  Detector model(cfg.model);
  train_model(model, short_run(2), frames, {});
  save_checkpoint(dir.path() / "m.ckpt", model, R"({"note":"x"})");
  LoadedCheckpoint lc = load_checkpoint(dir.path() / "m.ckpt");
  CHECK(lc.model->num_params() == model.num_params());
  const RawPredictions pa = predict(model, frames[2]);
  const RawPredictions pb = predict(*lc.model, frames[2]);
  for (int l = 0; l < 3; ++l) {
    CHECK(pa.levels[static_cast<std::size_t>(l)].box == pb.levels[static_cast<std::size_t>(l)].box);
    CHECK(pa.levels[static_cast<std::size_t>(l)].cls == pb.levels[static_cast<std::size_t>(l)].cls);
  }

  write_text(dir.path() / "bad.ckpt", "TRCK garbage");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "bad.ckpt"), DataError);
}

TEST_CASE("empty training set is rejected") {
  CHECK_THROWS(train(short_run(2), {}, {}));
}

TEST_CASE("config parsing is strict") {
  const RunConfig d = run_config_from_json("{}");
  CHECK(d.train.beta1 == 0.937);
  CHECK(d.train.ema_decay == 0.9999);
  CHECK(d.train.epochs == 100);
  CHECK(d.train.batch_size == 4);
  CHECK(d.loss.weights.alpha == std::array<double, kNumLossTerms>{30, 7.5, 7.5, 0.5, 1.5, 5.0, 5.0, 80, 40});

  const RunConfig round = run_config_from_json(run_config_to_json(overfit_preset()));
  CHECK(run_config_to_json(round) == run_config_to_json(overfit_preset()));

  CHECK_THROWS_AS(run_config_from_json(R"({"train":{"bogus":1}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"nonsense":{}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"train":{"lr_min":1.0}})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(R"({"preset":"mystery"})"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/transrad.json"), ConfigError);
}

TEST_CASE("command-line exit codes and subcommands") {
  scenes::TempDir dir("cli");
  const fs::path root = dir.path() / "data";
  const std::string q = "'";

  CHECK(run_cli("synth --out " + q + root.string() + q + " --frames 3 --seed 4 --range 64 --azimuth 64 --doppler 16") == 0);
  CHECK(list_frame_ids(root / "train").size() == 3);
  CHECK(fs::exists(root / "labels.txt"));

  write_text(dir.path() / "bad.json", R"({"train":{"bogus":1}})");
  CHECK(run_cli("train --config " + (dir.path() / "bad.json").string()) == 2);
  CHECK(run_cli("train --config " + (dir.path() / "absent.json").string()) == 2);
  CHECK(run_cli("train") == 2);

  write_text(dir.path() / "nodata.json",
             R"({"preset":"overfit","data":{"root":")" + (dir.path() / "missing").string() + R"("}})");
  CHECK(run_cli("train --config " + (dir.path() / "nodata.json").string()) == 3);
  CHECK(run_cli("eval --ckpt " + (dir.path() / "none.ckpt").string() + " --data " + root.string()) == 3);

  const fs::path out = dir.path() / "run";
  write_text(dir.path() / "ok.json", R"({"preset":"overfit","train":{"max_steps":2,"batch_size":2},"data":{"root":")" +
                                         root.string() + R"("},"out_dir":")" + out.string() + R"("})");
  CHECK(run_cli("train --config " + (dir.path() / "ok.json").string()) == 0);
  const std::string ckpt = (out / "last.ckpt").string();
  REQUIRE(fs::exists(ckpt));

  CHECK(run_cli("eval --ckpt " + ckpt + " --data " + root.string()) == 0);
  CHECK(run_cli("detect --ckpt " + ckpt + " --data " + root.string() + " --frame frame_000001 --plot " +
                (dir.path() / "f.png").string()) == 0);
  CHECK(fs::file_size(dir.path() / "f.png") > 0);
  CHECK(run_cli("detect --ckpt " + ckpt + " --data " + root.string() + " --frame no_such_frame") == 3);
  CHECK(run_cli("bench --ckpt " + ckpt + " --frames 1 --warmup 0") == 0);
  CHECK(run_cli("config --preset overfit") == 0);
}

}  // TEST_SUITE
