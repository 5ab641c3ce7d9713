#pragma once

// Run configuration and its JSON form. Every section is optional in the file;
// missing keys keep their defaults, unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include "transrad/assignment.hpp"
#include "transrad/detmodel.hpp"
#include "transrad/evalmetrics.hpp"
#include "transrad/losses.hpp"
#include "transrad/postprocess.hpp"

namespace transrad {

struct TrainConfig {
  double lr_init = 1e-3;
  double lr_min = 1e-5;
  double warmup_ratio = 0.05;
  double beta1 = 0.937;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int epochs = 100;
  int batch_size = 4;
  int max_steps = 0;        // > 0 caps the run (and defines the schedule length)
  bool use_ema = true;
  double ema_decay = 0.9999;
  double ema_tau = 2000.0;  // decay ramp d * (1 - exp(-updates / tau)); 0 disables the ramp
  std::uint64_t seed = 0;
  bool phase2 = false;
  double class_weight_min = 0.05;
  int eval_every = 1;       // epochs between validation passes; 0 disables
  int prefetch = 2;         // prepared batches queued ahead; 0 loads inline
  bool shuffle = true;
  bool deterministic = false;

  void validate() const;
};

struct DataConfig {
  std::string root = "data";
  std::string train_split = "train";
  std::string val_split = "test";  // empty or missing directory: hash split of train
  double val_fraction = 0.2;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  AssignConfig assign;
  EvalConfig eval;
  PostprocessConfig post;
  DataConfig data;
  std::string out_dir = "runs/default";

  void validate() const;
};

std::string model_config_to_json(const ModelConfig& m);
ModelConfig model_config_from_json(const std::string& text);

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& file);

// Small preset that overfits a handful of synthetic frames on a CPU.
RunConfig overfit_preset();

}  // namespace transrad
