#include "transrad/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"
#include "transrad/errors.hpp"

namespace transrad {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr_init > 0.0)) throw ConfigError("train: lr_init must be > 0");
  if (!(lr_min >= 0.0 && lr_min < lr_init)) throw ConfigError("train: need 0 <= lr_min < lr_init");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train: warmup_ratio must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1]");
  if (!(ema_tau >= 0.0)) throw ConfigError("train: ema_tau must be >= 0");
  if (!(class_weight_min >= 0.0 && class_weight_min < 1.0)) {
    throw ConfigError("train: class_weight_min must lie in [0, 1)");
  }
  if (eval_every < 0 || prefetch < 0) throw ConfigError("train: eval_every and prefetch must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  loss.weights.validate();
  if (!(loss.focal.alpha > 0.0 && loss.focal.alpha < 1.0)) throw ConfigError("loss: focal alpha must lie in (0, 1)");
  if (!(loss.focal.gamma >= 0.0)) throw ConfigError("loss: focal gamma must be >= 0");
  assign.validate();
  eval.validate();
  if (!(post.score_thr >= 0.0 && post.score_thr <= 1.0)) throw ConfigError("post: score_thr must lie in [0, 1]");
  if (!(post.class_nms_thr >= 0.0 && post.class_nms_thr <= 1.0) || !(post.la_thr >= 0.0 && post.la_thr <= 1.0)) {
    throw ConfigError("post: NMS thresholds must lie in [0, 1]");
  }
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) throw ConfigError("data: val_fraction must lie in (0, 1)");
  if (!eval.class_names.empty() && static_cast<int>(eval.class_names.size()) != model.head.num_classes) {
    throw ConfigError("eval: class_names must match model.head.num_classes");
  }
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ConfigError(section + ": unknown key '" + k + "'");
  }
}

template <class T>
void get(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

json to_j(const ModelConfig& m) {
  const auto& b = m.backbone;
  return {{"backbone",
           {{"input_channels", b.input_channels},
            {"stage_dims", b.stage_dims},
            {"stage_blocks", b.stage_blocks},
            {"stage_heads", b.stage_heads},
            {"decomposed_stages", b.decomposed_stages},
            {"ffn_expansion", b.ffn_expansion},
            {"lce_kernel", b.lce_kernel},
            {"cpe_kernel", b.cpe_kernel}}},
          {"neck", {{"out_channels", m.neck.out_channels}, {"c2f_depth", m.neck.c2f_depth}}},
          {"head",
           {{"num_classes", m.head.num_classes},
            {"reg_max", m.head.reg_max},
            {"width", m.head.width},
            {"prior", m.head.prior},
            {"dfl_init_slope", m.head.dfl_init_slope}}},
          {"input_height", m.input_height},
          {"input_width", m.input_width},
          {"input_scale", m.input_scale},
          {"seed", m.seed}};
}

void from_j(const json& j, ModelConfig& m) {
  check_keys(j, {"backbone", "neck", "head", "input_height", "input_width", "input_scale", "seed"}, "model");
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b,
               {"input_channels", "stage_dims", "stage_blocks", "stage_heads", "decomposed_stages", "ffn_expansion",
                "lce_kernel", "cpe_kernel"},
               "model.backbone");
    auto& mb = m.backbone;
    get(b, "input_channels", mb.input_channels);
    get(b, "stage_dims", mb.stage_dims);
    get(b, "stage_blocks", mb.stage_blocks);
    get(b, "stage_heads", mb.stage_heads);
    get(b, "decomposed_stages", mb.decomposed_stages);
    get(b, "ffn_expansion", mb.ffn_expansion);
    get(b, "lce_kernel", mb.lce_kernel);
    get(b, "cpe_kernel", mb.cpe_kernel);
  }
  if (j.contains("neck")) {
    const json& n = j.at("neck");
    check_keys(n, {"out_channels", "c2f_depth"}, "model.neck");
    get(n, "out_channels", m.neck.out_channels);
    get(n, "c2f_depth", m.neck.c2f_depth);
  }
  if (j.contains("head")) {
    const json& h = j.at("head");
    check_keys(h, {"num_classes", "reg_max", "width", "prior", "dfl_init_slope"}, "model.head");
    get(h, "num_classes", m.head.num_classes);
    get(h, "reg_max", m.head.reg_max);
    get(h, "width", m.head.width);
    get(h, "prior", m.head.prior);
    get(h, "dfl_init_slope", m.head.dfl_init_slope);
  }
  get(j, "input_height", m.input_height);
  get(j, "input_width", m.input_width);
  get(j, "input_scale", m.input_scale);
  get(j, "seed", m.seed);
}

json to_j(const RunConfig& c) {
  const auto& t = c.train;
  json lw = json::array();
  for (double a : c.loss.weights.alpha) lw.push_back(a);
  return {{"model", to_j(c.model)},
          {"train",
           {{"lr_init", t.lr_init},
            {"lr_min", t.lr_min},
            {"warmup_ratio", t.warmup_ratio},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"weight_decay", t.weight_decay},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"max_steps", t.max_steps},
            {"use_ema", t.use_ema},
            {"ema_decay", t.ema_decay},
            {"ema_tau", t.ema_tau},
            {"seed", t.seed},
            {"phase2", t.phase2},
            {"class_weight_min", t.class_weight_min},
            {"eval_every", t.eval_every},
            {"prefetch", t.prefetch},
            {"shuffle", t.shuffle},
            {"deterministic", t.deterministic}}},
          {"loss",
           {{"weights", lw},
            {"focal_alpha", c.loss.focal.alpha},
            {"focal_gamma", c.loss.focal.gamma},
            {"normalized_center", c.loss.normalized_center}}},
          {"assign",
           {{"alpha", c.assign.alpha},
            {"beta", c.assign.beta},
            {"top_k", c.assign.top_k},
            {"normalized_t", c.assign.normalized_t}}},
          {"eval",
           {{"iou_thresholds_3d", c.eval.iou_thresholds_3d},
            {"iou_thresholds_2d", c.eval.iou_thresholds_2d},
            {"class_names", c.eval.class_names}}},
          {"post",
           {{"score_thr", c.post.score_thr},
            {"class_nms_thr", c.post.class_nms_thr},
            {"la_thr", c.post.la_thr},
            {"iou_mode", c.post.iou_mode == NmsIou::k3d ? "3d" : "ra"}}},
          {"data",
           {{"root", c.data.root},
            {"train_split", c.data.train_split},
            {"val_split", c.data.val_split},
            {"val_fraction", c.data.val_fraction}}},
          {"out_dir", c.out_dir}};
}

void from_j(const json& j, RunConfig& c) {
  check_keys(j, {"model", "train", "loss", "assign", "eval", "post", "data", "out_dir", "preset"}, "config");
  if (j.contains("preset")) {
    const auto name = j.at("preset").get<std::string>();
    if (name == "overfit") {
      c = overfit_preset();
    } else if (name != "default") {
      throw ConfigError("config: unknown preset '" + name + "'");
    }
  }
  if (j.contains("model")) from_j(j.at("model"), c.model);
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"lr_init", "lr_min", "warmup_ratio", "beta1", "beta2", "adam_eps", "weight_decay", "epochs",
                "batch_size", "max_steps", "use_ema", "ema_decay", "ema_tau", "seed", "phase2", "class_weight_min",
                "eval_every", "prefetch", "shuffle", "deterministic"},
               "train");
    auto& tc = c.train;
    get(t, "lr_init", tc.lr_init);
    get(t, "lr_min", tc.lr_min);
    get(t, "warmup_ratio", tc.warmup_ratio);
    get(t, "beta1", tc.beta1);
    get(t, "beta2", tc.beta2);
    get(t, "adam_eps", tc.adam_eps);
    get(t, "weight_decay", tc.weight_decay);
    get(t, "epochs", tc.epochs);
    get(t, "batch_size", tc.batch_size);
    get(t, "max_steps", tc.max_steps);
    get(t, "use_ema", tc.use_ema);
    get(t, "ema_decay", tc.ema_decay);
    get(t, "ema_tau", tc.ema_tau);
    get(t, "seed", tc.seed);
    get(t, "phase2", tc.phase2);
    get(t, "class_weight_min", tc.class_weight_min);
    get(t, "eval_every", tc.eval_every);
    get(t, "prefetch", tc.prefetch);
    get(t, "shuffle", tc.shuffle);
    get(t, "deterministic", tc.deterministic);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, {"weights", "focal_alpha", "focal_gamma", "normalized_center"}, "loss");
    if (l.contains("weights")) {
      const auto w = l.at("weights").get<std::vector<double>>();
      if (w.size() != kNumLossTerms) throw ConfigError("loss: weights must have 9 entries");
      std::copy(w.begin(), w.end(), c.loss.weights.alpha.begin());
    }
    get(l, "focal_alpha", c.loss.focal.alpha);
    get(l, "focal_gamma", c.loss.focal.gamma);
    get(l, "normalized_center", c.loss.normalized_center);
  }
  if (j.contains("assign")) {
    const json& a = j.at("assign");
    check_keys(a, {"alpha", "beta", "top_k", "normalized_t"}, "assign");
    get(a, "alpha", c.assign.alpha);
    get(a, "beta", c.assign.beta);
    get(a, "top_k", c.assign.top_k);
    get(a, "normalized_t", c.assign.normalized_t);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"iou_thresholds_3d", "iou_thresholds_2d", "class_names"}, "eval");
    get(e, "iou_thresholds_3d", c.eval.iou_thresholds_3d);
    get(e, "iou_thresholds_2d", c.eval.iou_thresholds_2d);
    get(e, "class_names", c.eval.class_names);
  }
  if (j.contains("post")) {
    const json& p = j.at("post");
    check_keys(p, {"score_thr", "class_nms_thr", "la_thr", "iou_mode"}, "post");
    get(p, "score_thr", c.post.score_thr);
    get(p, "class_nms_thr", c.post.class_nms_thr);
    get(p, "la_thr", c.post.la_thr);
    if (p.contains("iou_mode")) {
      const auto mode = p.at("iou_mode").get<std::string>();
      if (mode == "3d") {
        c.post.iou_mode = NmsIou::k3d;
      } else if (mode == "ra") {
        c.post.iou_mode = NmsIou::kRa2d;
      } else {
        throw ConfigError("post: iou_mode must be '3d' or 'ra'");
      }
    }
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"root", "train_split", "val_split", "val_fraction"}, "data");
    get(d, "root", c.data.root);
    get(d, "train_split", c.data.train_split);
    get(d, "val_split", c.data.val_split);
    get(d, "val_fraction", c.data.val_fraction);
  }
  get(j, "out_dir", c.out_dir);
}

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& m) { return to_j(m).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig m;
  try {
    from_j(parse(text), m);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  m.validate();
  return m;
}

std::string run_config_to_json(const RunConfig& cfg) { return to_j(cfg).dump(2); }

RunConfig run_config_from_json(const std::string& text) {
  RunConfig c;
  try {
    from_j(parse(text), c);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.eval.class_names.empty()) {
    const auto names = default_class_names();
    if (static_cast<int>(names.size()) == c.model.head.num_classes) c.eval.class_names = names;
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return run_config_from_json(ss.str());
}

RunConfig overfit_preset() {
  RunConfig c;
  c.model = ModelConfig::desk();
  c.train.lr_init = 1e-2;
  c.train.lr_min = 1e-4;
  c.train.warmup_ratio = 0.05;
  c.train.epochs = 300;
  c.train.batch_size = 8;
  c.train.max_steps = 300;
  c.train.use_ema = false;
  c.train.eval_every = 0;
  c.post.score_thr = 0.05;
  c.data.root = "data/overfit";
  c.data.val_split = "train";
  c.out_dir = "runs/overfit";
  c.eval.class_names = default_class_names();
  return c;
}

}  // namespace transrad
