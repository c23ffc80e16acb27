#include "deconvseg.h"

#include <cstring>
#include <sstream>
#include <string>

#include "dseg/commands.hpp"
#include "dseg/net.hpp"

namespace {

thread_local std::string g_last_error = "no error";

struct ModelHandle {
  dseg::Model model;
};

dseg_status fail(const std::exception& e) {
  g_last_error = e.what();
  // Configuration and argument problems map to the usage exit class.
  if (dynamic_cast<const dseg::ConfigError*>(&e)) return DSEG_USAGE;
  return DSEG_ERR;
}

dseg_status fail_usage(const std::string& msg) {
  g_last_error = msg;
  return DSEG_USAGE;
}

template <class Fn>
dseg_status guarded(Fn&& fn) {
  try {
    fn();
    return DSEG_OK;
  } catch (const std::exception& e) {
    return fail(e);
  }
}

std::string or_empty(const char* s) { return s ? std::string(s) : std::string(); }

}  // namespace

extern "C" {

const char* dseg_version(void) { return "0.1.0"; }

const char* dseg_last_error(void) { return g_last_error.c_str(); }

void dseg_set_threads(int n) { dseg::set_thread_count(n); }

dseg_status dseg_model_load(const char* path, dseg_model** out) {
  if (!path || !out) return fail_usage("dseg_model_load: null argument");
  *out = nullptr;
  return guarded([&] {
    auto* h = new ModelHandle{dseg::load_model(path)};
    *out = reinterpret_cast<dseg_model*>(h);
  });
}

dseg_status dseg_model_save(const dseg_model* model, const char* path) {
  if (!model || !path) return fail_usage("dseg_model_save: null argument");
  return guarded([&] {
    dseg::save_model(reinterpret_cast<const ModelHandle*>(model)->model, path);
  });
}

void dseg_model_free(dseg_model* model) {
  delete reinterpret_cast<ModelHandle*>(model);
}

int64_t dseg_model_param_count(const dseg_model* model) {
  if (!model) return -1;
  return reinterpret_cast<const ModelHandle*>(model)->model.param_count();
}

dseg_status dseg_synth(const char* config_path, const char* out_dir) {
  if (!config_path) return fail_usage("dseg_synth: config path is required");
  return guarded([&] {
    const dseg::RunConfig cfg = dseg::RunConfig::load(config_path);
    dseg::cmd_synth(cfg, out_dir ? out_dir : cfg.data_dir);
  });
}

dseg_status dseg_train(const char* config_path, int stage, const char* resume_checkpoint) {
  if (!config_path) return fail_usage("dseg_train: config path is required");
  return guarded([&] {
    const dseg::RunConfig cfg = dseg::RunConfig::load(config_path);
    dseg::cmd_train(cfg, stage, or_empty(resume_checkpoint));
  });
}

dseg_status dseg_predict(const char* config_path, const char* image_path,
                         const char* proposals_path, const char* mode, int ensemble,
                         const char* out_dir) {
  if (!config_path || !image_path || !out_dir)
    return fail_usage("dseg_predict: config, image and output directory are required");
  return guarded([&] {
    const dseg::RunConfig cfg = dseg::RunConfig::load(config_path);
    dseg::cmd_predict(cfg, image_path, or_empty(proposals_path), or_empty(mode),
                      ensemble != 0, out_dir);
  });
}

dseg_status dseg_eval(const char* pred_dir, const char* gt_dir, int64_t num_classes,
                      const char* report_path) {
  if (!pred_dir || !gt_dir || !report_path)
    return fail_usage("dseg_eval: prediction dir, ground-truth dir and report path required");
  if (num_classes < 2) return fail_usage("dseg_eval: need >= 2 classes");
  return guarded([&] { dseg::cmd_eval(pred_dir, gt_dir, num_classes, report_path); });
}

dseg_status dseg_dump_activations(const char* config_path, const char* image_path,
                                  const char* layers_csv, const char* out_dir) {
  if (!config_path || !image_path || !layers_csv || !out_dir)
    return fail_usage("dseg_dump_activations: all arguments are required");
  return guarded([&] {
    std::vector<std::string> layers;
    std::stringstream ss(layers_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) layers.push_back(item);
    const dseg::RunConfig cfg = dseg::RunConfig::load(config_path);
    dseg::cmd_dump_activations(cfg, image_path, layers, out_dir);
  });
}

}  // extern "C"
