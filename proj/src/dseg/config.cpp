#include "dseg/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace dseg {

NetworkConfig RunConfig::make_network() const {
  if (network_kind == "deconvnet") return build_deconvnet(num_classes, scale, input_side);
  if (network_kind == "fcn") return build_fcn_baseline(num_classes, scale, input_side);
  throw ConfigError("network kind must be 'deconvnet' or 'fcn', got '" + network_kind + "'");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["network"] = {{"kind", network_kind},
                  {"scale", scale},
                  {"num_classes", num_classes},
                  {"input_side", input_side},
                  {"weight_init_stddev", weight_init_stddev}};
  j["optimizer"] = optim.to_json();
  j["optimizer"]["stage1_iters"] = stage1_iters;
  j["optimizer"]["stage2_iters"] = stage2_iters;
  j["data"] = {{"dir", data_dir},
               {"synth_count", synth_count},
               {"synth_val", synth_val},
               {"synth_image_side", synth_image_side},
               {"synth_classes", synth_classes},
               {"synth_seed", synth_seed},
               {"pixel_means", {pixel_means[0], pixel_means[1], pixel_means[2]}},
               {"stage2_iou_min", stage2_iou_min},
               {"balance", balance},
               {"augment", augment},
               {"flip", flip},
               {"resize_side", effective_resize_side()}};
  j["train"] = {{"out_dir", out_dir}, {"seed", train_seed}};
  j["inference"] = {{"mode", agg_mode},
                    {"top_k", top_k},
                    {"grid_scales", grid_scales},
                    {"grid_stride", grid_stride},
                    {"checkpoint", checkpoint},
                    {"fcn_checkpoint", fcn_checkpoint}};
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (j.contains("network")) {
      const auto& n = j.at("network");
      c.network_kind = n.value("kind", c.network_kind);
      c.scale = n.value("scale", c.scale);
      c.num_classes = n.value("num_classes", c.num_classes);
      c.input_side = n.value("input_side", c.input_side);
      c.weight_init_stddev = n.value("weight_init_stddev", c.weight_init_stddev);
    }
    if (j.contains("optimizer")) {
      c.optim = OptimConfig::from_json(j.at("optimizer"));
      c.stage1_iters = j.at("optimizer").value("stage1_iters", c.stage1_iters);
      c.stage2_iters = j.at("optimizer").value("stage2_iters", c.stage2_iters);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data_dir = d.value("dir", c.data_dir);
      c.synth_count = d.value("synth_count", c.synth_count);
      c.synth_val = d.value("synth_val", c.synth_val);
      c.synth_image_side = d.value("synth_image_side", c.synth_image_side);
      c.synth_classes = d.value("synth_classes", c.synth_classes);
      c.synth_seed = d.value("synth_seed", c.synth_seed);
      if (d.contains("pixel_means")) {
        const auto& m = d.at("pixel_means");
        for (size_t i = 0; i < 3; ++i) c.pixel_means[i] = m.at(i).get<float>();
      }
      c.stage2_iou_min = d.value("stage2_iou_min", c.stage2_iou_min);
      c.balance = d.value("balance", c.balance);
      c.augment = d.value("augment", c.augment);
      c.flip = d.value("flip", c.flip);
      c.resize_side = d.value("resize_side", c.resize_side);
    }
    if (j.contains("train")) {
      c.out_dir = j.at("train").value("out_dir", c.out_dir);
      c.train_seed = j.at("train").value("seed", c.train_seed);
    }
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      c.agg_mode = i.value("mode", c.agg_mode);
      c.top_k = i.value("top_k", c.top_k);
      if (i.contains("grid_scales"))
        c.grid_scales = i.at("grid_scales").get<std::vector<int64_t>>();
      c.grid_stride = i.value("grid_stride", c.grid_stride);
      c.checkpoint = i.value("checkpoint", c.checkpoint);
      c.fcn_checkpoint = i.value("fcn_checkpoint", c.fcn_checkpoint);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  if (c.effective_resize_side() < c.input_side)
    throw ConfigError("resize_side must be >= input_side");
  c.make_network();  // cross-validate the network shape flow now
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": bad json: " + e.what());
  }
  return from_json(j);
}

void RunConfig::write_effective(const std::string& path) const {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write effective config " + path);
  f << to_json().dump(2) << "\n";
}

}  // namespace dseg
