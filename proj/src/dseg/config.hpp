#pragma once

#include <array>
#include <string>
#include <vector>

#include "dseg/net.hpp"
#include "dseg/train.hpp"

#include "json.hpp"

namespace dseg {

// Operator-facing run configuration: one JSON document drives every command.
// Absent fields take defaults; the effective config (input plus defaults) is
// written next to run outputs for reproducibility.
struct RunConfig {
  // network
  std::string network_kind = "deconvnet";  // "deconvnet" | "fcn"
  double scale = 0.125;
  int64_t num_classes = 4;
  int64_t input_side = 64;
  double weight_init_stddev = 0.01;

  // optimizer + stage budgets
  OptimConfig optim;
  int64_t stage1_iters = 2000;
  int64_t stage2_iters = 4000;

  // data
  std::string data_dir = "data/synth";
  int64_t synth_count = 600;
  int64_t synth_val = 100;
  int64_t synth_image_side = 96;
  int64_t synth_classes = 3;
  uint64_t synth_seed = 7;
  std::array<float, 3> pixel_means{0.5f, 0.5f, 0.5f};
  double stage2_iou_min = 0.5;
  bool balance = true;
  bool augment = true;
  bool flip = true;
  int64_t resize_side = 0;  // 0 = derived as round(input_side * 250 / 224)

  // training run
  std::string out_dir = "runs/default";
  uint64_t train_seed = 1;

  // inference
  std::string agg_mode = "max";
  int64_t top_k = 50;
  std::vector<int64_t> grid_scales{36, 56, 80};
  int64_t grid_stride = 20;
  std::string checkpoint;      // explicit model for predict/dump ("" = from out_dir)
  std::string fcn_checkpoint;  // ensemble partner ("" = out_dir/fcn.ckpt)

  int64_t effective_resize_side() const {
    return resize_side > 0
               ? resize_side
               : static_cast<int64_t>(std::llround(static_cast<double>(input_side) * 250.0 / 224.0));
  }

  NetworkConfig make_network() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  void write_effective(const std::string& path) const;
};

}  // namespace dseg
