#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dseg/data.hpp"
#include "dseg/net.hpp"

namespace dseg {

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int64_t batch_size = 64;
  double lr_drop_factor = 10.0;
  int64_t patience = 3;          // validation rounds without improvement before a drop
  int64_t val_interval = 200;    // iterations between validation rounds
  double improve_margin = 1e-4;  // minimum score gain that counts as improvement
  int64_t max_iters = 2000;      // per stage

  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

struct TrainState {
  int64_t iteration = 0;
  std::map<std::string, std::vector<float>> velocity;  // keyed by parameter name
  double best_val = -1.0;
  double lr = 0.01;
  int64_t stall = 0;  // consecutive non-improving validation rounds
};

// Classical momentum: v <- momentum*v - lr*(g + weight_decay*w); w <- w + v.
// Applies to conv/deconv weights and biases and batchnorm gamma/beta alike;
// running statistics are not parameters and see no decay. Non-finite
// gradients abort with the iteration in the message.
void sgd_step(Model& model, const GradMap<float>& grads, TrainState& state,
              const OptimConfig& cfg);

// Drops the learning rate by lr_drop_factor after `patience` consecutive
// validation rounds that fail to beat the best score by improve_margin.
void lr_schedule(TrainState& state, double val_score, const OptimConfig& cfg);

// Infer-mode pass over network-sized examples; returns (pixel_acc, mean_iou).
std::pair<double, double> evaluate_validation(Model& model,
                                              const std::vector<TrainingExample>& examples,
                                              int64_t num_classes,
                                              const std::array<float, 3>& pixel_means);

struct StageRunConfig {
  OptimConfig optim;
  int stage = 1;
  int64_t out_side = 64;
  int64_t resize_side = 71;  // pre-crop size for augmentation
  bool flip = true;
  bool augment_enabled = true;
  std::array<float, 3> pixel_means{0.5f, 0.5f, 0.5f};
  int64_t num_classes = 4;
  uint64_t seed = 1;
  std::string checkpoint_path;  // best-model checkpoint ("" = none)
  std::string metrics_csv;      // append-only log ("" = none)
};

struct StageReport {
  std::vector<double> losses;  // one entry per iteration
  double final_val_pixel_acc = 0.0;
  double final_val_mean_iou = 0.0;
  int64_t start_iteration = 0;
  int64_t end_iteration = 0;
};

// Shuffled mini-batch SGD over the stage's example set with periodic
// validation, learning-rate scheduling and best-model checkpointing.
// Divergence (non-finite loss) aborts; the last checkpoint stays on disk.
StageReport train_stage(Model& model, TrainState& state,
                        const std::vector<TrainingExample>& examples,
                        const std::vector<TrainingExample>& val_examples,
                        const StageRunConfig& cfg);

// Batch assembly: augmented examples stacked with per-channel means removed.
std::pair<TensorF, LabelMask> assemble_batch(const std::vector<const TrainingExample*>& batch,
                                             const std::array<float, 3>& pixel_means);

void save_checkpoint(const Model& model, const TrainState& state, const OptimConfig& cfg,
                     const std::string& path);

struct Checkpoint {
  Model model;
  TrainState state;
  OptimConfig optim;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dseg
