#pragma once

#include <string>

#include "dseg/config.hpp"

namespace dseg {

// Command layer shared by the C API and tests. Every command is deterministic
// for a fixed config and seeds.

void cmd_synth(const RunConfig& cfg, const std::string& out_dir);

// stage 0 = both stages in order; 1 or 2 = that stage only. Stage 2 resumes
// from resume_checkpoint, else out_dir/stage1.ckpt, else a fresh model (the
// single-stage schedule). FCN configs train on whole images in one stage.
void cmd_train(const RunConfig& cfg, int stage, const std::string& resume_checkpoint);

void cmd_predict(const RunConfig& cfg, const std::string& image_path,
                 const std::string& proposals_path, const std::string& mode_override,
                 bool ensemble, const std::string& out_dir);

void cmd_eval(const std::string& pred_dir, const std::string& gt_dir, int64_t num_classes,
              const std::string& report_path);

void cmd_dump_activations(const RunConfig& cfg, const std::string& image_path,
                          const std::vector<std::string>& layers,
                          const std::string& out_dir);

// Helpers exposed for tests and the acceptance suite.
std::vector<TrainingExample> whole_image_examples(const std::vector<Sample>& samples);
std::string pick_checkpoint(const RunConfig& cfg);

}  // namespace dseg
