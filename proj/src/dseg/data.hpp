#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dseg/image.hpp"
#include "dseg/tensor.hpp"

#include "json.hpp"

namespace dseg {

// Pixel rectangle, inclusive-exclusive.
struct BoxGeometry {
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double score = 0.0;

  int64_t width() const { return x1 - x0; }
  int64_t height() const { return y1 - y0; }
  int64_t area() const { return width() * height(); }
  bool valid() const { return x0 < x1 && y0 < y1; }
};

double box_iou(const BoxGeometry& a, const BoxGeometry& b);

struct Instance {
  int32_t class_id = 0;
  BoxGeometry box;  // tight box around the instance's pixels
};

struct Sample {
  std::string id;
  TensorF image;     // (1,3,H,W), values in [0,1]
  LabelMask mask;    // (1,1,H,W), labels in [0,C) or 255 = ignore
  std::vector<Instance> instances;
  std::vector<int32_t> instance_map;  // H*W entries; 0 = none, else instance index + 1
  std::string split = "train";
};

struct TrainingExample {
  TensorF image;  // crop at native resolution until augmented to network size
  LabelMask mask;
  int stage = 1;
  std::string source_id;
  BoxGeometry box;  // extended crop box in source-image coordinates
};

// --- dataset ingestion ---------------------------------------------------

// Directory layout: images/<id>.png paired with masks/<id>.png. Instances are
// recovered as connected components per class. Labels >= num_classes other
// than 255 are rejected, naming the file.
std::vector<Sample> load_voc_style(const std::string& dir, int64_t num_classes);

// Manifest-driven load: JSON {"num_classes": C, "samples": [{"id", "image",
// "mask", "split"?}]} with paths relative to the manifest's directory.
std::vector<Sample> load_dataset(const std::string& manifest_path, int64_t num_classes);

void write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                   int64_t num_classes);

// --- synthetic shapes ----------------------------------------------------

struct SynthConfig {
  int64_t count = 100;
  int64_t image_side = 96;
  int64_t num_foreground_classes = 3;  // disk=1, square=2, triangle=3
  uint64_t seed = 7;
  int64_t val_count = 0;  // last val_count samples get split == "val"
};

// Textured backgrounds with 1-3 non-occluding colored shapes, exact masks and
// instance records; deterministic per seed.
std::vector<Sample> synth_shapes(const SynthConfig& cfg);

// --- example construction ------------------------------------------------

// Scales the box about its center, squares it to the longer side, then clips
// to the image bounds.
BoxGeometry extend_box(const BoxGeometry& b, double factor, int64_t image_w,
                       int64_t image_h);

struct Stage1Options {
  double extend_factor = 1.2;
  int64_t min_instance_side = 8;  // smaller instances are skipped and counted
};

struct Stage1Result {
  std::vector<TrainingExample> examples;
  int64_t skipped_small = 0;
};

// One example per instance: extended-box crop centered on it, every pixel of
// a competing instance relabeled background.
Stage1Result make_stage1_examples(const std::vector<Sample>& samples,
                                  const Stage1Options& opt = {});

// Proposal-driven examples: proposals whose box IoU with some ground-truth
// instance reaches iou_min are cropped with every class label kept.
std::vector<TrainingExample> make_stage2_examples(
    const std::vector<Sample>& samples,
    const std::map<std::string, std::vector<BoxGeometry>>& proposals, double iou_min,
    double extend_factor = 1.2);

// Resize to resize_side (bilinear image / nearest mask), crop out_side at
// (ox, oy), optional horizontal flip. The mask transforms identically.
TrainingExample augment_at(const TrainingExample& ex, int64_t out_side,
                           int64_t resize_side, int64_t ox, int64_t oy, bool flip);

// Random-crop variant drawing offsets and the flip coin from rng.
TrainingExample augment(const TrainingExample& ex, int64_t out_side, int64_t resize_side,
                        bool flip_enabled, Rng& rng);

// Deterministic center-crop resize used for validation examples.
TrainingExample center_fit(const TrainingExample& ex, int64_t out_side);

// Duplicates examples of under-represented dominant classes until every class
// count reaches half the largest; never removes anything.
std::vector<TrainingExample> balance_classes(const std::vector<TrainingExample>& examples);

// Sliding square windows at the given scales, scored by grey-level variance
// (a crude objectness stand-in) and sorted descending, ties stable.
std::vector<BoxGeometry> grid_proposals(const TensorF& image,
                                        const std::vector<int64_t>& scales, int64_t stride);

// --- proposal files (newline-delimited JSON records) ----------------------

std::map<std::string, std::vector<BoxGeometry>> read_proposals(const std::string& path);
void write_proposals(const std::string& path,
                     const std::map<std::string, std::vector<BoxGeometry>>& by_image);

}  // namespace dseg
