#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dseg/data.hpp"
#include "dseg/net.hpp"

#include "json.hpp"

namespace dseg {

enum class AggMode { max, sum };

std::string agg_mode_name(AggMode m);
AggMode agg_mode_from_name(const std::string& s);

// Neutral element written outside a proposal's footprint in max mode; a large
// negative surrogate for minus infinity. Sum mode pads with literal zero.
constexpr float kNeutralMax = -1e30f;

struct ProposalPrediction {
  BoxGeometry box;     // extended, clipped crop box in image coordinates
  TensorF score_map;   // (1, C, side, side) class logits at network resolution
};

// A proposal's score map embedded into full-image coordinates.
struct PlacedMap {
  TensorF map;      // (1, C, H, W)
  BoxGeometry box;  // footprint holding real values
};

struct AggregatedMap {
  TensorF P;  // (1, C, H, W)
  AggMode mode = AggMode::max;
  std::vector<int32_t> coverage;  // per-pixel contributing proposal count
};

struct SegmentationResult {
  TensorF class_probs;   // (1, C, H, W); valid distributions everywhere
  LabelMask label_mask;  // per-pixel argmax, lowest-index tie-break
  nlohmann::json provenance;
};

// Top-k proposals by descending score; ties keep input order.
std::vector<BoxGeometry> select_proposals(const std::vector<BoxGeometry>& all,
                                          int64_t top_k);

// Extends the box (1.2x, squared, clipped), crops, resizes to the network
// side, subtracts means and runs an infer-mode forward.
ProposalPrediction predict_proposal(Model& model, const TensorF& image,
                                    const BoxGeometry& box,
                                    const std::array<float, 3>& pixel_means,
                                    double extend_factor = 1.2);

// Resizes the score map back to the box footprint and pads with the mode's
// neutral element elsewhere.
PlacedMap place_in_image(const ProposalPrediction& pred, int64_t image_h, int64_t image_w,
                         AggMode mode);

// Pixel-wise max or sum over the placed maps, in list order.
AggregatedMap aggregate(const std::vector<PlacedMap>& maps, AggMode mode);

// Per-pixel softmax over the aggregated logits; pixels no proposal covered
// become background with probability one. Labels are the per-pixel argmax.
SegmentationResult finalize(const AggregatedMap& agg);

// Per-pixel arithmetic mean of two probability maps.
TensorF ensemble_mean(const TensorF& a, const TensorF& b);

// Whole image through the network: resize to the input side, infer, softmax,
// resize the distributions back (convex weights keep them distributions).
TensorF whole_image_probs(Model& model, const TensorF& image,
                          const std::array<float, 3>& pixel_means);

struct SegmentOptions {
  AggMode mode = AggMode::max;
  int64_t top_k = 50;
  std::array<float, 3> pixel_means{0.5f, 0.5f, 0.5f};
  double extend_factor = 1.2;
  // Grid fallback when no proposals are supplied.
  std::vector<int64_t> grid_scales{36, 56, 80};
  int64_t grid_stride = 20;
};

// Full pipeline: select -> predict -> place -> aggregate -> finalize, with an
// optional probability-mean ensemble against a second model's whole-image
// output. Aggregation stamps proposals in fixed order, which is exactly
// aggregate() over the placed maps without materializing them together.
SegmentationResult segment_image(Model& model, Model* fcn_model, const TensorF& image,
                                 std::vector<BoxGeometry> proposals,
                                 const SegmentOptions& opt);

// Most representative activation per requested layer: the channel with the
// largest L2 energy, min-max normalized to [0, 255]. Returns written paths.
std::vector<std::string> dump_activations(Model& model, const TensorF& image,
                                          const std::vector<std::string>& layer_names,
                                          const std::array<float, 3>& pixel_means,
                                          const std::string& out_dir);

}  // namespace dseg
