#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dseg/layers.hpp"
#include "dseg/tensor.hpp"

#include "json.hpp"

namespace dseg {

enum class LayerKind { conv, deconv, maxpool, maxunpool, relu, batchnorm, crop, softmax };

std::string layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& s);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int64_t out_channels = 0;   // conv/deconv
  std::string unpool_pair;    // maxunpool: name of the paired pooling layer
  int64_t crop_h = 0, crop_w = 0;  // crop target extents
  bool frozen = false;        // excluded from the learnable registry
  std::string init = "gaussian";  // "gaussian" | "bilinear"
  bool renormalize = false;   // divide output by kernel coverage (fixed upsampling)
};

struct NetworkConfig {
  std::vector<LayerSpec> layers;
  Shape4 input_shape{1, 3, 224, 224};
  int64_t num_classes = 21;
  double scale = 1.0;

  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
};

// Static shape propagation. Returns the output shape of every layer for the
// config's input shape and rejects configs whose layers cannot compose:
// duplicate names, dangling unpool pairs, unpool output not equal to the
// paired pool's input (the mirror property), non-positive extents.
std::vector<Shape4> compute_shape_flow(const NetworkConfig& cfg);

template <class T>
struct ModelT {
  NetworkConfig config;
  std::vector<Shape4> flow;  // per-layer output shapes, parallel to config.layers
  std::map<std::string, ConvParams<T>> conv;
  std::map<std::string, BatchNormState<T>> bn;

  int64_t param_count() const;  // learnable scalars (frozen kernels excluded)
};

using Model = ModelT<float>;

// The exact mirrored encoder-decoder stack: 13 convolutions in five blocks
// with interleaved 2x2 pools, two fully-connected layers realized as
// convolutions (fc6/fc7), and a decoder that mirrors the encoder with
// switch-driven unpooling, ending in a 1x1 class-logit convolution.
// `scale` multiplies channel widths; the input side sets how many pool stages
// fit (a stage per factor of 2, at most five) and the fc6 kernel shrinks to
// the encoder's final spatial extent.
NetworkConfig build_deconvnet(int64_t num_classes, double scale, int64_t input_side = 224);

// Contrast architecture: the same encoder, a 1x1 scoring convolution, and a
// frozen bilinear interpolation kernel upsampling straight back to input size.
NetworkConfig build_fcn_baseline(int64_t num_classes, double scale, int64_t input_side = 224);

template <class T>
ModelT<T> init_model(const NetworkConfig& cfg, uint64_t seed, double stddev = 0.01);

template <class T>
struct ForwardTrace {
  Tensor<T> input;
  std::vector<Tensor<T>> outputs;            // one per layer
  std::map<std::string, SwitchMap> switches;  // keyed by pool layer name
};

template <class T>
struct ForwardResult {
  Tensor<T> output;
  std::optional<ForwardTrace<T>> trace;
};

template <class T>
ForwardResult<T> forward(ModelT<T>& model, const Tensor<T>& x, BnMode mode,
                         bool want_trace = false);

template <class T>
struct ParamRef {
  std::string name;
  T* data;
  int64_t size;
};

// Learnable parameters in config order; frozen kernels are withheld.
template <class T>
std::vector<ParamRef<T>> param_registry(ModelT<T>& model);

template <class T>
using GradMap = std::map<std::string, std::vector<T>>;

template <class T>
GradMap<T> backward(ModelT<T>& model, const ForwardTrace<T>& trace,
                    const Tensor<T>& d_output);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);
// Loads against a caller-supplied config; the first layer whose stored shape
// differs is named in the error.
Model load_model_expected(const std::string& path, const NetworkConfig& expected);

}  // namespace dseg

#include "dseg/net_impl.hpp"
