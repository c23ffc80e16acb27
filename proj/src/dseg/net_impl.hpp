#pragma once

// Template implementations for net.hpp (included at the end of that header).

#include <cstring>

namespace dseg {

namespace netdetail {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Coverage of a renormalized upsampling layer: the deconvolution of an
// all-ones single-channel map with the 1-D separable kernel. Interior pixels
// have coverage exactly 1; borders less, and dividing by it makes constant
// maps stay constant everywhere.
template <class T>
Tensor<T> upsample_coverage(const ConvParams<T>& p, int64_t in_h, int64_t in_w) {
  ConvParams<T> one_ch;
  one_ch.stride = p.stride;
  one_ch.pad = p.pad;
  one_ch.weights = Tensor<T>(Shape4(1, 1, p.kh(), p.kw()));
  // Any diagonal entry of the grouped kernel carries the separable profile.
  for (int64_t i = 0; i < p.kh(); ++i)
    for (int64_t j = 0; j < p.kw(); ++j) one_ch.weights.at(0, 0, i, j) = p.weights.at(0, 0, i, j);
  Tensor<T> ones = full<T>(Shape4(1, 1, in_h, in_w), T(1));
  return deconv2d_forward(ones, one_ch);
}

template <class T>
void renormalize_by_coverage(Tensor<T>& y, const Tensor<T>& cov) {
  const Shape4 s = y.shape();
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      T* p = y.data() + (n * s.c + c) * s.plane();
      const T* cv = cov.data();
      for (int64_t i = 0; i < s.plane(); ++i) p[i] /= cv[i];
    }
}

}  // namespace netdetail

template <class T>
int64_t ModelT<T>::param_count() const {
  int64_t total = 0;
  for (const auto& spec : config.layers) {
    if ((spec.kind == LayerKind::conv || spec.kind == LayerKind::deconv) && !spec.frozen) {
      const auto& p = conv.at(spec.name);
      total += p.weights.size() + static_cast<int64_t>(p.bias.size());
    } else if (spec.kind == LayerKind::batchnorm) {
      const auto& s = bn.at(spec.name);
      total += static_cast<int64_t>(s.gamma.size() + s.beta.size());
    }
  }
  return total;
}

namespace netdetail {

template <class T>
ModelT<T> allocate_model(const NetworkConfig& cfg, bool random_init, uint64_t seed,
                         double stddev) {
  ModelT<T> m;
  m.config = cfg;
  m.flow = compute_shape_flow(cfg);
  for (size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& spec = cfg.layers[i];
    const Shape4 in = i == 0 ? cfg.input_shape : m.flow[i - 1];
    switch (spec.kind) {
      case LayerKind::conv: {
        ConvParams<T> p;
        p.stride = spec.stride;
        p.pad = spec.pad;
        const Shape4 ws(spec.out_channels, in.c, spec.kernel, spec.kernel);
        p.weights = random_init
                        ? gaussian_init<T>(ws, stddev, seed ^ fnv1a(spec.name))
                        : Tensor<T>(ws);
        p.bias.assign(static_cast<size_t>(spec.out_channels), T(0));
        m.conv.emplace(spec.name, std::move(p));
        break;
      }
      case LayerKind::deconv: {
        if (spec.init == "bilinear") {
          if (in.c != spec.out_channels)
            throw ConfigError("bilinear upsample layer '" + spec.name +
                              "' must keep channel count");
          m.conv.emplace(spec.name, bilinear_upsample_kernel<T>(spec.stride, in.c));
        } else {
          ConvParams<T> p;
          p.stride = spec.stride;
          p.pad = spec.pad;
          const Shape4 ws(in.c, spec.out_channels, spec.kernel, spec.kernel);
          p.weights = random_init
                          ? gaussian_init<T>(ws, stddev, seed ^ fnv1a(spec.name))
                          : Tensor<T>(ws);
          p.bias.assign(static_cast<size_t>(spec.out_channels), T(0));
          m.conv.emplace(spec.name, std::move(p));
        }
        break;
      }
      case LayerKind::batchnorm:
        m.bn.emplace(spec.name, BatchNormState<T>::identity(in.c));
        break;
      default:
        break;
    }
  }
  return m;
}

}  // namespace netdetail

template <class T>
ModelT<T> init_model(const NetworkConfig& cfg, uint64_t seed, double stddev) {
  return netdetail::allocate_model<T>(cfg, true, seed, stddev);
}

template <class T>
ForwardResult<T> forward(ModelT<T>& model, const Tensor<T>& x, BnMode mode,
                         bool want_trace) {
  const Shape4& want = model.config.input_shape;
  if (x.shape().c != want.c || x.shape().h != want.h || x.shape().w != want.w)
    throw ShapeError("forward: input " + x.shape().str() + " does not match configured " +
                     want.str() + " (batch free)");

  ForwardResult<T> res;
  ForwardTrace<T> trace;
  if (want_trace) trace.input = x;

  Tensor<T> cur = x;
  std::map<std::string, SwitchMap> switches;
  std::map<std::string, Shape4> pool_inputs;

  for (const LayerSpec& spec : model.config.layers) {
    switch (spec.kind) {
      case LayerKind::conv:
        cur = conv2d_forward(cur, model.conv.at(spec.name));
        break;
      case LayerKind::deconv: {
        const auto& p = model.conv.at(spec.name);
        const Shape4 in_shape = cur.shape();
        cur = deconv2d_forward(cur, p);
        if (spec.renormalize) {
          const Tensor<T> cov = netdetail::upsample_coverage(p, in_shape.h, in_shape.w);
          netdetail::renormalize_by_coverage(cur, cov);
        }
        break;
      }
      case LayerKind::maxpool: {
        pool_inputs[spec.name] = cur.shape();
        auto [y, sw] = maxpool2d(cur);
        switches.emplace(spec.name, std::move(sw));
        cur = std::move(y);
        break;
      }
      case LayerKind::maxunpool: {
        auto it = switches.find(spec.unpool_pair);
        if (it == switches.end())
          throw ConfigError("unpool '" + spec.name + "' has no switches from pool '" +
                            spec.unpool_pair + "' in this pass");
        cur = maxunpool2d(cur, it->second, pool_inputs.at(spec.unpool_pair));
        break;
      }
      case LayerKind::relu:
        cur = relu_forward(cur);
        break;
      case LayerKind::batchnorm: {
        auto& state = model.bn.at(spec.name);
        state.mode = mode;
        cur = batchnorm_forward(cur, state);
        break;
      }
      case LayerKind::crop:
        cur = crop_center(cur, Shape4(cur.shape().n, cur.shape().c, spec.crop_h, spec.crop_w));
        break;
      case LayerKind::softmax:
        cur = softmax_per_pixel(cur);
        break;
    }
    if (want_trace) trace.outputs.push_back(cur);
  }

  res.output = std::move(cur);
  if (want_trace) {
    trace.switches = std::move(switches);
    res.trace = std::move(trace);
  }
  return res;
}

template <class T>
std::vector<ParamRef<T>> param_registry(ModelT<T>& model) {
  std::vector<ParamRef<T>> refs;
  for (const LayerSpec& spec : model.config.layers) {
    if ((spec.kind == LayerKind::conv || spec.kind == LayerKind::deconv) && !spec.frozen) {
      auto& p = model.conv.at(spec.name);
      refs.push_back({spec.name + ".weight", p.weights.data(), p.weights.size()});
      refs.push_back({spec.name + ".bias", p.bias.data(),
                      static_cast<int64_t>(p.bias.size())});
    } else if (spec.kind == LayerKind::batchnorm) {
      auto& s = model.bn.at(spec.name);
      refs.push_back({spec.name + ".gamma", s.gamma.data(),
                      static_cast<int64_t>(s.gamma.size())});
      refs.push_back({spec.name + ".beta", s.beta.data(),
                      static_cast<int64_t>(s.beta.size())});
    }
  }
  return refs;
}

template <class T>
GradMap<T> backward(ModelT<T>& model, const ForwardTrace<T>& trace,
                    const Tensor<T>& d_output) {
  const auto& layers = model.config.layers;
  if (trace.outputs.size() != layers.size() || trace.input.empty())
    throw StateError("backward: trace is missing or stale");
  if (!(d_output.shape() == trace.outputs.back().shape()))
    throw ShapeError("backward: d_output " + d_output.shape().str() +
                     " != network output " + trace.outputs.back().shape().str());

  GradMap<T> grads;
  Tensor<T> d = d_output;
  for (int64_t i = static_cast<int64_t>(layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& spec = layers[static_cast<size_t>(i)];
    const Tensor<T>& input = i == 0 ? trace.input : trace.outputs[static_cast<size_t>(i - 1)];
    switch (spec.kind) {
      case LayerKind::conv: {
        auto g = conv2d_backward(input, model.conv.at(spec.name), d);
        if (!spec.frozen) {
          grads.emplace(spec.name + ".weight", std::move(g.d_weights.vec()));
          grads.emplace(spec.name + ".bias", std::move(g.d_bias));
        }
        d = std::move(g.d_input);
        break;
      }
      case LayerKind::deconv: {
        const auto& p = model.conv.at(spec.name);
        if (spec.renormalize) {
          const Tensor<T> cov =
              netdetail::upsample_coverage(p, input.shape().h, input.shape().w);
          netdetail::renormalize_by_coverage(d, cov);
        }
        auto g = deconv2d_backward(input, p, d);
        if (!spec.frozen) {
          grads.emplace(spec.name + ".weight", std::move(g.d_weights.vec()));
          grads.emplace(spec.name + ".bias", std::move(g.d_bias));
        }
        d = std::move(g.d_input);
        break;
      }
      case LayerKind::maxpool:
        d = maxpool2d_backward(d, trace.switches.at(spec.name), input.shape());
        break;
      case LayerKind::maxunpool:
        d = maxunpool2d_backward(d, trace.switches.at(spec.unpool_pair));
        break;
      case LayerKind::relu:
        d = relu_backward(input, d);
        break;
      case LayerKind::batchnorm: {
        auto g = batchnorm_backward(input, model.bn.at(spec.name), d);
        grads.emplace(spec.name + ".gamma", std::move(g.d_gamma));
        grads.emplace(spec.name + ".beta", std::move(g.d_beta));
        d = std::move(g.d_input);
        break;
      }
      case LayerKind::crop:
        d = uncrop_backward(d, input.shape());
        break;
      case LayerKind::softmax:
        d = softmax_per_pixel_backward(trace.outputs[static_cast<size_t>(i)], d);
        break;
    }
  }
  return grads;
}

}  // namespace dseg
