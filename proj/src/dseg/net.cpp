#include "dseg/net.hpp"

#include <set>

#include "dseg/serialize.hpp"

namespace dseg {

std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::maxunpool: return "maxunpool";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::crop: return "crop";
    case LayerKind::softmax: return "softmax";
  }
  throw ConfigError("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "deconv") return LayerKind::deconv;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "maxunpool") return LayerKind::maxunpool;
  if (s == "relu") return LayerKind::relu;
  if (s == "batchnorm") return LayerKind::batchnorm;
  if (s == "crop") return LayerKind::crop;
  if (s == "softmax") return LayerKind::softmax;
  throw ConfigError("unknown layer kind '" + s + "'");
}

std::vector<Shape4> compute_shape_flow(const NetworkConfig& cfg) {
  std::vector<Shape4> flow;
  flow.reserve(cfg.layers.size());
  std::set<std::string> names;
  std::map<std::string, Shape4> pool_inputs;
  std::map<std::string, int> pool_consumers;

  Shape4 cur = cfg.input_shape;
  for (const LayerSpec& spec : cfg.layers) {
    if (!names.insert(spec.name).second)
      throw ConfigError("duplicate layer name '" + spec.name + "'");
    switch (spec.kind) {
      case LayerKind::conv: {
        if (spec.kernel < 1 || spec.stride < 1 || spec.pad < 0 || spec.out_channels < 1)
          throw ConfigError("layer '" + spec.name + "': bad conv geometry");
        const int64_t oh = (cur.h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        const int64_t ow = (cur.w + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        if (oh < 1 || ow < 1)
          throw ConfigError("layer '" + spec.name + "': kernel does not fit " + cur.str());
        cur = Shape4(cur.n, spec.out_channels, oh, ow);
        break;
      }
      case LayerKind::deconv: {
        if (spec.kernel < 1 || spec.stride < 1 || spec.pad < 0 || spec.out_channels < 1)
          throw ConfigError("layer '" + spec.name + "': bad deconv geometry");
        const int64_t oh = (cur.h - 1) * spec.stride + spec.kernel - 2 * spec.pad;
        const int64_t ow = (cur.w - 1) * spec.stride + spec.kernel - 2 * spec.pad;
        if (oh < 1 || ow < 1)
          throw ConfigError("layer '" + spec.name + "': pad too large for " + cur.str());
        cur = Shape4(cur.n, spec.out_channels, oh, ow);
        break;
      }
      case LayerKind::maxpool: {
        if (cur.h % 2 != 0 || cur.w % 2 != 0)
          throw ConfigError("layer '" + spec.name + "': pooling needs even extents, got " +
                            cur.str());
        pool_inputs[spec.name] = cur;
        cur = Shape4(cur.n, cur.c, cur.h / 2, cur.w / 2);
        break;
      }
      case LayerKind::maxunpool: {
        auto it = pool_inputs.find(spec.unpool_pair);
        if (it == pool_inputs.end())
          throw ConfigError("unpool '" + spec.name + "' references unknown pool '" +
                            spec.unpool_pair + "'");
        if (++pool_consumers[spec.unpool_pair] > 1)
          throw ConfigError("pool '" + spec.unpool_pair + "' paired with multiple unpools");
        const Shape4& target = it->second;
        if (cur.c != target.c || cur.h * 2 != target.h || cur.w * 2 != target.w)
          throw ConfigError("unpool '" + spec.name + "': input " + cur.str() +
                            " is not the pooled form of '" + spec.unpool_pair + "' input " +
                            target.str());
        cur = Shape4(cur.n, target.c, target.h, target.w);
        break;
      }
      case LayerKind::relu:
      case LayerKind::batchnorm:
        break;
      case LayerKind::softmax:
        if (cur.c < 2)
          throw ConfigError("layer '" + spec.name + "': softmax needs >= 2 channels");
        break;
      case LayerKind::crop: {
        if (spec.crop_h < 1 || spec.crop_w < 1 || spec.crop_h > cur.h || spec.crop_w > cur.w)
          throw ConfigError("layer '" + spec.name + "': crop target exceeds " + cur.str());
        cur = Shape4(cur.n, cur.c, spec.crop_h, spec.crop_w);
        break;
      }
    }
    flow.push_back(cur);
  }
  return flow;
}

nlohmann::json NetworkConfig::to_json() const {
  nlohmann::json j;
  j["input"] = {{"c", input_shape.c}, {"h", input_shape.h}, {"w", input_shape.w}};
  j["num_classes"] = num_classes;
  j["scale"] = scale;
  j["layers"] = nlohmann::json::array();
  for (const LayerSpec& s : layers) {
    nlohmann::json l;
    l["name"] = s.name;
    l["kind"] = layer_kind_name(s.kind);
    if (s.kind == LayerKind::conv || s.kind == LayerKind::deconv ||
        s.kind == LayerKind::maxpool || s.kind == LayerKind::maxunpool) {
      l["kernel"] = s.kernel;
      l["stride"] = s.stride;
      l["pad"] = s.pad;
    }
    if (s.kind == LayerKind::conv || s.kind == LayerKind::deconv)
      l["channels"] = s.out_channels;
    if (s.kind == LayerKind::maxunpool) l["pair"] = s.unpool_pair;
    if (s.kind == LayerKind::crop) l["crop"] = {s.crop_h, s.crop_w};
    if (s.frozen) l["frozen"] = true;
    if (s.init != "gaussian") l["init"] = s.init;
    if (s.renormalize) l["renormalize"] = true;
    j["layers"].push_back(l);
  }
  return j;
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  try {
    const auto& in = j.at("input");
    cfg.input_shape = Shape4(1, in.at("c").get<int64_t>(), in.at("h").get<int64_t>(),
                             in.at("w").get<int64_t>());
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    cfg.scale = j.value("scale", 1.0);
    for (const auto& l : j.at("layers")) {
      LayerSpec s;
      s.name = l.at("name").get<std::string>();
      s.kind = layer_kind_from_name(l.at("kind").get<std::string>());
      s.kernel = l.value("kernel", 0);
      s.stride = l.value("stride", 1);
      s.pad = l.value("pad", 0);
      s.out_channels = l.value("channels", 0);
      s.unpool_pair = l.value("pair", std::string());
      if (l.contains("crop")) {
        s.crop_h = l.at("crop").at(0).get<int64_t>();
        s.crop_w = l.at("crop").at(1).get<int64_t>();
      }
      s.frozen = l.value("frozen", false);
      s.init = l.value("init", std::string("gaussian"));
      s.renormalize = l.value("renormalize", false);
      cfg.layers.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config json: ") + e.what());
  }
  compute_shape_flow(cfg);  // reject configs that cannot compose
  return cfg;
}

namespace {

int64_t scaled(int64_t channels, double scale) {
  const int64_t c = static_cast<int64_t>(std::llround(static_cast<double>(channels) * scale));
  return std::max<int64_t>(1, c);
}

// Number of 2x2 pool stages that fit the input side: one per factor of two,
// at most the five of the reference table.
int pool_stages(int64_t side) {
  int s = 0;
  while (s < 5 && side % 2 == 0 && side / 2 >= 1) {
    side /= 2;
    ++s;
  }
  return s;
}

void push_conv_bn_relu(NetworkConfig& cfg, const std::string& name, LayerKind kind,
                       int kernel, int stride, int pad, int64_t out_channels) {
  LayerSpec conv;
  conv.name = name;
  conv.kind = kind;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.pad = pad;
  conv.out_channels = out_channels;
  cfg.layers.push_back(conv);
  LayerSpec bn;
  bn.name = name + "-bn";
  bn.kind = LayerKind::batchnorm;
  cfg.layers.push_back(bn);
  LayerSpec relu;
  relu.name = name + "-relu";
  relu.kind = LayerKind::relu;
  cfg.layers.push_back(relu);
}

constexpr int kBlockSizes[5] = {2, 2, 3, 3, 3};
constexpr int64_t kBlockChannels[5] = {64, 128, 256, 512, 512};

void build_encoder(NetworkConfig& cfg, double scale, int stages) {
  for (int b = 0; b < 5; ++b) {
    for (int i = 0; i < kBlockSizes[b]; ++i)
      push_conv_bn_relu(cfg,
                        "conv" + std::to_string(b + 1) + "-" + std::to_string(i + 1),
                        LayerKind::conv, 3, 1, 1, scaled(kBlockChannels[b], scale));
    if (b < stages) {
      LayerSpec pool;
      pool.name = "pool" + std::to_string(b + 1);
      pool.kind = LayerKind::maxpool;
      pool.kernel = 2;
      pool.stride = 2;
      cfg.layers.push_back(pool);
    }
  }
}

}  // namespace

NetworkConfig build_deconvnet(int64_t num_classes, double scale, int64_t input_side) {
  if (num_classes < 2) throw ConfigError("build_deconvnet: need >= 2 classes");
  if (!(scale > 0.0) || scale > 1.0)
    throw ConfigError("build_deconvnet: scale must be in (0, 1]");
  if (input_side < 2) throw ConfigError("build_deconvnet: input side too small");
  const int stages = pool_stages(input_side);
  if (stages == 0) throw ConfigError("build_deconvnet: input side must be even");
  const int64_t final_extent = input_side >> stages;

  NetworkConfig cfg;
  cfg.input_shape = Shape4(1, 3, input_side, input_side);
  cfg.num_classes = num_classes;
  cfg.scale = scale;

  build_encoder(cfg, scale, stages);

  // Two class-projection layers realized as convolutions, then the mirror.
  push_conv_bn_relu(cfg, "fc6", LayerKind::conv, static_cast<int>(final_extent), 1, 0,
                    scaled(4096, scale));
  push_conv_bn_relu(cfg, "fc7", LayerKind::conv, 1, 1, 0, scaled(4096, scale));
  push_conv_bn_relu(cfg, "deconv-fc6", LayerKind::deconv, static_cast<int>(final_extent),
                    1, 0, scaled(512, scale));

  for (int b = 4; b >= 0; --b) {
    if (b < stages) {
      LayerSpec unpool;
      unpool.name = "unpool" + std::to_string(b + 1);
      unpool.kind = LayerKind::maxunpool;
      unpool.kernel = 2;
      unpool.stride = 2;
      unpool.unpool_pair = "pool" + std::to_string(b + 1);
      cfg.layers.push_back(unpool);
    }
    const int64_t below = b > 0 ? kBlockChannels[b - 1] : kBlockChannels[0];
    for (int i = 0; i < kBlockSizes[b]; ++i) {
      const bool last = i == kBlockSizes[b] - 1;
      push_conv_bn_relu(cfg,
                        "deconv" + std::to_string(b + 1) + "-" + std::to_string(i + 1),
                        LayerKind::deconv, 3, 1, 1,
                        scaled(last ? below : kBlockChannels[b], scale));
    }
  }

  LayerSpec out;
  out.name = "output";
  out.kind = LayerKind::conv;
  out.kernel = 1;
  out.stride = 1;
  out.pad = 0;
  out.out_channels = num_classes;
  cfg.layers.push_back(out);

  compute_shape_flow(cfg);
  return cfg;
}

NetworkConfig build_fcn_baseline(int64_t num_classes, double scale, int64_t input_side) {
  if (num_classes < 2) throw ConfigError("build_fcn_baseline: need >= 2 classes");
  if (!(scale > 0.0) || scale > 1.0)
    throw ConfigError("build_fcn_baseline: scale must be in (0, 1]");
  const int stages = pool_stages(input_side);
  if (stages == 0) throw ConfigError("build_fcn_baseline: input side must be even");

  NetworkConfig cfg;
  cfg.input_shape = Shape4(1, 3, input_side, input_side);
  cfg.num_classes = num_classes;
  cfg.scale = scale;

  build_encoder(cfg, scale, stages);

  LayerSpec score;
  score.name = "score";
  score.kind = LayerKind::conv;
  score.kernel = 1;
  score.stride = 1;
  score.pad = 0;
  score.out_channels = num_classes;
  cfg.layers.push_back(score);

  const int factor = 1 << stages;
  LayerSpec up;
  up.name = "upsample";
  up.kind = LayerKind::deconv;
  up.kernel = 2 * factor - factor % 2;
  up.stride = factor;
  up.pad = (up.kernel - factor) / 2;
  up.out_channels = num_classes;
  up.frozen = true;
  up.init = "bilinear";
  up.renormalize = true;
  cfg.layers.push_back(up);

  compute_shape_flow(cfg);
  return cfg;
}

namespace {
TensorF vec_tensor(const std::vector<float>& v) {
  return TensorF(Shape4(1, static_cast<int64_t>(v.size()), 1, 1), v);
}
}  // namespace

void save_model(const Model& model, const std::string& path) {
  Container c;
  c.put_json("config", model.config.to_json());
  nlohmann::json bn_meta;
  for (const LayerSpec& spec : model.config.layers) {
    if (spec.kind == LayerKind::conv || spec.kind == LayerKind::deconv) {
      const auto& p = model.conv.at(spec.name);
      c.put_tensor(spec.name + ".weight", p.weights);
      c.put_tensor(spec.name + ".bias", vec_tensor(p.bias));
    } else if (spec.kind == LayerKind::batchnorm) {
      const auto& s = model.bn.at(spec.name);
      c.put_tensor(spec.name + ".gamma", vec_tensor(s.gamma));
      c.put_tensor(spec.name + ".beta", vec_tensor(s.beta));
      c.put_tensor(spec.name + ".running_mean", vec_tensor(s.running_mean));
      c.put_tensor(spec.name + ".running_var", vec_tensor(s.running_var));
      bn_meta[spec.name] = {{"initialized", s.initialized},
                            {"epsilon", s.epsilon},
                            {"momentum", s.momentum}};
    }
  }
  c.put_json("bn_meta", bn_meta);
  c.save(path);
}

namespace {

std::vector<float> tensor_vec(const TensorF& t, int64_t want, const std::string& layer) {
  if (t.size() != want)
    throw IoError("layer '" + layer + "': stored vector has " + std::to_string(t.size()) +
                  " entries, expected " + std::to_string(want));
  return t.vec();
}

Model load_model_impl(const Container& c, const NetworkConfig& cfg) {
  Model m = netdetail::allocate_model<float>(cfg, false, 0, 0.0);
  const nlohmann::json bn_meta = c.has("bn_meta") ? c.get_json("bn_meta") : nlohmann::json();
  for (const LayerSpec& spec : cfg.layers) {
    if (spec.kind == LayerKind::conv || spec.kind == LayerKind::deconv) {
      auto& p = m.conv.at(spec.name);
      if (!c.has(spec.name + ".weight"))
        throw IoError("layer '" + spec.name + "': weights missing from file");
      TensorF w = c.get_tensor(spec.name + ".weight");
      if (!(w.shape() == p.weights.shape()))
        throw IoError("layer '" + spec.name + "': expected weights " +
                      p.weights.shape().str() + ", file has " + w.shape().str());
      p.weights = std::move(w);
      p.bias = tensor_vec(c.get_tensor(spec.name + ".bias"),
                          static_cast<int64_t>(p.bias.size()), spec.name);
    } else if (spec.kind == LayerKind::batchnorm) {
      auto& s = m.bn.at(spec.name);
      const auto want = static_cast<int64_t>(s.gamma.size());
      s.gamma = tensor_vec(c.get_tensor(spec.name + ".gamma"), want, spec.name);
      s.beta = tensor_vec(c.get_tensor(spec.name + ".beta"), want, spec.name);
      s.running_mean = tensor_vec(c.get_tensor(spec.name + ".running_mean"), want, spec.name);
      s.running_var = tensor_vec(c.get_tensor(spec.name + ".running_var"), want, spec.name);
      if (bn_meta.contains(spec.name)) {
        const auto& meta = bn_meta.at(spec.name);
        s.initialized = meta.at("initialized").get<bool>();
        s.epsilon = meta.at("epsilon").get<float>();
        s.momentum = meta.at("momentum").get<float>();
      }
    }
  }
  return m;
}

}  // namespace

Model load_model(const std::string& path) {
  const Container c = Container::load(path);
  if (!c.has("config")) throw IoError(path + ": file has no embedded network config");
  const NetworkConfig cfg = NetworkConfig::from_json(c.get_json("config"));
  return load_model_impl(c, cfg);
}

Model load_model_expected(const std::string& path, const NetworkConfig& expected) {
  const Container c = Container::load(path);
  return load_model_impl(c, expected);
}

}  // namespace dseg
