#include "dseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dseg/image.hpp"

namespace dseg {

std::string agg_mode_name(AggMode m) { return m == AggMode::max ? "max" : "sum"; }

AggMode agg_mode_from_name(const std::string& s) {
  if (s == "max") return AggMode::max;
  if (s == "sum") return AggMode::sum;
  throw ConfigError("aggregation mode must be 'max' or 'sum', got '" + s + "'");
}

std::vector<BoxGeometry> select_proposals(const std::vector<BoxGeometry>& all,
                                          int64_t top_k) {
  if (all.empty()) throw StateError("select_proposals: no proposals supplied");
  if (top_k < 1) throw ConfigError("select_proposals: top_k must be >= 1");
  std::vector<BoxGeometry> sorted = all;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const BoxGeometry& a, const BoxGeometry& b) { return a.score > b.score; });
  if (static_cast<int64_t>(sorted.size()) > top_k)
    sorted.resize(static_cast<size_t>(top_k));
  return sorted;
}

namespace {

TensorF crop_tensor(const TensorF& image, const BoxGeometry& box) {
  TensorF out(Shape4(1, image.shape().c, box.height(), box.width()));
  for (int64_t c = 0; c < image.shape().c; ++c)
    for (int64_t y = 0; y < box.height(); ++y)
      for (int64_t x = 0; x < box.width(); ++x)
        out.at(0, c, y, x) = image.at(0, c, box.y0 + y, box.x0 + x);
  return out;
}

void subtract_means(TensorF& x, const std::array<float, 3>& means) {
  for (int64_t c = 0; c < x.shape().c; ++c) {
    float* p = x.data() + c * x.shape().plane();
    for (int64_t i = 0; i < x.shape().plane(); ++i)
      p[i] -= means[static_cast<size_t>(c % 3)];
  }
}

}  // namespace

ProposalPrediction predict_proposal(Model& model, const TensorF& image,
                                    const BoxGeometry& box,
                                    const std::array<float, 3>& pixel_means,
                                    double extend_factor) {
  if (!box.valid()) throw ConfigError("predict_proposal: degenerate box");
  const BoxGeometry ebox =
      extend_box(box, extend_factor, image.shape().w, image.shape().h);
  const int64_t side = model.config.input_shape.h;
  TensorF crop = bilinear_resize(crop_tensor(image, ebox), side, side);
  subtract_means(crop, pixel_means);
  auto res = forward(model, crop, BnMode::infer, false);
  return ProposalPrediction{ebox, std::move(res.output)};
}

PlacedMap place_in_image(const ProposalPrediction& pred, int64_t image_h, int64_t image_w,
                         AggMode mode) {
  const int64_t classes = pred.score_map.shape().c;
  PlacedMap out;
  out.box = pred.box;
  out.map = full<float>(Shape4(1, classes, image_h, image_w),
                        mode == AggMode::max ? kNeutralMax : 0.0f);
  const TensorF local = bilinear_resize(pred.score_map, pred.box.height(), pred.box.width());
  for (int64_t c = 0; c < classes; ++c)
    for (int64_t y = 0; y < pred.box.height(); ++y)
      for (int64_t x = 0; x < pred.box.width(); ++x)
        out.map.at(0, c, pred.box.y0 + y, pred.box.x0 + x) = local.at(0, c, y, x);
  return out;
}

AggregatedMap aggregate(const std::vector<PlacedMap>& maps, AggMode mode) {
  if (maps.empty()) throw StateError("aggregate: empty proposal list");
  const Shape4 shape = maps.front().map.shape();
  AggregatedMap agg;
  agg.mode = mode;
  agg.P = full<float>(shape, mode == AggMode::max ? kNeutralMax : 0.0f);
  agg.coverage.assign(static_cast<size_t>(shape.plane()), 0);
  for (const PlacedMap& pm : maps) {
    if (!(pm.map.shape() == shape))
      throw ShapeError("aggregate: placed map " + pm.map.shape().str() +
                       " != expected " + shape.str());
    if (mode == AggMode::max) {
      for (int64_t i = 0; i < agg.P.size(); ++i)
        agg.P[i] = std::max(agg.P[i], pm.map[i]);
    } else {
      for (int64_t i = 0; i < agg.P.size(); ++i) agg.P[i] += pm.map[i];
    }
    for (int64_t y = pm.box.y0; y < pm.box.y1; ++y)
      for (int64_t x = pm.box.x0; x < pm.box.x1; ++x)
        ++agg.coverage[static_cast<size_t>(y * shape.w + x)];
  }
  return agg;
}

SegmentationResult finalize(const AggregatedMap& agg) {
  const Shape4 shape = agg.P.shape();
  if (static_cast<int64_t>(agg.coverage.size()) != shape.plane())
    throw ShapeError("finalize: coverage does not match map extents");
  SegmentationResult res;
  res.class_probs = TensorF(shape);
  res.label_mask = LabelMask(Shape4(1, 1, shape.h, shape.w));
  const int64_t plane = shape.plane();
  for (int64_t px = 0; px < plane; ++px) {
    float* out = res.class_probs.data() + px;
    if (agg.coverage[static_cast<size_t>(px)] == 0) {
      // No proposal covered this pixel: background, probability one.
      out[0] = 1.0f;
      for (int64_t c = 1; c < shape.c; ++c) out[c * plane] = 0.0f;
      res.label_mask[px] = 0;
      continue;
    }
    const float* in = agg.P.data() + px;
    float mx = in[0];
    int32_t arg = 0;
    for (int64_t c = 1; c < shape.c; ++c)
      if (in[c * plane] > mx) {
        mx = in[c * plane];
        arg = static_cast<int32_t>(c);
      }
    double sum = 0.0;
    for (int64_t c = 0; c < shape.c; ++c) {
      const double e = std::exp(static_cast<double>(in[c * plane] - mx));
      out[c * plane] = static_cast<float>(e);
      sum += e;
    }
    for (int64_t c = 0; c < shape.c; ++c)
      out[c * plane] = static_cast<float>(static_cast<double>(out[c * plane]) / sum);
    res.label_mask[px] = arg;
  }
  return res;
}

TensorF ensemble_mean(const TensorF& a, const TensorF& b) {
  detail::check_same_shape(a, b, "ensemble_mean");
  TensorF out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = 0.5f * (a[i] + b[i]);
  return out;
}

TensorF whole_image_probs(Model& model, const TensorF& image,
                          const std::array<float, 3>& pixel_means) {
  const int64_t side = model.config.input_shape.h;
  TensorF x = bilinear_resize(image, side, side);
  subtract_means(x, pixel_means);
  auto res = forward(model, x, BnMode::infer, false);
  TensorF probs = softmax_per_pixel(res.output);
  return bilinear_resize(probs, image.shape().h, image.shape().w);
}

namespace {

LabelMask argmax_labels(const TensorF& probs) {
  const Shape4 s = probs.shape();
  LabelMask labels(Shape4(1, 1, s.h, s.w));
  const int64_t plane = s.plane();
  for (int64_t px = 0; px < plane; ++px) {
    const float* in = probs.data() + px;
    float mx = in[0];
    int32_t arg = 0;
    for (int64_t c = 1; c < s.c; ++c)
      if (in[c * plane] > mx) {
        mx = in[c * plane];
        arg = static_cast<int32_t>(c);
      }
    labels[px] = arg;
  }
  return labels;
}

nlohmann::json box_json(const BoxGeometry& b) {
  return {{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"score", b.score}};
}

}  // namespace

SegmentationResult segment_image(Model& model, Model* fcn_model, const TensorF& image,
                                 std::vector<BoxGeometry> proposals,
                                 const SegmentOptions& opt) {
  const int64_t H = image.shape().h, W = image.shape().w;
  bool grid_fallback = false;
  if (proposals.empty()) {
    proposals = grid_proposals(image, opt.grid_scales, opt.grid_stride);
    grid_fallback = true;
  }
  const std::vector<BoxGeometry> selected = select_proposals(proposals, opt.top_k);

  // Stamping each placed map into P in selection order is arithmetically the
  // same as materializing all G_i and reducing; it just bounds memory.
  const int64_t classes = model.config.num_classes;
  AggregatedMap agg;
  agg.mode = opt.mode;
  agg.P = full<float>(Shape4(1, classes, H, W),
                      opt.mode == AggMode::max ? kNeutralMax : 0.0f);
  agg.coverage.assign(static_cast<size_t>(H * W), 0);

  nlohmann::json used = nlohmann::json::array();
  for (const BoxGeometry& box : selected) {
    const ProposalPrediction pred =
        predict_proposal(model, image, box, opt.pixel_means, opt.extend_factor);
    const TensorF local =
        bilinear_resize(pred.score_map, pred.box.height(), pred.box.width());
    for (int64_t c = 0; c < classes; ++c)
      for (int64_t y = 0; y < pred.box.height(); ++y) {
        const float* src = local.data() + (c * pred.box.height() + y) * pred.box.width();
        float* dst = agg.P.data() + (c * H + pred.box.y0 + y) * W + pred.box.x0;
        if (opt.mode == AggMode::max) {
          for (int64_t x = 0; x < pred.box.width(); ++x)
            dst[x] = std::max(dst[x], src[x]);
        } else {
          for (int64_t x = 0; x < pred.box.width(); ++x) dst[x] += src[x];
        }
      }
    for (int64_t y = pred.box.y0; y < pred.box.y1; ++y)
      for (int64_t x = pred.box.x0; x < pred.box.x1; ++x)
        ++agg.coverage[static_cast<size_t>(y * W + x)];
    used.push_back({{"proposal", box_json(box)}, {"crop", box_json(pred.box)}});
  }

  SegmentationResult res = finalize(agg);
  const bool ensemble = fcn_model != nullptr;
  if (ensemble) {
    const TensorF fcn_probs = whole_image_probs(*fcn_model, image, opt.pixel_means);
    res.class_probs = ensemble_mean(res.class_probs, fcn_probs);
    res.label_mask = argmax_labels(res.class_probs);
  }
  res.provenance = {{"mode", agg_mode_name(opt.mode)},
                    {"top_k", opt.top_k},
                    {"proposal_count", selected.size()},
                    {"grid_fallback", grid_fallback},
                    {"ensemble", ensemble},
                    {"crf", "none"},  // hook position for the out-of-scope refiner
                    {"proposals", used}};
  return res;
}

std::vector<std::string> dump_activations(Model& model, const TensorF& image,
                                          const std::vector<std::string>& layer_names,
                                          const std::array<float, 3>& pixel_means,
                                          const std::string& out_dir) {
  const int64_t side = model.config.input_shape.h;
  TensorF x = bilinear_resize(image, side, side);
  subtract_means(x, pixel_means);
  auto res = forward(model, x, BnMode::infer, true);

  std::map<std::string, size_t> index;
  for (size_t i = 0; i < model.config.layers.size(); ++i)
    index[model.config.layers[i].name] = i;

  std::vector<std::string> written;
  for (const std::string& name : layer_names) {
    auto it = index.find(name);
    if (it == index.end()) {
      std::string valid;
      for (const auto& spec : model.config.layers) {
        if (!valid.empty()) valid += ", ";
        valid += spec.name;
      }
      throw ConfigError("unknown layer '" + name + "'; valid layers: " + valid);
    }
    const TensorF& act = res.trace->outputs[it->second];
    const Shape4 s = act.shape();
    // Channel with maximum L2 energy is the representative one.
    int64_t best_c = 0;
    double best_energy = -1.0;
    for (int64_t c = 0; c < s.c; ++c) {
      double e = 0.0;
      const float* p = act.data() + c * s.plane();
      for (int64_t i = 0; i < s.plane(); ++i)
        e += static_cast<double>(p[i]) * static_cast<double>(p[i]);
      if (e > best_energy) {
        best_energy = e;
        best_c = c;
      }
    }
    const float* p = act.data() + best_c * s.plane();
    float lo = p[0], hi = p[0];
    for (int64_t i = 0; i < s.plane(); ++i) {
      lo = std::min(lo, p[i]);
      hi = std::max(hi, p[i]);
    }
    const float span = hi > lo ? hi - lo : 1.0f;
    ImageU8 img;
    img.width = static_cast<int>(s.w);
    img.height = static_cast<int>(s.h);
    img.channels = 1;
    img.pixels.resize(static_cast<size_t>(s.plane()));
    for (int64_t i = 0; i < s.plane(); ++i)
      img.pixels[static_cast<size_t>(i)] =
          static_cast<uint8_t>(std::lround((p[i] - lo) / span * 255.0f));
    const std::string path =
        (std::filesystem::path(out_dir) / (name + ".png")).string();
    write_png(path, img);
    written.push_back(path);
  }
  return written;
}

}  // namespace dseg
