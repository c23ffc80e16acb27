#include "dseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>

namespace fs = std::filesystem;

namespace dseg {

double box_iou(const BoxGeometry& a, const BoxGeometry& b) {
  const int64_t ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int64_t ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const int64_t iw = std::max<int64_t>(0, ix1 - ix0), ih = std::max<int64_t>(0, iy1 - iy0);
  const int64_t inter = iw * ih;
  const int64_t uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace {

// Connected components (4-neighborhood) of same-class pixels; used when no
// per-instance annotation exists.
void recover_instances(Sample& s, int64_t num_classes) {
  const int64_t h = s.mask.shape().h, w = s.mask.shape().w;
  s.instance_map.assign(static_cast<size_t>(h * w), 0);
  s.instances.clear();
  std::vector<int64_t> stack;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int64_t at = y * w + x;
      const int32_t cls = s.mask[at];
      if (cls <= 0 || cls == kIgnoreLabel || s.instance_map[static_cast<size_t>(at)] != 0)
        continue;
      if (cls >= num_classes)
        throw IoError("sample '" + s.id + "': label " + std::to_string(cls) +
                      " >= num_classes " + std::to_string(num_classes));
      const int32_t inst_id = static_cast<int32_t>(s.instances.size()) + 1;
      BoxGeometry box{x, y, x + 1, y + 1, 0.0};
      stack.push_back(at);
      s.instance_map[static_cast<size_t>(at)] = inst_id;
      while (!stack.empty()) {
        const int64_t cur = stack.back();
        stack.pop_back();
        const int64_t cy = cur / w, cx = cur % w;
        box.x0 = std::min(box.x0, cx);
        box.y0 = std::min(box.y0, cy);
        box.x1 = std::max(box.x1, cx + 1);
        box.y1 = std::max(box.y1, cy + 1);
        const int64_t neigh[4] = {cur - w, cur + w, cur - 1, cur + 1};
        const bool ok[4] = {cy > 0, cy + 1 < h, cx > 0, cx + 1 < w};
        for (int k = 0; k < 4; ++k) {
          if (!ok[k]) continue;
          const int64_t nb = neigh[k];
          if (s.instance_map[static_cast<size_t>(nb)] == 0 && s.mask[nb] == cls) {
            s.instance_map[static_cast<size_t>(nb)] = inst_id;
            stack.push_back(nb);
          }
        }
      }
      s.instances.push_back({cls, box});
    }
}

void check_labels(const Sample& s, int64_t num_classes, const std::string& file) {
  for (int64_t i = 0; i < s.mask.size(); ++i) {
    const int32_t v = s.mask[i];
    if (v != kIgnoreLabel && (v < 0 || v >= num_classes))
      throw IoError(file + ": label " + std::to_string(v) + " outside [0," +
                    std::to_string(num_classes) + ") and not 255");
  }
}

Sample load_pair(const std::string& id, const std::string& image_path,
                 const std::string& mask_path, int64_t num_classes) {
  Sample s;
  s.id = id;
  s.image = image_to_tensor(read_png_rgb(image_path));
  s.mask = mask_to_labels(read_png_index(mask_path));
  if (s.mask.shape().h != s.image.shape().h || s.mask.shape().w != s.image.shape().w)
    throw IoError(mask_path + ": mask " + s.mask.shape().str() + " does not match image " +
                  s.image.shape().str());
  check_labels(s, num_classes, mask_path);
  recover_instances(s, num_classes);
  return s;
}

}  // namespace

std::vector<Sample> load_voc_style(const std::string& dir, int64_t num_classes) {
  const fs::path images = fs::path(dir) / "images";
  const fs::path masks = fs::path(dir) / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks))
    throw IoError(dir + ": expected images/ and masks/ subdirectories");
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  std::vector<Sample> out;
  for (const auto& stem : stems) {
    const fs::path mask = masks / (stem + ".png");
    if (!fs::exists(mask)) throw IoError("unpaired image '" + stem + "': no mask " +
                                         mask.string());
    out.push_back(load_pair(stem, (images / (stem + ".png")).string(), mask.string(),
                            num_classes));
  }
  for (const auto& e : fs::directory_iterator(masks)) {
    if (e.path().extension() != ".png") continue;
    if (!fs::exists(images / e.path().filename()))
      throw IoError("unpaired mask '" + e.path().stem().string() + "': no image");
  }
  return out;
}

std::vector<Sample> load_dataset(const std::string& manifest_path, int64_t num_classes) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError("cannot open manifest " + manifest_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path + ": bad manifest json: " + e.what());
  }
  const fs::path base = fs::path(manifest_path).parent_path();
  if (j.contains("num_classes") && j.at("num_classes").get<int64_t>() != num_classes)
    throw ConfigError(manifest_path + ": manifest num_classes " +
                      std::to_string(j.at("num_classes").get<int64_t>()) +
                      " != configured " + std::to_string(num_classes));
  std::vector<Sample> out;
  for (const auto& e : j.at("samples")) {
    Sample s = load_pair(e.at("id").get<std::string>(),
                         (base / e.at("image").get<std::string>()).string(),
                         (base / e.at("mask").get<std::string>()).string(), num_classes);
    s.split = e.value("split", "train");
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                   int64_t num_classes) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json manifest;
  manifest["num_classes"] = num_classes;
  manifest["samples"] = nlohmann::json::array();
  for (const Sample& s : samples) {
    const std::string img_rel = "images/" + s.id + ".png";
    const std::string mask_rel = "masks/" + s.id + ".png";
    write_png((fs::path(dir) / img_rel).string(), tensor_to_image(s.image));
    write_png((fs::path(dir) / mask_rel).string(), labels_to_mask(s.mask));
    manifest["samples"].push_back(
        {{"id", s.id}, {"image", img_rel}, {"mask", mask_rel}, {"split", s.split}});
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";
}

namespace {

void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

bool inside_shape(int32_t cls, int64_t x, int64_t y, int64_t cx, int64_t cy, int64_t r) {
  const int64_t dx = x - cx, dy = y - cy;
  switch (cls) {
    case 1: return dx * dx + dy * dy <= r * r;                       // disk
    case 2: return std::abs(dx) <= r && std::abs(dy) <= r;           // square
    default:  // upward triangle: apex (cx, cy-r), base corners (cx +- r, cy+r)
      return dy >= -r && dy <= r && std::abs(dx) * 2 <= (dy + r);
  }
}

}  // namespace

std::vector<Sample> synth_shapes(const SynthConfig& cfg) {
  if (cfg.count < 1) throw ConfigError("synth_shapes: count must be >= 1");
  if (cfg.num_foreground_classes < 1 || cfg.num_foreground_classes > 3)
    throw ConfigError("synth_shapes: 1..3 foreground classes supported");
  const int64_t side = cfg.image_side;
  if (side < 32) throw ConfigError("synth_shapes: image side too small");

  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(cfg.count));
  for (int64_t idx = 0; idx < cfg.count; ++idx) {
    Rng rng(cfg.seed * 0x9e3779b9ULL + static_cast<uint64_t>(idx) * 7919ULL + 1);
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(idx));
    s.id = std::string("synth-") + buf;
    s.split = idx >= cfg.count - cfg.val_count ? "val" : "train";
    s.image = TensorF(Shape4(1, 3, side, side));
    s.mask = LabelMask(Shape4(1, 1, side, side));
    s.instance_map.assign(static_cast<size_t>(side * side), 0);

    // Background: muted base color, mild diagonal gradient, per-pixel noise.
    float base[3];
    hsv_to_rgb(rng.uniform(), 0.05 + 0.12 * rng.uniform(), 0.4 + 0.3 * rng.uniform(), base);
    const double gx = rng.uniform(-0.06, 0.06), gy = rng.uniform(-0.06, 0.06);
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x) {
        const double grad = gx * (static_cast<double>(x) / side - 0.5) +
                            gy * (static_cast<double>(y) / side - 0.5);
        for (int64_t c = 0; c < 3; ++c) {
          const double noise = rng.uniform(-0.05, 0.05);
          s.image.at(0, c, y, x) =
              static_cast<float>(std::clamp(base[c] + grad + noise, 0.0, 1.0));
        }
      }

    const int64_t shapes = 1 + rng.uniform_int(3);
    const int64_t rmin = std::max<int64_t>(6, side * 9 / 100);
    const int64_t rmax = std::max(rmin + 1, side * 21 / 100);
    for (int64_t k = 0; k < shapes; ++k) {
      const auto cls = static_cast<int32_t>(1 + rng.uniform_int(cfg.num_foreground_classes));
      bool placed = false;
      for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
        const int64_t r = rmin + rng.uniform_int(rmax - rmin + 1);
        const int64_t cx = r + 2 + rng.uniform_int(side - 2 * (r + 2));
        const int64_t cy = r + 2 + rng.uniform_int(side - 2 * (r + 2));
        const BoxGeometry cand{cx - r - 2, cy - r - 2, cx + r + 3, cy + r + 3, 0.0};
        bool clash = false;
        for (const Instance& inst : s.instances)
          if (box_iou(cand, {inst.box.x0 - 2, inst.box.y0 - 2, inst.box.x1 + 2,
                             inst.box.y1 + 2, 0.0}) > 0.0)
            clash = true;
        if (clash) continue;

        // Class-tinted color: hue bands keep classes separable.
        const double hue_base = cls == 1 ? 0.0 : cls == 2 ? 0.33 : 0.62;
        float color[3];
        hsv_to_rgb(hue_base + rng.uniform(-0.05, 0.05), 0.55 + 0.4 * rng.uniform(),
                   0.55 + 0.4 * rng.uniform(), color);
        BoxGeometry tight{side, side, 0, 0, 0.0};
        const int32_t inst_id = static_cast<int32_t>(s.instances.size()) + 1;
        for (int64_t y = cy - r; y <= cy + r; ++y)
          for (int64_t x = cx - r; x <= cx + r; ++x) {
            if (!inside_shape(cls, x, y, cx, cy, r)) continue;
            s.mask.at(0, 0, y, x) = cls;
            s.instance_map[static_cast<size_t>(y * side + x)] = inst_id;
            tight.x0 = std::min(tight.x0, x);
            tight.y0 = std::min(tight.y0, y);
            tight.x1 = std::max(tight.x1, x + 1);
            tight.y1 = std::max(tight.y1, y + 1);
            for (int64_t c = 0; c < 3; ++c)
              s.image.at(0, c, y, x) = static_cast<float>(
                  std::clamp(color[c] + rng.uniform(-0.03, 0.03), 0.0, 1.0));
          }
        s.instances.push_back({cls, tight});
        placed = true;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

BoxGeometry extend_box(const BoxGeometry& b, double factor, int64_t image_w,
                       int64_t image_h) {
  if (!b.valid() || b.width() <= 1 || b.height() <= 1)
    throw ConfigError("extend_box: degenerate box");
  const double cx = 0.5 * static_cast<double>(b.x0 + b.x1);
  const double cy = 0.5 * static_cast<double>(b.y0 + b.y1);
  const auto w = static_cast<int64_t>(std::llround(static_cast<double>(b.width()) * factor));
  const auto h = static_cast<int64_t>(std::llround(static_cast<double>(b.height()) * factor));
  const int64_t sidelen = std::max(w, h);
  BoxGeometry e;
  e.x0 = static_cast<int64_t>(std::llround(cx - static_cast<double>(sidelen) / 2.0));
  e.y0 = static_cast<int64_t>(std::llround(cy - static_cast<double>(sidelen) / 2.0));
  e.x1 = e.x0 + sidelen;
  e.y1 = e.y0 + sidelen;
  e.score = b.score;
  e.x0 = std::clamp<int64_t>(e.x0, 0, image_w - 1);
  e.y0 = std::clamp<int64_t>(e.y0, 0, image_h - 1);
  e.x1 = std::clamp<int64_t>(e.x1, e.x0 + 1, image_w);
  e.y1 = std::clamp<int64_t>(e.y1, e.y0 + 1, image_h);
  return e;
}

namespace {

TrainingExample crop_example(const Sample& s, const BoxGeometry& box) {
  const int64_t h = box.height(), w = box.width();
  TrainingExample ex;
  ex.image = TensorF(Shape4(1, 3, h, w));
  ex.mask = LabelMask(Shape4(1, 1, h, w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c)
        ex.image.at(0, c, y, x) = s.image.at(0, c, box.y0 + y, box.x0 + x);
      ex.mask.at(0, 0, y, x) = s.mask.at(0, 0, box.y0 + y, box.x0 + x);
    }
  ex.source_id = s.id;
  ex.box = box;
  return ex;
}

}  // namespace

Stage1Result make_stage1_examples(const std::vector<Sample>& samples,
                                  const Stage1Options& opt) {
  Stage1Result res;
  for (const Sample& s : samples) {
    for (size_t i = 0; i < s.instances.size(); ++i) {
      const Instance& inst = s.instances[i];
      if (inst.box.width() < opt.min_instance_side ||
          inst.box.height() < opt.min_instance_side) {
        ++res.skipped_small;
        continue;
      }
      const BoxGeometry ebox =
          extend_box(inst.box, opt.extend_factor, s.image.shape().w, s.image.shape().h);
      TrainingExample ex = crop_example(s, ebox);
      ex.stage = 1;
      // Only the centered instance keeps its class; competing instances'
      // pixels are relabeled background at pixel granularity.
      const auto want = static_cast<int32_t>(i) + 1;
      for (int64_t y = 0; y < ex.mask.shape().h; ++y)
        for (int64_t x = 0; x < ex.mask.shape().w; ++x) {
          const int32_t label = ex.mask.at(0, 0, y, x);
          if (label == 0 || label == kIgnoreLabel) continue;
          const int64_t src = (ebox.y0 + y) * s.image.shape().w + (ebox.x0 + x);
          if (s.instance_map[static_cast<size_t>(src)] != want) ex.mask.at(0, 0, y, x) = 0;
        }
      res.examples.push_back(std::move(ex));
    }
  }
  return res;
}

std::vector<TrainingExample> make_stage2_examples(
    const std::vector<Sample>& samples,
    const std::map<std::string, std::vector<BoxGeometry>>& proposals, double iou_min,
    double extend_factor) {
  std::vector<TrainingExample> out;
  for (const Sample& s : samples) {
    auto it = proposals.find(s.id);
    if (it == proposals.end()) continue;
    for (const BoxGeometry& prop : it->second) {
      double best = 0.0;
      for (const Instance& inst : s.instances) best = std::max(best, box_iou(prop, inst.box));
      if (best < iou_min) continue;
      const BoxGeometry ebox =
          extend_box(prop, extend_factor, s.image.shape().w, s.image.shape().h);
      TrainingExample ex = crop_example(s, ebox);
      ex.stage = 2;  // all class labels present in the crop are kept
      out.push_back(std::move(ex));
    }
  }
  return out;
}

namespace {

void flip_horizontal(TensorF& img, LabelMask& mask) {
  const Shape4 si = img.shape();
  for (int64_t c = 0; c < si.c; ++c)
    for (int64_t y = 0; y < si.h; ++y)
      for (int64_t x = 0; x < si.w / 2; ++x)
        std::swap(img.at(0, c, y, x), img.at(0, c, y, si.w - 1 - x));
  for (int64_t y = 0; y < mask.shape().h; ++y)
    for (int64_t x = 0; x < mask.shape().w / 2; ++x)
      std::swap(mask.at(0, 0, y, x), mask.at(0, 0, y, mask.shape().w - 1 - x));
}

}  // namespace

TrainingExample augment_at(const TrainingExample& ex, int64_t out_side,
                           int64_t resize_side, int64_t ox, int64_t oy, bool flip) {
  if (resize_side < out_side) throw ConfigError("augment: resize side < output side");
  if (ox < 0 || oy < 0 || ox > resize_side - out_side || oy > resize_side - out_side)
    throw ConfigError("augment: crop offset outside resized image");
  TrainingExample out;
  TensorF resized = bilinear_resize(ex.image, resize_side, resize_side);
  LabelMask rmask = nearest_resize(ex.mask, resize_side, resize_side);
  out.image = TensorF(Shape4(1, 3, out_side, out_side));
  out.mask = LabelMask(Shape4(1, 1, out_side, out_side));
  for (int64_t y = 0; y < out_side; ++y)
    for (int64_t x = 0; x < out_side; ++x) {
      for (int64_t c = 0; c < 3; ++c)
        out.image.at(0, c, y, x) = resized.at(0, c, oy + y, ox + x);
      out.mask.at(0, 0, y, x) = rmask.at(0, 0, oy + y, ox + x);
    }
  if (flip) flip_horizontal(out.image, out.mask);
  out.stage = ex.stage;
  out.source_id = ex.source_id;
  out.box = ex.box;
  return out;
}

TrainingExample augment(const TrainingExample& ex, int64_t out_side, int64_t resize_side,
                        bool flip_enabled, Rng& rng) {
  const int64_t span = resize_side - out_side;
  const int64_t ox = span > 0 ? rng.uniform_int(span + 1) : 0;
  const int64_t oy = span > 0 ? rng.uniform_int(span + 1) : 0;
  const bool flip = flip_enabled && rng.uniform() < 0.5;
  return augment_at(ex, out_side, resize_side, ox, oy, flip);
}

TrainingExample center_fit(const TrainingExample& ex, int64_t out_side) {
  return augment_at(ex, out_side, out_side, 0, 0, false);
}

namespace {

int32_t dominant_class(const TrainingExample& ex) {
  std::map<int32_t, int64_t> counts;
  for (int64_t i = 0; i < ex.mask.size(); ++i) {
    const int32_t v = ex.mask[i];
    if (v > 0 && v != kIgnoreLabel) ++counts[v];
  }
  int32_t best = 0;
  int64_t best_count = 0;
  for (const auto& [cls, count] : counts)
    if (count > best_count) {
      best = cls;
      best_count = count;
    }
  return best;  // 0 means no foreground
}

}  // namespace

std::vector<TrainingExample> balance_classes(const std::vector<TrainingExample>& examples) {
  if (examples.empty()) throw ConfigError("balance_classes: empty example set");
  std::map<int32_t, std::vector<size_t>> by_class;
  for (size_t i = 0; i < examples.size(); ++i) {
    const int32_t cls = dominant_class(examples[i]);
    if (cls > 0) by_class[cls].push_back(i);
  }
  std::vector<TrainingExample> out = examples;
  if (by_class.size() < 2) return out;
  int64_t max_count = 0;
  for (const auto& [cls, idx] : by_class)
    max_count = std::max<int64_t>(max_count, static_cast<int64_t>(idx.size()));
  const int64_t target = (max_count + 1) / 2;
  for (const auto& [cls, idx] : by_class) {
    int64_t have = static_cast<int64_t>(idx.size());
    size_t cursor = 0;
    while (have < target) {
      out.push_back(examples[idx[cursor]]);
      cursor = (cursor + 1) % idx.size();
      ++have;
    }
  }
  return out;
}

std::vector<BoxGeometry> grid_proposals(const TensorF& image,
                                        const std::vector<int64_t>& scales,
                                        int64_t stride) {
  if (scales.empty()) throw ConfigError("grid_proposals: no scales");
  if (stride < 1) throw ConfigError("grid_proposals: stride must be >= 1");
  const int64_t h = image.shape().h, w = image.shape().w;
  std::vector<BoxGeometry> out;
  for (int64_t side : scales) {
    if (side < 2 || side > std::min(h, w)) continue;
    for (int64_t y = 0; y + side <= h; y += stride)
      for (int64_t x = 0; x + side <= w; x += stride) {
        // Grey-level variance as objectness: textured shapes beat background.
        double sum = 0.0, sq = 0.0;
        for (int64_t yy = y; yy < y + side; ++yy)
          for (int64_t xx = x; xx < x + side; ++xx) {
            const double g = (image.at(0, 0, yy, xx) + image.at(0, 1, yy, xx) +
                              image.at(0, 2, yy, xx)) / 3.0;
            sum += g;
            sq += g * g;
          }
        const double n = static_cast<double>(side * side);
        const double var = sq / n - (sum / n) * (sum / n);
        out.push_back({x, y, x + side, y + side, var});
      }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const BoxGeometry& a, const BoxGeometry& b) { return a.score > b.score; });
  return out;
}

std::map<std::string, std::vector<BoxGeometry>> read_proposals(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open proposals " + path);
  std::map<std::string, std::vector<BoxGeometry>> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      BoxGeometry b;
      b.x0 = j.at("x0").get<int64_t>();
      b.y0 = j.at("y0").get<int64_t>();
      b.x1 = j.at("x1").get<int64_t>();
      b.y1 = j.at("y1").get<int64_t>();
      b.score = j.value("score", 0.0);
      if (!b.valid()) throw IoError("empty box");
      out[j.value("image_id", std::string())].push_back(b);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": bad proposal record: " +
                    e.what());
    }
  }
  return out;
}

void write_proposals(const std::string& path,
                     const std::map<std::string, std::vector<BoxGeometry>>& by_image) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write proposals " + path);
  for (const auto& [id, boxes] : by_image)
    for (const BoxGeometry& b : boxes) {
      nlohmann::json j{{"image_id", id}, {"x0", b.x0}, {"y0", b.y0},
                       {"x1", b.x1},     {"y1", b.y1}, {"score", b.score}};
      f << j.dump() << "\n";
    }
}

}  // namespace dseg
