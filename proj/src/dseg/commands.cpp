#include "dseg/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "dseg/image.hpp"
#include "dseg/inference.hpp"
#include "dseg/metrics.hpp"
#include "dseg/serialize.hpp"

namespace fs = std::filesystem;

namespace dseg {

void cmd_synth(const RunConfig& cfg, const std::string& out_dir) {
  if (cfg.synth_count < 1) throw ConfigError("synth: count must be >= 1");
  SynthConfig sc;
  sc.count = cfg.synth_count;
  sc.image_side = cfg.synth_image_side;
  sc.num_foreground_classes = cfg.synth_classes;
  sc.seed = cfg.synth_seed;
  sc.val_count = cfg.synth_val;
  const std::vector<Sample> samples = synth_shapes(sc);
  write_dataset(out_dir, samples, cfg.num_classes);
  RunConfig effective = cfg;
  effective.data_dir = out_dir;
  effective.write_effective((fs::path(out_dir) / "effective_config.json").string());
}

std::vector<TrainingExample> whole_image_examples(const std::vector<Sample>& samples) {
  std::vector<TrainingExample> out;
  for (const Sample& s : samples) {
    TrainingExample ex;
    ex.image = s.image;
    ex.mask = s.mask;
    ex.stage = 1;
    ex.source_id = s.id;
    ex.box = BoxGeometry{0, 0, s.image.shape().w, s.image.shape().h, 0.0};
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

void split_samples(const std::vector<Sample>& all, std::vector<Sample>& train,
                   std::vector<Sample>& val) {
  for (const Sample& s : all)
    (s.split == "val" ? val : train).push_back(s);
  if (train.empty()) throw TrainError("dataset has no training split");
  if (val.empty()) throw TrainError("dataset has no validation split");
}

std::map<std::string, std::vector<BoxGeometry>> grid_proposals_for(
    const std::vector<Sample>& samples, const RunConfig& cfg) {
  std::map<std::string, std::vector<BoxGeometry>> out;
  for (const Sample& s : samples)
    out[s.id] = grid_proposals(s.image, cfg.grid_scales, cfg.grid_stride);
  return out;
}

StageRunConfig stage_run_config(const RunConfig& cfg, int stage, int64_t iters,
                                const std::string& ckpt) {
  StageRunConfig src;
  src.optim = cfg.optim;
  src.optim.max_iters = iters;
  src.stage = stage;
  src.out_side = cfg.input_side;
  src.resize_side = cfg.effective_resize_side();
  src.flip = cfg.flip;
  src.augment_enabled = cfg.augment;
  src.pixel_means = cfg.pixel_means;
  src.num_classes = cfg.num_classes;
  src.seed = cfg.train_seed;
  src.checkpoint_path = ckpt;
  src.metrics_csv = (fs::path(cfg.out_dir) / "metrics.csv").string();
  return src;
}

}  // namespace

void cmd_train(const RunConfig& cfg, int stage, const std::string& resume_checkpoint) {
  if (stage < 0 || stage > 2) throw ConfigError("train: stage must be 0, 1 or 2");
  fs::create_directories(cfg.out_dir);
  cfg.write_effective((fs::path(cfg.out_dir) / "effective_config.json").string());

  const std::vector<Sample> all =
      load_dataset((fs::path(cfg.data_dir) / "manifest.json").string(), cfg.num_classes);
  std::vector<Sample> train, val;
  split_samples(all, train, val);

  const NetworkConfig net_cfg = cfg.make_network();
  Model model;
  TrainState state;
  if (!resume_checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(resume_checkpoint);
    model = std::move(ck.model);
    state = std::move(ck.state);
  } else {
    model = init_model<float>(net_cfg, cfg.train_seed, cfg.weight_init_stddev);
  }

  const std::string s1_ckpt = (fs::path(cfg.out_dir) / "stage1.ckpt").string();
  const std::string s2_ckpt = (fs::path(cfg.out_dir) / "stage2.ckpt").string();

  if (cfg.network_kind == "fcn") {
    // The baseline trains on whole images in a single stage.
    auto train_ex = whole_image_examples(train);
    auto val_ex = whole_image_examples(val);
    const std::string ckpt = (fs::path(cfg.out_dir) / "fcn.ckpt").string();
    train_stage(model, state, train_ex, val_ex,
                stage_run_config(cfg, 1, cfg.stage1_iters, ckpt));
    return;
  }

  if (stage == 0 || stage == 1) {
    auto s1 = make_stage1_examples(train);
    auto val_s1 = make_stage1_examples(val);
    auto examples = cfg.balance ? balance_classes(s1.examples) : s1.examples;
    train_stage(model, state, examples, val_s1.examples,
                stage_run_config(cfg, 1, cfg.stage1_iters, s1_ckpt));
  }
  if (stage == 0 || stage == 2) {
    if (stage == 2 && resume_checkpoint.empty() && fs::exists(s1_ckpt)) {
      Checkpoint ck = load_checkpoint(s1_ckpt);
      model = std::move(ck.model);
      state = std::move(ck.state);
    }
    auto props = grid_proposals_for(train, cfg);
    auto val_props = grid_proposals_for(val, cfg);
    auto s2 = make_stage2_examples(train, props, cfg.stage2_iou_min);
    auto val_s2 = make_stage2_examples(val, val_props, cfg.stage2_iou_min);
    if (s2.empty()) throw TrainError("stage 2: no proposals pass the overlap threshold");
    auto examples = cfg.balance ? balance_classes(s2) : s2;
    train_stage(model, state, examples, val_s2,
                stage_run_config(cfg, 2, cfg.stage2_iters, s2_ckpt));
  }
}

std::string pick_checkpoint(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) return cfg.checkpoint;
  const std::string s2 = (fs::path(cfg.out_dir) / "stage2.ckpt").string();
  if (fs::exists(s2)) return s2;
  const std::string s1 = (fs::path(cfg.out_dir) / "stage1.ckpt").string();
  if (fs::exists(s1)) return s1;
  const std::string fcn = (fs::path(cfg.out_dir) / "fcn.ckpt").string();
  if (cfg.network_kind == "fcn" && fs::exists(fcn)) return fcn;
  throw IoError("no checkpoint found under " + cfg.out_dir +
                " (train first or set inference.checkpoint)");
}

void cmd_predict(const RunConfig& cfg, const std::string& image_path,
                 const std::string& proposals_path, const std::string& mode_override,
                 bool ensemble, const std::string& out_dir) {
  Model model = load_model(pick_checkpoint(cfg));
  Model fcn;
  if (ensemble) {
    std::string fcn_path = cfg.fcn_checkpoint.empty()
                               ? (fs::path(cfg.out_dir) / "fcn.ckpt").string()
                               : cfg.fcn_checkpoint;
    if (!fs::exists(fcn_path))
      throw ConfigError("--ensemble requires an FCN checkpoint (looked for " + fcn_path +
                        "); train the fcn network or set inference.fcn_checkpoint");
    fcn = load_model(fcn_path);
  }

  const TensorF image = image_to_tensor(read_png_rgb(image_path));
  std::vector<BoxGeometry> proposals;
  bool file_filtered_by_stem = false;
  if (!proposals_path.empty()) {
    auto by_image = read_proposals(proposals_path);
    const std::string stem = fs::path(image_path).stem().string();
    if (auto it = by_image.find(stem); it != by_image.end()) {
      proposals = it->second;
      file_filtered_by_stem = true;
    } else {
      for (const auto& [id, boxes] : by_image)
        proposals.insert(proposals.end(), boxes.begin(), boxes.end());
    }
    if (proposals.empty()) throw IoError(proposals_path + ": no usable proposals");
  }

  SegmentOptions opt;
  opt.mode = agg_mode_from_name(mode_override.empty() ? cfg.agg_mode : mode_override);
  opt.top_k = cfg.top_k;
  opt.pixel_means = cfg.pixel_means;
  opt.grid_scales = cfg.grid_scales;
  opt.grid_stride = cfg.grid_stride;

  SegmentationResult res =
      segment_image(model, ensemble ? &fcn : nullptr, image, proposals, opt);
  res.provenance["image"] = image_path;
  res.provenance["proposals_file"] = proposals_path;
  res.provenance["proposals_matched_by_image_id"] = file_filtered_by_stem;

  fs::create_directories(out_dir);
  write_png((fs::path(out_dir) / "label.png").string(), labels_to_mask(res.label_mask));
  write_png((fs::path(out_dir) / "overlay.png").string(),
            overlay_labels(tensor_to_image(image), res.label_mask));
  Container probs;
  probs.put_tensor("class_probs", res.class_probs);
  probs.save((fs::path(out_dir) / "probs.dsegc").string());
  std::ofstream pf(fs::path(out_dir) / "provenance.json");
  if (!pf) throw IoError("cannot write provenance in " + out_dir);
  pf << res.provenance.dump(2) << "\n";
}

void cmd_eval(const std::string& pred_dir, const std::string& gt_dir, int64_t num_classes,
              const std::string& report_path) {
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw IoError(pred_dir + ": no prediction masks found");

  ConfusionCounts counts(num_classes);
  for (const std::string& stem : stems) {
    const fs::path gt = fs::path(gt_dir) / (stem + ".png");
    if (!fs::exists(gt))
      throw IoError("unpaired prediction '" + stem + "': no ground truth " + gt.string());
    const LabelMask pred =
        mask_to_labels(read_png_index((fs::path(pred_dir) / (stem + ".png")).string()));
    const LabelMask truth = mask_to_labels(read_png_index(gt.string()));
    accumulate(counts, truth, pred);
  }

  nlohmann::json report = metrics_report(counts);
  report["images"] = stems.size();
  fs::create_directories(fs::path(report_path).parent_path().empty()
                             ? "."
                             : fs::path(report_path).parent_path().string());
  std::ofstream rf(report_path);
  if (!rf) throw IoError("cannot write report " + report_path);
  rf << report.dump(2) << "\n";

  const fs::path csv = fs::path(report_path).replace_extension(".csv");
  const bool fresh = !fs::exists(csv);
  std::ofstream cf(csv, std::ios::app);
  if (fresh) cf << "pred_dir,gt_dir,images,mean_iou,pixel_accuracy,ignored_pixels\n";
  cf << pred_dir << "," << gt_dir << "," << stems.size() << ","
     << report["mean_iou"].get<double>() << "," << report["pixel_accuracy"].get<double>()
     << "," << counts.ignored << "\n";
}

void cmd_dump_activations(const RunConfig& cfg, const std::string& image_path,
                          const std::vector<std::string>& layers,
                          const std::string& out_dir) {
  if (layers.empty()) throw ConfigError("dump-activations: no layers requested");
  Model model = load_model(pick_checkpoint(cfg));
  const TensorF image = image_to_tensor(read_png_rgb(image_path));
  fs::create_directories(out_dir);
  dump_activations(model, image, layers, cfg.pixel_means, out_dir);
}

}  // namespace dseg
