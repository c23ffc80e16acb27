#include "dseg/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dseg/metrics.hpp"
#include "dseg/serialize.hpp"

namespace dseg {

nlohmann::json OptimConfig::to_json() const {
  return {{"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"lr_drop_factor", lr_drop_factor},
          {"patience", patience},
          {"val_interval", val_interval},
          {"improve_margin", improve_margin},
          {"max_iters", max_iters}};
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig c;
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
  c.patience = j.value("patience", c.patience);
  c.val_interval = j.value("val_interval", c.val_interval);
  c.improve_margin = j.value("improve_margin", c.improve_margin);
  c.max_iters = j.value("max_iters", c.max_iters);
  if (c.lr <= 0 || c.momentum < 0 || c.weight_decay < 0 || c.batch_size < 1 ||
      c.lr_drop_factor <= 1 || c.patience < 1 || c.val_interval < 1)
    throw ConfigError("optimizer config values out of range");
  return c;
}

void sgd_step(Model& model, const GradMap<float>& grads, TrainState& state,
              const OptimConfig& cfg) {
  auto refs = param_registry(model);
  for (const auto& ref : refs) {
    auto git = grads.find(ref.name);
    if (git == grads.end())
      throw TrainError("missing gradient for '" + ref.name + "' at iteration " +
                       std::to_string(state.iteration));
    const std::vector<float>& g = git->second;
    if (static_cast<int64_t>(g.size()) != ref.size)
      throw TrainError("gradient size mismatch for '" + ref.name + "'");
    for (float v : g)
      if (!std::isfinite(v))
        throw TrainError("non-finite gradient in '" + ref.name + "' at iteration " +
                         std::to_string(state.iteration));
    auto& vel = state.velocity[ref.name];
    if (vel.empty()) vel.assign(static_cast<size_t>(ref.size), 0.0f);
    const auto mom = static_cast<float>(cfg.momentum);
    const auto lr = static_cast<float>(state.lr);
    const auto wd = static_cast<float>(cfg.weight_decay);
    for (int64_t i = 0; i < ref.size; ++i) {
      const auto ii = static_cast<size_t>(i);
      vel[ii] = mom * vel[ii] - lr * (g[ii] + wd * ref.data[i]);
      ref.data[i] += vel[ii];
    }
  }
}

void lr_schedule(TrainState& state, double val_score, const OptimConfig& cfg) {
  if (!std::isfinite(val_score)) throw TrainError("non-finite validation score");
  if (val_score > state.best_val + cfg.improve_margin) {
    state.best_val = val_score;
    state.stall = 0;
    return;
  }
  if (++state.stall >= cfg.patience) {
    state.lr /= cfg.lr_drop_factor;
    state.stall = 0;
  }
}

std::pair<double, double> evaluate_validation(Model& model,
                                              const std::vector<TrainingExample>& examples,
                                              int64_t num_classes,
                                              const std::array<float, 3>& pixel_means) {
  ConfusionCounts counts(num_classes);
  for (const TrainingExample& ex : examples) {
    TensorF x = ex.image;
    for (int64_t c = 0; c < 3; ++c) {
      float* p = x.data() + c * x.shape().plane();
      for (int64_t i = 0; i < x.shape().plane(); ++i) p[i] -= pixel_means[static_cast<size_t>(c)];
    }
    auto res = forward(model, x, BnMode::infer, false);
    const auto arg = reduce(res.output, Axes4{false, true, false, false},
                            ReduceOp::max_argmax);
    LabelMask pred(Shape4(1, 1, x.shape().h, x.shape().w));
    const int64_t plane = x.shape().plane();
    for (int64_t i = 0; i < plane; ++i)
      pred[i] = static_cast<int32_t>(arg.argmax[static_cast<size_t>(i)] / plane);
    accumulate(counts, ex.mask, pred);
  }
  return {pixel_accuracy(counts), mean_iou(counts)};
}

std::pair<TensorF, LabelMask> assemble_batch(const std::vector<const TrainingExample*>& batch,
                                             const std::array<float, 3>& pixel_means) {
  if (batch.empty()) throw TrainError("empty batch");
  const Shape4 one = batch.front()->image.shape();
  TensorF x(Shape4(static_cast<int64_t>(batch.size()), 3, one.h, one.w));
  LabelMask labels(Shape4(static_cast<int64_t>(batch.size()), 1, one.h, one.w));
  for (size_t b = 0; b < batch.size(); ++b) {
    const TrainingExample& ex = *batch[b];
    if (!(ex.image.shape() == one))
      throw ShapeError("assemble_batch: example sizes differ");
    for (int64_t c = 0; c < 3; ++c) {
      const float* src = ex.image.data() + c * one.plane();
      float* dst = x.data() + (static_cast<int64_t>(b) * 3 + c) * one.plane();
      for (int64_t i = 0; i < one.plane(); ++i)
        dst[i] = src[i] - pixel_means[static_cast<size_t>(c)];
    }
    std::copy(ex.mask.data(), ex.mask.data() + one.plane(),
              labels.data() + static_cast<int64_t>(b) * one.plane());
  }
  return {std::move(x), std::move(labels)};
}

namespace {

void append_metrics_row(const std::string& path, int64_t iteration, int stage, double loss,
                        double lr, double pixel_acc, double miou) {
  if (path.empty()) return;
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append metrics to " + path);
  if (fresh) f << "iteration,stage,loss,lr,pixel_acc,mean_iou\n";
  f << iteration << "," << stage << "," << loss << "," << lr << "," << pixel_acc << ","
    << miou << "\n";
}

}  // namespace

StageReport train_stage(Model& model, TrainState& state,
                        const std::vector<TrainingExample>& examples,
                        const std::vector<TrainingExample>& val_examples,
                        const StageRunConfig& cfg) {
  if (examples.empty() || val_examples.empty())
    throw TrainError("train_stage: empty example or validation set");
  // Each stage is a fresh schedule: the stage's example distribution changes,
  // so the best-score baseline and learning rate restart. Iteration numbering
  // and velocities carry over.
  state.lr = cfg.optim.lr;
  state.best_val = -1.0;
  state.stall = 0;

  StageReport report;
  report.start_iteration = state.iteration;

  Rng rng(cfg.seed + static_cast<uint64_t>(cfg.stage) * 0x51ed2701ULL);
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  rng.shuffle(order.begin(), order.end());
  size_t cursor = 0;

  // Validation examples are frozen to network size once.
  std::vector<TrainingExample> val_fixed;
  val_fixed.reserve(val_examples.size());
  for (const auto& ex : val_examples) val_fixed.push_back(center_fit(ex, cfg.out_side));

  double loss_sum = 0.0;
  int64_t loss_n = 0;
  std::vector<TrainingExample> staging(static_cast<size_t>(cfg.optim.batch_size));

  for (int64_t it = 0; it < cfg.optim.max_iters; ++it) {
    std::vector<const TrainingExample*> batch;
    for (int64_t b = 0; b < cfg.optim.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const TrainingExample& src = examples[order[cursor++]];
      staging[static_cast<size_t>(b)] =
          cfg.augment_enabled
              ? augment(src, cfg.out_side, cfg.resize_side, cfg.flip, rng)
              : center_fit(src, cfg.out_side);
      batch.push_back(&staging[static_cast<size_t>(b)]);
    }
    auto [x, labels] = assemble_batch(batch, cfg.pixel_means);
    auto fwd = forward(model, x, BnMode::train, true);
    auto [loss, d_logits] = cross_entropy_loss(fwd.output, labels);
    if (!std::isfinite(loss))
      throw TrainError("loss diverged (non-finite) at iteration " +
                       std::to_string(state.iteration) + "; last checkpoint retained");
    auto grads = backward(model, *fwd.trace, d_logits);
    sgd_step(model, grads, state, cfg.optim);
    ++state.iteration;
    report.losses.push_back(loss);
    loss_sum += loss;
    ++loss_n;

    const bool last = it + 1 == cfg.optim.max_iters;
    if (state.iteration % cfg.optim.val_interval == 0 || last) {
      auto [acc, miou] = evaluate_validation(model, val_fixed, cfg.num_classes,
                                             cfg.pixel_means);
      const double improved_best = state.best_val;
      lr_schedule(state, miou, cfg.optim);
      append_metrics_row(cfg.metrics_csv, state.iteration, cfg.stage,
                         loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0, state.lr,
                         acc, miou);
      loss_sum = 0.0;
      loss_n = 0;
      report.final_val_pixel_acc = acc;
      report.final_val_mean_iou = miou;
      if (!cfg.checkpoint_path.empty() && (miou >= improved_best || last))
        save_checkpoint(model, state, cfg.optim, cfg.checkpoint_path);
    }
  }
  report.end_iteration = state.iteration;
  return report;
}

void save_checkpoint(const Model& model, const TrainState& state, const OptimConfig& cfg,
                     const std::string& path) {
  Container c;
  c.put_json("config", model.config.to_json());
  nlohmann::json bn_meta;
  for (const LayerSpec& spec : model.config.layers) {
    if (spec.kind == LayerKind::conv || spec.kind == LayerKind::deconv) {
      const auto& p = model.conv.at(spec.name);
      c.put_tensor(spec.name + ".weight", p.weights);
      c.put_tensor(spec.name + ".bias",
                   TensorF(Shape4(1, static_cast<int64_t>(p.bias.size()), 1, 1), p.bias));
    } else if (spec.kind == LayerKind::batchnorm) {
      const auto& s = model.bn.at(spec.name);
      const auto n = static_cast<int64_t>(s.gamma.size());
      c.put_tensor(spec.name + ".gamma", TensorF(Shape4(1, n, 1, 1), s.gamma));
      c.put_tensor(spec.name + ".beta", TensorF(Shape4(1, n, 1, 1), s.beta));
      c.put_tensor(spec.name + ".running_mean", TensorF(Shape4(1, n, 1, 1), s.running_mean));
      c.put_tensor(spec.name + ".running_var", TensorF(Shape4(1, n, 1, 1), s.running_var));
      bn_meta[spec.name] = {{"initialized", s.initialized},
                            {"epsilon", s.epsilon},
                            {"momentum", s.momentum}};
    }
  }
  c.put_json("bn_meta", bn_meta);
  c.put_json("optim",
             {{"iteration", state.iteration},
              {"lr", state.lr},
              {"best_val", state.best_val},
              {"stall", state.stall},
              {"config", cfg.to_json()}});
  for (const auto& [name, vel] : state.velocity)
    c.put_tensor("velocity/" + name,
                 TensorF(Shape4(1, static_cast<int64_t>(vel.size()), 1, 1), vel));
  c.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint out{load_model(path), TrainState{}, OptimConfig{}};
  const Container c = Container::load(path);
  if (c.has("optim")) {
    const auto j = c.get_json("optim");
    out.state.iteration = j.value("iteration", int64_t{0});
    out.state.lr = j.value("lr", 0.01);
    out.state.best_val = j.value("best_val", -1.0);
    out.state.stall = j.value("stall", int64_t{0});
    if (j.contains("config")) out.optim = OptimConfig::from_json(j.at("config"));
  }
  for (const std::string& name : c.names())
    if (name.rfind("velocity/", 0) == 0)
      out.state.velocity[name.substr(9)] = c.get_tensor(name).vec();
  return out;
}

}  // namespace dseg
