// Command-line front end. Talks to the engine exclusively through the C API
// in deconvseg.h; exit codes are 0 (ok), 1 (domain error), 2 (usage error).

#include <cstdio>
#include <cstdlib>
#include <string>

#include "CLI11.hpp"
#include "deconvseg.h"

namespace {

int finish(dseg_status st) {
  if (st != DSEG_OK) std::fprintf(stderr, "deconvseg: %s\n", dseg_last_error());
  return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deconvseg: encoder-decoder semantic segmentation engine"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "worker thread override (also: DSEG_THREADS)");

  std::string config, out_dir, image, proposals, mode, resume, layers;
  std::string pred_dir, gt_dir, report = "eval_report.json";
  int stage = 0;
  bool ensemble = false;
  int64_t classes = 0;

  auto* synth = app.add_subcommand("synth", "generate the synthetic shapes dataset");
  synth->add_option("--config", config, "run config json")->required();
  synth->add_option("--out", out_dir, "dataset directory (default: config data.dir)");

  auto* train = app.add_subcommand("train", "run the two-stage training curriculum");
  train->add_option("--config", config, "run config json")->required();
  train->add_option("--stage", stage, "0 = both stages (default), 1 or 2 = single stage")
      ->check(CLI::Range(0, 2));
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* predict = app.add_subcommand("predict", "segment a whole image");
  predict->add_option("--config", config, "run config json")->required();
  predict->add_option("--image", image, "input image png")->required();
  predict->add_option("--proposals", proposals,
                      "proposal records (ndjson); omit for the grid fallback");
  predict->add_option("--mode", mode, "aggregation: max (default) or sum")
      ->check(CLI::IsMember({"max", "sum"}));
  predict->add_flag("--ensemble", ensemble, "average with the FCN baseline's probabilities");
  predict->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score predicted masks against ground truth");
  eval->add_option("--pred", pred_dir, "directory of predicted index masks")->required();
  eval->add_option("--gt", gt_dir, "directory of ground-truth index masks")->required();
  eval->add_option("--classes", classes, "number of classes incl. background")->required();
  eval->add_option("--report", report, "report json path (csv row appended alongside)");

  auto* dump = app.add_subcommand("dump-activations",
                                  "write per-layer activation images for one input");
  dump->add_option("--config", config, "run config json")->required();
  dump->add_option("--image", image, "input image png")->required();
  dump->add_option("--layers", layers, "comma-separated layer names")->required();
  dump->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (threads > 0) dseg_set_threads(threads);

  if (synth->parsed())
    return finish(dseg_synth(config.c_str(), out_dir.empty() ? nullptr : out_dir.c_str()));
  if (train->parsed())
    return finish(dseg_train(config.c_str(), stage, resume.empty() ? nullptr : resume.c_str()));
  if (predict->parsed())
    return finish(dseg_predict(config.c_str(), image.c_str(),
                               proposals.empty() ? nullptr : proposals.c_str(),
                               mode.empty() ? nullptr : mode.c_str(), ensemble ? 1 : 0,
                               out_dir.c_str()));
  if (eval->parsed())
    return finish(dseg_eval(pred_dir.c_str(), gt_dir.c_str(), classes, report.c_str()));
  if (dump->parsed())
    return finish(dseg_dump_activations(config.c_str(), image.c_str(), layers.c_str(),
                                        out_dir.c_str()));
  return 2;
}
