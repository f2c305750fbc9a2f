// SPDX-License-Identifier: Apache-2.0
// Command-line front end: synth, train, eval, predict, gradcheck.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "reseg/reseg.h"

namespace {

void print_line(const char* line, void*) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

int exit_code(reseg_status status) {
  switch (status) {
    case RESEG_OK:
      return 0;
    case RESEG_ERR_USAGE:
    case RESEG_ERR_CONFIG:
      return 2;
    default:
      return 1;
  }
}

int report(reseg_status status) {
  if (status != RESEG_OK) {
    std::fprintf(stderr, "reseg: %s: %s\n", reseg_status_name(status), reseg_last_error());
  }
  return exit_code(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent semantic segmentation: data generation, training, evaluation, prediction"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(reseg_version()));

  // synth
  reseg_synth_options synth;
  reseg_synth_options_init(&synth);
  std::string synth_out;
  std::size_t size = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic shape dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--n", synth.count, "Number of images")->capture_default_str();
  synth_cmd->add_option("--size", size, "Square image side (sets height and width)");
  synth_cmd->add_option("--height", synth.height, "Image height")->capture_default_str();
  synth_cmd->add_option("--width", synth.width, "Image width")->capture_default_str();
  synth_cmd->add_option("--classes", synth.classes, "Class count including background")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--min-shape", synth.min_shape_fraction, "Smallest shape side / image side")
      ->capture_default_str();
  synth_cmd->add_option("--max-shape", synth.max_shape_fraction, "Largest shape side / image side")
      ->capture_default_str();
  bool synth_force = false;
  synth_cmd->add_flag("--force", synth_force, "Write into a non-empty directory");

  // train
  reseg_train_options train;
  reseg_train_options_init(&train);
  std::string train_config, train_out, train_manifest, train_balance;
  bool train_resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON run configuration");
  train_cmd->add_option("config,--config", train_config, "Run configuration (JSON)")->required();
  train_cmd->add_option("--out", train_out, "Output directory (overrides the config)");
  train_cmd->add_option("--manifest", train_manifest, "Dataset manifest (overrides the config)");
  train_cmd->add_option("--balance", train_balance, "Class balancing")
      ->check(CLI::IsMember({"none", "median-frequency"}));
  train_cmd->add_option("--epochs", train.epochs, "Maximum epochs")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--batch-size", train.batch_size, "Images per batch")->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", train.seed, "Seed for initialisation and shuffling")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--threads", train.threads, "Worker threads (0 = RESEG_NUM_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--resume", train_resume, "Continue from last.model in the output directory");

  // eval
  reseg_eval_options eval;
  reseg_eval_options_init(&eval);
  std::string eval_model, eval_manifest, eval_split = "test", eval_csv;
  auto* eval_cmd = app.add_subcommand("eval", "Score a model on one split of a dataset");
  eval_cmd->add_option("--model", eval_model, "Model file")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--split", eval_split, "Split to evaluate")
      ->check(CLI::IsMember({"train", "valid", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--csv", eval_csv, "Also write the metrics as CSV");

  // predict
  reseg_predict_options predict;
  reseg_predict_options_init(&predict);
  std::string predict_model, predict_image, predict_out;
  bool predict_probs = false;
  auto* predict_cmd = app.add_subcommand("predict", "Segment one image");
  predict_cmd->add_option("--model", predict_model, "Model file")->required();
  predict_cmd->add_option("--image", predict_image, "Input image (PPM or PGM)")->required();
  predict_cmd->add_option("--out", predict_out, "Output mask (PGM)")->required();
  predict_cmd->add_flag("--probs", predict_probs, "Also write one probability map per class");

  // gradcheck
  reseg_gradcheck_options gc;
  reseg_gradcheck_options_init(&gc);
  std::string gc_config;
  bool gc_frozen = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc_cmd->add_option("config,--config", gc_config, "Run or model configuration (default: tiny profile)");
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gc_cmd->add_option("--epsilon", gc.epsilon, "Finite-difference step (relative)")->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed, "Seed for the batch and coordinate sampling")->capture_default_str();
  gc_cmd->add_option("--max-coords", gc.max_coordinates, "Coordinates checked per tensor")->capture_default_str();
  gc_cmd->add_flag("--frozen-frontend", gc_frozen, "Freeze the convolutional front-end");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (*synth_cmd) {
    if (size != 0) synth.height = synth.width = size;
    synth.out_dir = synth_out.c_str();
    synth.force = synth_force ? 1 : 0;
    synth.log = print_line;
    return report(reseg_synth(&synth));
  }
  if (*train_cmd) {
    train.config_path = train_config.c_str();
    if (!train_out.empty()) train.out_dir = train_out.c_str();
    if (!train_manifest.empty()) train.manifest = train_manifest.c_str();
    if (!train_balance.empty()) train.balance = train_balance.c_str();
    train.resume = train_resume ? 1 : 0;
    train.log = print_line;
    reseg_train_summary summary{};
    return report(reseg_train(&train, &summary));
  }
  if (*eval_cmd) {
    eval.model_path = eval_model.c_str();
    eval.manifest = eval_manifest.c_str();
    eval.split = eval_split.c_str();
    if (!eval_csv.empty()) eval.csv_out = eval_csv.c_str();
    eval.log = print_line;
    return report(reseg_eval(&eval, nullptr));
  }
  if (*predict_cmd) {
    predict.model_path = predict_model.c_str();
    predict.image_path = predict_image.c_str();
    predict.out_path = predict_out.c_str();
    predict.probs = predict_probs ? 1 : 0;
    predict.log = print_line;
    return report(reseg_predict(&predict));
  }
  if (*gc_cmd) {
    if (!gc_config.empty()) gc.config_path = gc_config.c_str();
    gc.frozen_frontend = gc_frozen ? 1 : 0;
    gc.log = print_line;
    return report(reseg_gradcheck(&gc, nullptr));
  }
  return 2;
}
