// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "config_json.hpp"
#include "reseg/errors.hpp"
#include "reseg/model_io.hpp"

namespace reseg::cmd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void emit(const Log& log, const std::string& text) {
  if (!log) return;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) log(line);
}

std::string read_text(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string("cannot read ") + what + " '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

bool non_empty_dir(const fs::path& dir) {
  std::error_code ec;
  return fs::is_directory(dir, ec) && fs::directory_iterator(dir, ec) != fs::directory_iterator();
}

/// Holds `<dir>/.reseg.lock` for the lifetime of a run.
class DirectoryLock {
 public:
  explicit DirectoryLock(fs::path dir) : path_(std::move(dir) / ".reseg.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw RefusedError("output directory is locked by another run ('" + path_.string() +
                         "'); remove the lock file if no run is active");
    }
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

Image read_rgb(const fs::path& path) {
  Image img = read_netpbm(path);
  if (img.channels == 3) return img;
  Image rgb{img.rows, img.cols, 3, std::vector<std::uint8_t>(img.pixels.size() * 3)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = img.pixels[i];
  }
  return rgb;
}

std::size_t count_field(const json& v, const char* field) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(std::string("field '") + field + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

DatasetManifest synth(const SynthArgs& args, const Log& log) {
  if (args.out.empty()) throw UsageError("synth needs an output directory");
  if (non_empty_dir(args.out) && !args.force) {
    throw RefusedError("output directory '" + args.out.string() + "' is not empty; pass --force to overwrite");
  }
  if (fs::exists(args.out) && !fs::is_directory(args.out)) {
    throw RefusedError("'" + args.out.string() + "' exists and is not a directory");
  }
  const auto manifest = synth_dataset(args.options, args.out);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& e : manifest.samples) ++counts[static_cast<int>(e.split)];
  char line[256];
  std::snprintf(line, sizeof line, "wrote %zu samples (%zu train, %zu valid, %zu test) to %s",
                manifest.samples.size(), counts[0], counts[1], counts[2], args.out.string().c_str());
  emit(log, line);
  return manifest;
}

Balance parse_balance(std::string_view name) {
  if (name == "none") return Balance::none;
  if (name == "median-frequency" || name == "median_frequency") return Balance::median_frequency;
  throw ConfigError("unknown balance mode '" + std::string(name) + "' (expected none or median-frequency)");
}

const char* to_string(Balance balance) {
  return balance == Balance::none ? "none" : "median-frequency";
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  loss.validate(model.classes);
  if (manifest.empty()) throw ConfigError("run config: no dataset manifest given");
  if (output_dir.empty()) throw ConfigError("run config: no output directory given");
  if (balance == Balance::median_frequency && !loss.class_weights.empty()) {
    throw ConfigError("run config: explicit class_weights conflict with median-frequency balancing");
  }
}

RunConfig run_config_from_json(std::string_view text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig rc;
  try {
    if (!doc.contains("model")) throw ConfigError("run config: missing field 'model'");
    rc.model = detail::model_config_from_json(doc["model"]);
    if (doc.contains("train")) {
      const json& t = doc["train"];
      if (t.contains("batch_size")) rc.train.batch_size = count_field(t["batch_size"], "train.batch_size");
      if (t.contains("max_epochs")) rc.train.max_epochs = count_field(t["max_epochs"], "train.max_epochs");
      if (t.contains("seed")) rc.train.seed = t["seed"].get<std::uint64_t>();
      if (t.contains("eval_every")) rc.train.eval_every = count_field(t["eval_every"], "train.eval_every");
      if (t.contains("threads")) rc.train.threads = count_field(t["threads"], "train.threads");
    }
    if (doc.contains("loss")) {
      const json& l = doc["loss"];
      if (l.contains("l2")) rc.loss.l2 = l["l2"].get<double>();
      if (l.contains("void_class") && !l["void_class"].is_null()) rc.loss.void_class = l["void_class"].get<std::int32_t>();
      if (l.contains("class_weights")) rc.loss.class_weights = l["class_weights"].get<std::vector<double>>();
      if (l.contains("balance")) rc.balance = parse_balance(l["balance"].get<std::string>());
    }
    if (doc.contains("dataset")) rc.manifest = base_dir / doc["dataset"].get<std::string>();
    if (doc.contains("output_dir")) rc.output_dir = base_dir / doc["output_dir"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config has a malformed field: ") + e.what());
  }
  return rc;
}

RunConfig read_run_config(const fs::path& path) {
  return run_config_from_json(read_text(path, "run config"), path.parent_path());
}

std::string run_config_to_json(const RunConfig& rc) {
  json loss = {{"l2", rc.loss.l2}, {"balance", to_string(rc.balance)}};
  loss["void_class"] = rc.loss.void_class ? json(*rc.loss.void_class) : json(nullptr);
  if (!rc.loss.class_weights.empty()) loss["class_weights"] = rc.loss.class_weights;
  const json doc = {{"model", detail::model_config_to_json(rc.model)},
                    {"train",
                     {{"batch_size", rc.train.batch_size},
                      {"max_epochs", rc.train.max_epochs},
                      {"seed", rc.train.seed},
                      {"eval_every", rc.train.eval_every},
                      {"threads", rc.train.threads}}},
                    {"loss", loss},
                    {"dataset", fs::absolute(rc.manifest).lexically_normal().string()},
                    {"output_dir", fs::absolute(rc.output_dir).lexically_normal().string()}};
  return doc.dump(2) + "\n";
}

TrainSummary train(const TrainArgs& args, const Log& log) {
  RunConfig rc = read_run_config(args.config);
  if (args.out) rc.output_dir = *args.out;
  if (args.manifest) rc.manifest = *args.manifest;
  if (args.balance) rc.balance = *args.balance;
  if (args.epochs) rc.train.max_epochs = *args.epochs;
  if (args.batch_size) rc.train.batch_size = *args.batch_size;
  if (args.seed) rc.train.seed = rc.model.seed = *args.seed;
  if (args.threads) rc.train.threads = *args.threads;
  rc.validate();

  const DatasetManifest manifest = read_manifest(rc.manifest);
  if (manifest.class_count() != rc.model.classes) {
    throw ConfigError("dataset has " + std::to_string(manifest.class_count()) + " classes, the model " +
                      std::to_string(rc.model.classes));
  }
  if (!rc.loss.void_class) rc.loss.void_class = manifest.void_index;

  const fs::path last = rc.output_dir / "last.model";
  if (args.resume && !fs::exists(last)) {
    throw ConfigError("--resume given but '" + last.string() + "' does not exist");
  }
  if (!args.resume && fs::exists(last)) {
    throw RefusedError("'" + rc.output_dir.string() + "' already holds a run; pass --resume to continue it");
  }

  std::error_code ec;
  fs::create_directories(rc.output_dir, ec);
  if (ec) throw IoError("cannot create '" + rc.output_dir.string() + "': " + ec.message());
  DirectoryLock lock(rc.output_dir);
  write_text(rc.output_dir / "config.json", run_config_to_json(rc));

  const auto train_set = load_split(manifest, Split::train);
  const auto valid_set = load_split(manifest, Split::valid);
  if (train_set.empty()) throw ConfigError("dataset has no training samples");

  if (rc.balance == Balance::median_frequency) {
    const auto freqs = class_frequencies(train_set, rc.model.classes, rc.loss.void_class);
    std::vector<std::string> warnings;
    rc.loss.class_weights = median_frequency_weights(freqs, &warnings);
    for (const auto& w : warnings) emit(log, "warning: " + w);
    std::string line = "class weights:";
    char buf[32];
    for (double w : rc.loss.class_weights) {
      std::snprintf(buf, sizeof buf, " %.4g", w);
      line += buf;
    }
    emit(log, line);
  }

  Checkpoint state;
  if (args.resume) {
    state = load_checkpoint(last, rc.model);
    if (!state.optimizer) throw FormatError("'" + last.string() + "' holds no optimizer state to resume from");
    emit(log, "resuming after epoch " + std::to_string(state.epoch));
  } else {
    state.model = build_model<float>(rc.model);
  }

  auto on_epoch = [&](const EpochRecord& r) {
    char line[160];
    if (r.evaluated) {
      std::snprintf(line, sizeof line, "epoch %zu  loss %.5f  global acc %.4f  mean IoU %.4f  (%.2f s)", r.epoch,
                    r.mean_loss, r.global_acc, r.mean_iou, r.wall_seconds);
    } else {
      std::snprintf(line, sizeof line, "epoch %zu  loss %.5f  (%.2f s)", r.epoch, r.mean_loss, r.wall_seconds);
    }
    emit(log, line);
  };
  TrainConfig tc = rc.train;
  tc.output_dir = rc.output_dir;
  const TrainResult result = reseg::train(state, train_set, valid_set, tc, rc.loss, on_epoch);

  TrainSummary s;
  s.epochs_completed = state.epoch;
  s.best_score = state.best_score;
  s.final_loss = result.log.empty() ? 0.0 : result.log.back().mean_loss;
  s.aborted = result.aborted;
  s.abort_reason = result.abort_reason;
  if (result.aborted) emit(log, "training aborted at " + result.abort_reason);
  return s;
}

EvaluationReport eval(const EvalArgs& args, const Log& log) {
  const Model model = load_model(args.model);
  const DatasetManifest manifest = read_manifest(args.manifest);
  if (manifest.class_count() != model.config().classes) {
    throw ConfigError("dataset has " + std::to_string(manifest.class_count()) + " classes, the model " +
                      std::to_string(model.config().classes));
  }
  const auto samples = load_split(manifest, args.split);
  if (samples.empty()) throw ConfigError(std::string("split '") + to_string(args.split) + "' is empty");
  ConfusionMatrix cm(model.config().classes);
  for (const auto& s : samples) cm.accumulate(argmax_labels(model.forward(s.image)), s.mask, manifest.void_index);
  const auto report = EvaluationReport::from_matrix(cm, manifest.classes);
  emit(log, report.to_table());
  if (args.csv_out) write_text(*args.csv_out, report.to_csv());
  return report;
}

void predict(const PredictArgs& args, const Log& log) {
  const Model model = load_model(args.model);
  const Image image = read_rgb(args.image);
  const Tensor probs = model.forward(to_unit_range(image));
  write_netpbm(args.out, to_gray_image(argmax_labels(probs)));
  emit(log, "wrote " + args.out.string());
  if (!args.probs) return;
  const std::size_t k = probs.channels();
  for (std::size_t c = 0; c < k; ++c) {
    Image map{probs.rows(), probs.cols(), 1, std::vector<std::uint8_t>(probs.rows() * probs.cols())};
    for (std::size_t p = 0; p < map.pixels.size(); ++p) {
      map.pixels[p] = static_cast<std::uint8_t>(std::lround(std::clamp(probs[p * k + c], 0.0f, 1.0f) * 255.0f));
    }
    fs::path out = args.out.parent_path() / (args.out.stem().string() + "_prob" + std::to_string(c) + ".pgm");
    write_netpbm(out, map);
    emit(log, "wrote " + out.string());
  }
}

GradientReport gradcheck(const GradcheckArgs& args, const Log& log) {
  ModelConfig mc = ModelConfig::tiny();
  LossConfig loss;
  if (args.config) {
    const std::string text = read_text(*args.config, "config");
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (doc.is_object() && doc.contains("model")) {
      const RunConfig rc = run_config_from_json(text, args.config->parent_path());
      mc = rc.model;
      loss = rc.loss;
    } else {
      mc = model_config_from_json(text);
    }
  } else if (args.frozen_frontend) {
    ConvSpec stem = ConvSpec::tied(3, 3, 3, 4);
    stem.stride_h = stem.stride_w = 1;
    stem.padding = Padding::uniform(1);
    mc.frontend.push_back(FrontendStage::convolution(stem));
    emit(log, "using the tiny profile with a 3x3 convolutional front-end");
  }
  if (args.frozen_frontend) mc.frontend_frozen = true;
  mc.validate();
  loss.validate(mc.classes);
  if (!(args.tolerance > 0.0)) throw UsageError("tolerance must be positive");

  ModelD model = build_model<double>(mc);
  if (args.frozen_frontend) model.set_frontend_frozen(true);
  const auto batch = gradient_check_batch(mc, args.seed);
  GradientCheckOptions opts;
  if (args.epsilon) opts.epsilon = *args.epsilon;
  opts.seed = args.seed;
  opts.max_coordinates = args.max_coordinates;
  opts.loss = loss;
  const GradientReport report = gradient_check(model, batch, args.tolerance, opts);
  emit(log, report.to_table());
  return report;
}

}  // namespace reseg::cmd
