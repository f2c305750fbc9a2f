// SPDX-License-Identifier: Apache-2.0
// The work behind each CLI subcommand, shared by the C interface.
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "reseg/data.hpp"
#include "reseg/gradcheck.hpp"
#include "reseg/metrics.hpp"
#include "reseg/model.hpp"
#include "reseg/training.hpp"

namespace reseg::cmd {

using Log = std::function<void(const std::string&)>;

struct SynthArgs {
  SynthOptions options;
  std::filesystem::path out;
  bool force = false;
};
DatasetManifest synth(const SynthArgs& args, const Log& log);

enum class Balance { none, median_frequency };
Balance parse_balance(std::string_view name);
const char* to_string(Balance balance);

/// Everything a training run needs, as read from JSON.
///   { "model": {...}, "train": {"batch_size", "max_epochs", "seed",
///     "eval_every", "threads"}, "loss": {"l2", "void_class",
///     "class_weights", "balance"}, "dataset": "manifest.json",
///     "output_dir": "runs/a" }
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  Balance balance = Balance::none;
  std::filesystem::path manifest;
  std::filesystem::path output_dir;

  void validate() const;
};

/// Relative paths resolve against the directory holding the file.
RunConfig read_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(std::string_view text, const std::filesystem::path& base_dir);
std::string run_config_to_json(const RunConfig& config);

struct TrainArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> manifest;
  std::optional<Balance> balance;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool resume = false;
};

struct TrainSummary {
  std::uint64_t epochs_completed = 0;
  double final_loss = 0.0;
  double best_score = -1.0;
  bool aborted = false;
  std::string abort_reason;
};

/// Throws ConfigError before any work when the merged configuration is
/// invalid, RefusedError when another run holds the output directory.
TrainSummary train(const TrainArgs& args, const Log& log);

struct EvalArgs {
  std::filesystem::path model;
  std::filesystem::path manifest;
  Split split = Split::test;
  std::optional<std::filesystem::path> csv_out;
};
EvaluationReport eval(const EvalArgs& args, const Log& log);

struct PredictArgs {
  std::filesystem::path model;
  std::filesystem::path image;
  std::filesystem::path out;
  bool probs = false;
};
void predict(const PredictArgs& args, const Log& log);

struct GradcheckArgs {
  std::optional<std::filesystem::path> config;
  double tolerance = 1e-4;
  std::optional<double> epsilon;
  std::uint64_t seed = 0;
  std::size_t max_coordinates = 200;
  bool frozen_frontend = false;
};
GradientReport gradcheck(const GradcheckArgs& args, const Log& log);

}  // namespace reseg::cmd
