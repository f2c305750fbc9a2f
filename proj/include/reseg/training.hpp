// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Class-weighted cross-entropy with void masking, median-frequency
 *         balancing, Adadelta with L2 weight decay, and the epoch loop.
 *
 * The loss of one image is the weighted negative log-likelihood averaged over
 * its non-void pixels. A batch gradient is the mean of the per-image
 * gradients. Weight decay is applied by the optimizer as l2 * theta on
 * trainable weights (never on biases).
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reseg/autodiff.hpp"
#include "reseg/data.hpp"
#include "reseg/label_map.hpp"
#include "reseg/model.hpp"

namespace reseg {

struct LossConfig {
  /// One positive weight per class; empty means unbalanced (all ones).
  std::vector<double> class_weights;
  std::optional<std::int32_t> void_class;
  double l2 = 0.001;

  /// Throws ConfigError on a length mismatch, negative weights or l2 < 0.
  void validate(std::size_t classes) const;
  double weight(std::size_t k) const { return class_weights.empty() ? 1.0 : class_weights[k]; }
};

/// w_k = median(freqs) / freqs_k. Zero-frequency classes get weight 0 and a
/// message appended to `warnings`. Throws ConfigError on empty input.
std::vector<double> median_frequency_weights(std::span<const double> freqs,
                                             std::vector<std::string>* warnings = nullptr);

/// Plain evaluation of the image loss. Throws DimensionError for labels
/// outside [0, K) that are not void, or for extent mismatches.
template <typename T>
double weighted_cross_entropy(const BasicTensor<T>& probs, const LabelMap& target, const LossConfig& cfg);

namespace ad {
/// Records the image loss on a tape; returns a scalar node.
template <typename T>
Var weighted_cross_entropy(Tape<T>& tape, Var probs, const LabelMap& target, const LossConfig& cfg);
}  // namespace ad

template <typename T>
struct BasicAdadeltaState {
  double rho = 0.95;
  double eps = 1e-6;
  std::map<std::string, BasicTensor<T>> sq_grad;
  std::map<std::string, BasicTensor<T>> sq_update;

  /// Zero accumulators shaped like every parameter of `model`.
  static BasicAdadeltaState zeros(const BasicModel<T>& model, double rho = 0.95, double eps = 1e-6);
  bool operator==(const BasicAdadeltaState&) const = default;
};

using AdadeltaState = BasicAdadeltaState<float>;

/// One Adadelta step on every trainable parameter. Accumulators are kept in
/// double precision arithmetic and stored in T. Missing gradients count as
/// zero. Throws NumericError before touching anything if a gradient is
/// non-finite.
template <typename T>
void adadelta_update(BasicModel<T>& model, const GradientMap<T>& grads, BasicAdadeltaState<T>& state,
                     const LossConfig& cfg);

struct TrainConfig {
  std::size_t batch_size = 5;
  std::size_t max_epochs = 50;
  std::uint64_t seed = 0;
  /// Where log.csv, last.model and best.model go; empty disables files.
  std::filesystem::path output_dir;
  /// Evaluate every n epochs (the last epoch is always evaluated).
  std::size_t eval_every = 1;
  /// Worker threads for per-image gradients; 0 reads RESEG_NUM_THREADS.
  std::size_t threads = 0;

  void validate() const;
};

/// Contiguous batches of a permutation; the last batch may be short.
std::vector<std::vector<std::size_t>> partition_batches(std::span<const std::size_t> order, std::size_t batch_size);

/// Order in which an epoch visits the training images.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

struct Checkpoint {
  Model model;
  std::optional<AdadeltaState> optimizer;
  /// Number of completed epochs.
  std::uint64_t epoch = 0;
  /// Best selection score so far (mean IoU); negative before any evaluation.
  double best_score = -1.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double global_acc = 0.0;
  double mean_iou = 0.0;
  double wall_seconds = 0.0;
  bool evaluated = false;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  bool aborted = false;
  std::string abort_reason;
};

/// Mean loss and metrics of `model` on `samples`.
struct SplitScore {
  double mean_loss = 0.0;
  double global_acc = 0.0;
  double mean_iou = 0.0;
};
SplitScore score_split(const Model& model, std::span<const Sample> samples, const LossConfig& loss,
                       std::size_t threads = 0);

/// Per-image loss and gradient averaged over `batch`. Per-image work runs in
/// parallel; the sum is taken in batch order, so results do not depend on the
/// thread count.
template <typename T>
GradientMap<T> batch_gradient(const BasicModel<T>& model, std::span<const Sample* const> batch, const LossConfig& loss,
                              std::size_t threads, double* mean_loss = nullptr);

/// Continues training from `state` until `cfg.max_epochs` epochs are
/// complete. `valid` selects the best checkpoint; when empty the training
/// split is scored instead. With an output directory, the initial model is
/// written before the first epoch and log rows are appended as epochs end.
/// A numeric failure stops the run, is recorded in the result and in the
/// log, and leaves the checkpoints of the last completed epoch in place.
TrainResult train(Checkpoint& state, std::span<const Sample> train_set, std::span<const Sample> valid,
                  const TrainConfig& cfg, const LossConfig& loss,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace reseg
