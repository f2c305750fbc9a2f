// SPDX-License-Identifier: Apache-2.0
/**
 * @file   metrics.hpp
 * @brief  Confusion matrix and the segmentation scores derived from it:
 *         global accuracy, per-class accuracy and intersection over union.
 *
 * Void pixels never enter the matrix. A class whose score has an empty
 * denominator is reported as undefined and left out of the class mean.
 */
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reseg/label_map.hpp"
#include "reseg/tensor.hpp"

namespace reseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  /// Row-major counts[true][predicted].
  static ConfusionMatrix from_counts(std::size_t classes, std::vector<std::uint64_t> counts);

  std::size_t classes() const { return classes_; }
  std::uint64_t operator()(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t k) const;
  std::uint64_t col_sum(std::size_t k) const;
  std::uint64_t trace() const;

  /// Adds every non-void pixel. Throws DimensionError on extent mismatch or
  /// a label outside [0, K) that is not the void index.
  void accumulate(const LabelMap& predicted, const LabelMap& target,
                  std::optional<std::int32_t> void_class = std::nullopt);

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// trace / total. Throws UndefinedMetricError on an empty matrix.
double global_accuracy(const ConfusionMatrix& cm);

struct ClassScores {
  std::vector<std::optional<double>> per_class;  // nullopt: undefined for that class
  double mean = 0.0;                             // over defined classes
};

/// Recall per class, cm[k][k] / row_sum(k).
ClassScores per_class_accuracy(const ConfusionMatrix& cm);

/// cm[k][k] / (row_sum(k) + col_sum(k) - cm[k][k]).
ClassScores mean_iou(const ConfusionMatrix& cm);

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class.
template <typename T>
LabelMap argmax_labels(const BasicTensor<T>& probs);

struct EvaluationReport {
  std::vector<std::string> class_names;
  ConfusionMatrix matrix{2};
  ClassScores class_accuracy;
  ClassScores iou;
  double global_accuracy = 0.0;

  static EvaluationReport from_matrix(const ConfusionMatrix& cm, std::vector<std::string> class_names);

  /// Aligned table with percentages to one decimal.
  std::string to_table() const;
  /// class,accuracy,iou rows followed by summary rows.
  std::string to_csv() const;
};

}  // namespace reseg
