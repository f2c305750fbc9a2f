// SPDX-License-Identifier: Apache-2.0
#include "reseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace reseg {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::size_t classes, std::vector<std::uint64_t> counts) {
  ConfusionMatrix cm(classes);
  if (counts.size() != classes * classes) throw DimensionError("confusion matrix counts must be K x K");
  cm.counts_ = std::move(counts);
  return cm;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += (*this)(k, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t k) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < classes_; ++t) s += (*this)(t, k);
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t k = 0; k < classes_; ++k) s += (*this)(k, k);
  return s;
}

void ConfusionMatrix::accumulate(const LabelMap& predicted, const LabelMap& target,
                                 std::optional<std::int32_t> void_class) {
  if (predicted.rows != target.rows || predicted.cols != target.cols) {
    throw DimensionError("confusion matrix: prediction " + std::to_string(predicted.rows) + "x" +
                         std::to_string(predicted.cols) + " vs target " + std::to_string(target.rows) + "x" +
                         std::to_string(target.cols));
  }
  const auto k = static_cast<std::int32_t>(classes_);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const std::int32_t t = target.labels[i];
    if (void_class && t == *void_class) continue;
    const std::int32_t p = predicted.labels[i];
    if (t < 0 || t >= k || p < 0 || p >= k) {
      throw DimensionError("confusion matrix: label pair (" + std::to_string(t) + ", " + std::to_string(p) +
                           ") outside [0, " + std::to_string(k) + ")");
    }
    ++counts_[static_cast<std::size_t>(t) * classes_ + static_cast<std::size_t>(p)];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw DimensionError("confusion matrices have different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

double global_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw UndefinedMetricError("global accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

namespace {

template <typename Denominator>
ClassScores class_scores(const ConfusionMatrix& cm, Denominator denominator, const char* what) {
  ClassScores s;
  s.per_class.resize(cm.classes());
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const std::uint64_t d = denominator(k);
    if (d == 0) continue;
    const double v = static_cast<double>(cm(k, k)) / static_cast<double>(d);
    s.per_class[k] = v;
    sum += v;
    ++defined;
  }
  if (defined == 0) throw UndefinedMetricError(std::string(what) + " is undefined for every class");
  s.mean = sum / static_cast<double>(defined);
  return s;
}

}  // namespace

ClassScores per_class_accuracy(const ConfusionMatrix& cm) {
  return class_scores(cm, [&](std::size_t k) { return cm.row_sum(k); }, "per-class accuracy");
}

ClassScores mean_iou(const ConfusionMatrix& cm) {
  return class_scores(cm, [&](std::size_t k) { return cm.row_sum(k) + cm.col_sum(k) - cm(k, k); }, "IoU");
}

template <typename T>
LabelMap argmax_labels(const BasicTensor<T>& probs) {
  if (probs.rank() != 3) throw DimensionError("argmax_labels: expected an H x W x K map");
  LabelMap out(probs.rows(), probs.cols());
  const std::size_t k = probs.channels();
  for (std::size_t p = 0; p < out.size(); ++p) {
    const T* v = probs.data() + p * k;
    out.labels[p] = static_cast<std::int32_t>(std::max_element(v, v + k) - v);
  }
  return out;
}

template LabelMap argmax_labels(const BasicTensor<float>&);
template LabelMap argmax_labels(const BasicTensor<double>&);

EvaluationReport EvaluationReport::from_matrix(const ConfusionMatrix& cm, std::vector<std::string> class_names) {
  EvaluationReport r;
  r.matrix = cm;
  if (class_names.size() != cm.classes()) {
    class_names.clear();
    for (std::size_t k = 0; k < cm.classes(); ++k) class_names.push_back("class" + std::to_string(k));
  }
  r.class_names = std::move(class_names);
  r.global_accuracy = reseg::global_accuracy(cm);
  r.class_accuracy = per_class_accuracy(cm);
  r.iou = mean_iou(cm);
  return r;
}

namespace {
std::string percent(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
  return buf;
}
}  // namespace

std::string EvaluationReport::to_table() const {
  std::size_t width = 13;
  for (const auto& n : class_names) width = std::max(width, n.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %9s %9s\n", static_cast<int>(width), "class", "acc(%)", "IoU(%)");
  os << line;
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    std::snprintf(line, sizeof line, "%-*s %9s %9s\n", static_cast<int>(width), class_names[k].c_str(),
                  percent(class_accuracy.per_class[k]).c_str(), percent(iou.per_class[k]).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-*s %9s\n", static_cast<int>(width), "global acc", percent(global_accuracy).c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-*s %9s\n", static_cast<int>(width), "avg class acc",
                percent(class_accuracy.mean).c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-*s %9s\n", static_cast<int>(width), "avg IoU", percent(iou.mean).c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-*s %9llu\n", static_cast<int>(width), "pixels",
                static_cast<unsigned long long>(matrix.total()));
  os << line;
  return os.str();
}

std::string EvaluationReport::to_csv() const {
  std::ostringstream os;
  os << "class,accuracy,iou\n";
  auto field = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    os << class_names[k] << ',' << field(class_accuracy.per_class[k]) << ',' << field(iou.per_class[k]) << '\n';
  }
  os << "global_acc," << field(global_accuracy) << ",\n";
  os << "avg_class_acc," << field(class_accuracy.mean) << ",\n";
  os << "avg_iou,," << field(iou.mean) << '\n';
  os << "pixels," << matrix.total() << ",\n";
  return os.str();
}

}  // namespace reseg
