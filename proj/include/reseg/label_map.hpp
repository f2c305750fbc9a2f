// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "reseg/errors.hpp"

namespace reseg {

/// H x W grid of class indices. A void pixel carries the dataset's void
/// index, which may lie outside [0, K).
struct LabelMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t r, std::size_t c, std::int32_t fill = 0) : rows(r), cols(c), labels(r * c, fill) {}
  LabelMap(std::size_t r, std::size_t c, std::vector<std::int32_t> values) : rows(r), cols(c), labels(std::move(values)) {
    if (labels.size() != rows * cols) throw DimensionError("label map value count does not match its extents");
  }

  std::size_t size() const { return labels.size(); }
  std::int32_t& operator()(std::size_t r, std::size_t c) { return labels[r * cols + c]; }
  std::int32_t operator()(std::size_t r, std::size_t c) const { return labels[r * cols + c]; }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace reseg
