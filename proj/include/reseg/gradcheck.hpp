// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gradcheck.hpp
 * @brief  End-to-end comparison of tape gradients against central
 *         differences for every parameter tensor of a 64-bit model.
 *
 * The objective is the mean image loss over the batch plus
 * l2 * sum ||theta||^2 / 2 over trainable weights, i.e. exactly what the
 * optimizer descends. Frozen tensors are not differenced; their analytic
 * gradient must be exactly zero.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "reseg/autodiff.hpp"
#include "reseg/data.hpp"
#include "reseg/model.hpp"
#include "reseg/training.hpp"

namespace reseg {

struct GradientCheckOptions {
  double epsilon = 1e-4;
  /// Larger tensors are subsampled to this many coordinates.
  std::size_t max_coordinates = 200;
  std::uint64_t seed = 0;
  LossConfig loss;
  /// Coordinates that miss the tolerance are measured again at epsilon / 10,
  /// then epsilon / 100, keeping the closest estimate.
  bool refine_failures = true;
  /// Applied to the analytic gradients before comparison (fault injection).
  std::function<void(GradientMap<double>&)> gradient_hook;
};

/// Objective value used by the check, evaluated without a tape.
double gradient_check_objective(const ModelD& model, std::span<const Sample> batch, const LossConfig& loss);

/// Analytic gradient of the same objective.
GradientMap<double> gradient_check_analytic(const ModelD& model, std::span<const Sample> batch, const LossConfig& loss);

GradientReport gradient_check(const ModelD& model, std::span<const Sample> batch, double tolerance,
                              const GradientCheckOptions& options = {});

/// Two synthetic images matching the input extents of `config`.
std::vector<Sample> gradient_check_batch(const ModelConfig& config, std::uint64_t seed = 0);

}  // namespace reseg
