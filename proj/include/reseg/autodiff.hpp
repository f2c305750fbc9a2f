// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Reverse-mode differentiation tape and finite-difference checking.
 *
 * A Tape records one node per tensor operation while the forward pass runs.
 * Each node owns a backward closure that reads the gradient of its output and
 * accumulates into the gradients of its inputs. Recurrent sweeps record one
 * node per time step; those nodes write into a slot reserved up front and
 * filled piecewise, so the tape never copies a whole sequence per step.
 *
 * A tape is single-writer while recording and single-reader during
 * backward(). Distinct tapes are independent.
 */
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "reseg/tensor.hpp"

namespace reseg {

/// Handle to a value slot on a tape.
struct Var {
  std::size_t slot = static_cast<std::size_t>(-1);
};

template <typename T>
using GradientMap = std::map<std::string, BasicTensor<T>>;

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Var constant(BasicTensor<T> value);
  /// Registers a named leaf. Frozen parameters always report zero gradient.
  Var parameter(std::string id, BasicTensor<T> value, bool frozen = false);

  /// Appends a node producing `value`; `backward` may be empty for
  /// operations without differentiable inputs.
  Var record(std::string op, BasicTensor<T> value, Backward backward);

  /// Appends a node owning a zero-filled slot that later nodes write into.
  Var reserve(std::string op, Shape shape);
  /// Appends a node with no value of its own (it writes into a reserved slot).
  void record_effect(std::string op, Backward backward);

  const BasicTensor<T>& value(Var v) const;
  /// Write access for filling reserved slots during the forward pass.
  BasicTensor<T>& mutable_value(Var v);
  /// Gradient buffer of a slot; only valid while backward() runs or after it.
  BasicTensor<T>& grad(Var v);
  const BasicTensor<T>& grad(Var v) const;

  void mark_loss(Var v);
  bool has_loss() const { return loss_.slot != static_cast<std::size_t>(-1); }

  /// Runs the recorded nodes in reverse order. Calling it again recomputes
  /// from scratch and yields identical results.
  GradientMap<T> backward();

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t slot_count() const { return values_.size(); }
  const std::string& op_name(std::size_t node) const { return nodes_[node].op; }

 private:
  struct Node {
    std::string op;
    std::size_t slot;  // npos for effect nodes
    Backward backward;
  };
  struct ParamSlot {
    std::string id;
    std::size_t slot;
    bool frozen;
  };

  std::size_t push_value(BasicTensor<T> value);
  void check_slot(Var v) const;

  std::vector<BasicTensor<T>> values_;
  std::vector<BasicTensor<T>> grads_;
  std::vector<Node> nodes_;
  std::vector<ParamSlot> params_;
  Var loss_;
};

namespace ad {

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var scale(Tape<T>& tape, Var a, T factor);
/// Scalar sum of all elements.
template <typename T>
Var sum(Tape<T>& tape, Var a);
template <typename T>
Var activation(Tape<T>& tape, Var x, Activation kind);
template <typename T>
Var conv2d(Tape<T>& tape, Var x, const ConvSpec& spec, Var kernels, Var bias);
template <typename T>
Var transposed_conv2d(Tape<T>& tape, Var x, const ConvSpec& spec, Var kernels, Var bias);
template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);
template <typename T>
Var softmax_channels(Tape<T>& tape, Var logits);
template <typename T>
Var max_pool2x2(Tape<T>& tape, Var x);
/// coefficient * sum_i ||x_i||^2 / 2 as a scalar.
template <typename T>
Var half_squared_norm(Tape<T>& tape, const std::vector<Var>& xs, T coefficient);

}  // namespace ad

/// Central-difference gradient of `evaluate` at `params`. Coordinate i uses
/// step epsilon * max(|params_i|, 1). When `coords` is non-empty only those
/// coordinates are evaluated; the rest stay zero.
TensorD finite_difference_grad(const std::function<double(const TensorD&)>& evaluate, const TensorD& params,
                               double epsilon, const std::vector<std::size_t>& coords = {});

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

struct ParameterCheck {
  std::string id;
  bool frozen = false;
  std::size_t checked = 0;
  /// Coordinates whose estimate came from the finer step.
  std::size_t refined = 0;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double max_abs_analytic = 0.0;
  bool passed = true;
};

struct GradientReport {
  std::vector<ParameterCheck> parameters;
  double tolerance = 0.0;
  bool passed = true;
  std::string worst_parameter;
  double worst_error = 0.0;

  /// Aligned plain-text table, one row per parameter tensor.
  std::string to_table() const;
};

}  // namespace reseg
