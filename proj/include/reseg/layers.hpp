// SPDX-License-Identifier: Apache-2.0
/**
 * @file   layers.hpp
 * @brief  Patch tiling, GRU cells, directional sweeps, the ReNet layer,
 *         transposed-convolution upsampling and the convolutional front-end.
 *
 * A ReNet layer tiles its input into non-overlapping patches, sweeps the
 * patch grid top-down and bottom-up with two independent GRUs, concatenates
 * their states, then sweeps that map left-to-right and right-to-left with two
 * more GRUs reading 1x1 patches. Every output position therefore depends on
 * the whole input.
 *
 * Each function comes in two flavours: a plain forward over tensors and an
 * `ad::` variant that records onto a Tape. Both share the same kernels.
 */
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "reseg/autodiff.hpp"
#include "reseg/tensor.hpp"

namespace reseg {

enum class Direction { down, up, right, left };

const char* to_string(Direction d);

/// I x J grid of flattened patches, stored as an I x J x (Hp*Wp*C) tensor.
/// Flattening order inside a patch: rows, then cols, channels innermost.
template <typename T>
struct PatchGrid {
  BasicTensor<T> patches;
  std::size_t patch_h = 1;
  std::size_t patch_w = 1;
  Shape origin;

  std::size_t rows() const { return patches.rows(); }
  std::size_t cols() const { return patches.cols(); }
  std::size_t vector_length() const { return patches.channels(); }
};

template <typename T>
PatchGrid<T> split_patches(const BasicTensor<T>& x, std::size_t patch_h, std::size_t patch_w);

/// Inverse of split_patches.
template <typename T>
BasicTensor<T> merge_patches(const PatchGrid<T>& grid);

/// Canonical order of the nine GRU tensors, also used for parameter ids.
inline constexpr std::array<const char*, 9> kGruTensorNames = {
    "w_update", "w_reset", "w_candidate", "r_update", "r_reset", "r_candidate", "b_update", "b_reset", "b_candidate"};

/// Reset/update-gate GRU. Input weights are in_dim x U (row-vector
/// convention, preact = x W + h R + b); recurrent weights are U x U.
template <typename T>
struct GruParams {
  BasicTensor<T> w_update, w_reset, w_candidate;
  BasicTensor<T> r_update, r_reset, r_candidate;
  BasicTensor<T> b_update, b_reset, b_candidate;

  static GruParams zeros(std::size_t input_dim, std::size_t units);

  std::size_t input_dim() const { return w_update.extent(0); }
  std::size_t units() const { return b_update.size(); }

  std::array<BasicTensor<T>*, 9> tensors();
  std::array<const BasicTensor<T>*, 9> tensors() const;

  /// Throws DimensionError naming the first inconsistent tensor.
  void validate() const;
};

/// Cached activations of one GRU step. `state` is both the emitted
/// projection and the state handed to the next step.
template <typename T>
struct GruStep {
  std::vector<T> state;
  std::vector<T> update;
  std::vector<T> reset;
  std::vector<T> candidate;
};

template <typename T>
GruStep<T> gru_step(const GruParams<T>& params, std::span<const T> prev_state, std::span<const T> input);

/// Accumulates d(loss)/d(params), d(loss)/d(prev_state) and d(loss)/d(input)
/// given d(loss)/d(state). `grads` tensors must already be sized like params.
template <typename T>
void gru_step_backward(const GruParams<T>& params, std::span<const T> prev_state, std::span<const T> input,
                       const GruStep<T>& step, std::span<const T> grad_state, GruParams<T>& grads,
                       std::span<T> grad_prev_state, std::span<T> grad_input);

template <typename T>
struct SweepParams {
  GruParams<T> gru;
  Direction direction = Direction::down;
};

/// Independent sequences (columns or rows) may be processed on separate
/// threads; the result is bitwise identical to the sequential order.
enum class SweepExecution { sequential, parallel };

/// Sweeps an I x J x D grid and returns the I x J x U map of emitted states.
/// Every sequence starts from a zero state.
template <typename T>
BasicTensor<T> directional_sweep(const SweepParams<T>& params, const BasicTensor<T>& grid,
                                 SweepExecution execution = SweepExecution::sequential);

template <typename T>
struct ReNetParams {
  SweepParams<T> down, up, right, left;
  std::size_t patch_h = 1;
  std::size_t patch_w = 1;

  std::size_t units() const { return down.gru.units(); }
  void validate() const;
};

/// H x W x C -> (H/Hp) x (W/Wp) x 2U.
template <typename T>
BasicTensor<T> renet_layer(const ReNetParams<T>& params, const BasicTensor<T>& x,
                           SweepExecution execution = SweepExecution::sequential);

/// relu(transposed_conv2d(x)); spec must be tied.
template <typename T>
BasicTensor<T> upsample_layer(const ConvSpec& spec, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                              const BasicTensor<T>& x);

/// One front-end stage: a convolution followed by ReLU, or a 2x2/2 max-pool.
struct FrontendStage {
  enum class Kind { conv, pool };
  Kind kind = Kind::conv;
  ConvSpec conv;

  static FrontendStage pool() { return {Kind::pool, {}}; }
  static FrontendStage convolution(ConvSpec spec) { return {Kind::conv, spec}; }
  bool operator==(const FrontendStage&) const = default;
};

/// Product of the stride and pooling reductions of a stage list, {rows, cols}.
std::array<std::size_t, 2> frontend_downsampling(const std::vector<FrontendStage>& stages);

/// Output extents of the stage list on an H x W x C input; throws
/// ConfigError when a pooling stage sees an odd extent.
Shape frontend_output_shape(const std::vector<FrontendStage>& stages, const Shape& input);

template <typename T>
struct FrontendParams {
  std::vector<FrontendStage> stages;
  std::vector<BasicTensor<T>> kernels;  // one per conv stage
  std::vector<BasicTensor<T>> biases;
  bool frozen = false;
};

/// An empty stage list is the identity.
template <typename T>
BasicTensor<T> conv_frontend(const FrontendParams<T>& params, const BasicTensor<T>& x);

namespace ad {

/// Tape handles of the nine GRU tensors, in kGruTensorNames order.
using GruVars = std::array<Var, 9>;

template <typename T>
Var split_patches(Tape<T>& tape, Var x, std::size_t patch_h, std::size_t patch_w);

/// Records one node per time step.
template <typename T>
Var directional_sweep(Tape<T>& tape, const GruVars& gru, Direction direction, Var grid,
                      SweepExecution execution = SweepExecution::sequential);

struct ReNetVars {
  GruVars down, up, right, left;
  std::size_t patch_h = 1;
  std::size_t patch_w = 1;
};

template <typename T>
Var renet_layer(Tape<T>& tape, const ReNetVars& vars, Var x, SweepExecution execution = SweepExecution::sequential);

template <typename T>
Var upsample_layer(Tape<T>& tape, const ConvSpec& spec, Var kernels, Var bias, Var x);

template <typename T>
Var conv_frontend(Tape<T>& tape, const std::vector<FrontendStage>& stages, const std::vector<Var>& kernels,
                  const std::vector<Var>& biases, Var x);

}  // namespace ad

}  // namespace reseg
