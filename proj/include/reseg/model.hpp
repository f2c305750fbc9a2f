// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  The assembled segmentation network: front-end, stacked ReNet
 *         layers, transposed-convolution upsampling, a 1x1 classifier and a
 *         per-pixel softmax.
 *
 * `units` of a ReNet layer is the per-direction GRU width U; the layer emits
 * 2U channels. Upsampling layers use stride equal to their filter size, so
 * the product of filter sizes must undo the product of front-end reductions
 * and ReNet patch sizes on each axis.
 */
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "reseg/autodiff.hpp"
#include "reseg/layers.hpp"
#include "reseg/tensor.hpp"

namespace reseg {

struct ReNetLayerConfig {
  std::size_t patch_h = 2;
  std::size_t patch_w = 2;
  std::size_t units = 4;
  bool operator==(const ReNetLayerConfig&) const = default;
};

struct UpsampleLayerConfig {
  std::size_t filter_h = 2;
  std::size_t filter_w = 2;
  std::size_t channels = 8;
  bool operator==(const UpsampleLayerConfig&) const = default;
};

struct ModelConfig {
  std::size_t input_h = 32;
  std::size_t input_w = 32;
  std::size_t input_channels = 3;
  std::vector<FrontendStage> frontend;
  bool frontend_frozen = false;
  std::vector<ReNetLayerConfig> renet;
  std::vector<UpsampleLayerConfig> upsample;
  std::size_t classes = 2;
  std::uint64_t seed = 0;

  /// 8x8x3 input, identity front-end, one 2x2 ReNet layer with U=4, one
  /// 2x2 upsampling layer, two classes.
  static ModelConfig tiny();

  /// Throws ConfigError; resolution mismatches print both factors.
  void validate() const;

  /// {rows, cols} reduction of the front-end and ReNet stack.
  std::array<std::size_t, 2> downsampling() const;
  /// {rows, cols} expansion of the upsampling stack.
  std::array<std::size_t, 2> upsampling() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_json_text(const ModelConfig& config);
/// Throws ConfigError on malformed or incomplete documents.
ModelConfig model_config_from_json(std::string_view text);

/// Feature-map shapes at each stage boundary for a validated config.
struct ModelShapes {
  Shape input;
  Shape frontend;
  std::vector<Shape> renet;
  std::vector<Shape> upsample;
  Shape output;
};

ModelShapes infer_shapes(const ModelConfig& config);

template <typename T>
struct Parameter {
  std::string id;
  BasicTensor<T> value;
  bool frozen = false;
  /// Weights decay under L2; biases do not.
  bool decays = true;
};

/// Tape handles for every parameter of a model, registered in model order.
struct ModelVars {
  std::vector<Var> frontend_kernels, frontend_biases;
  std::vector<ad::ReNetVars> renet;
  std::vector<Var> upsample_kernels, upsample_biases;
  Var classifier_kernel, classifier_bias;
  std::vector<Var> all;
};

template <typename T>
class BasicModel {
 public:
  BasicModel() = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  /// Throws ConfigError if `id` is unknown.
  Parameter<T>& parameter(std::string_view id);
  const Parameter<T>& parameter(std::string_view id) const;
  bool has_parameter(std::string_view id) const;

  std::size_t parameter_count() const;

  /// Per-pixel class logits, H x W x K.
  BasicTensor<T> logits(const BasicTensor<T>& image, SweepExecution execution = SweepExecution::sequential) const;
  /// Per-pixel class probabilities, H x W x K.
  BasicTensor<T> forward(const BasicTensor<T>& image, SweepExecution execution = SweepExecution::sequential) const;

  ModelVars register_parameters(Tape<T>& tape) const;
  /// Records the forward pass of one image; returns the probability map.
  Var record_forward(Tape<T>& tape, const ModelVars& vars, Var image,
                     SweepExecution execution = SweepExecution::sequential) const;

  /// Marks every front-end parameter frozen (or trainable again).
  void set_frontend_frozen(bool frozen);

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out;
    out.config_ = config_;
    for (const auto& p : params_) out.params_.push_back({p.id, p.value.template cast<U>(), p.frozen, p.decays});
    return out;
  }

  /// Checks parameter ids and shapes against the config; throws ShapeError
  /// naming the first offending id.
  void check_consistency() const;

 private:
  template <typename>
  friend class BasicModel;
  template <typename U>
  friend BasicModel<U> build_model(const ModelConfig& config, std::uint64_t seed);
  template <typename U>
  friend BasicModel<U> assemble_model(ModelConfig config, std::vector<Parameter<U>> params);

  ReNetParams<T> renet_params(std::size_t layer) const;
  void check_image(const Shape& shape) const;

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
};

using Model = BasicModel<float>;
using ModelD = BasicModel<double>;

/// Realizes a config: Glorot-uniform kernels and GRU input weights,
/// orthonormal GRU recurrent weights, zero biases. Deterministic per seed.
template <typename T>
BasicModel<T> build_model(const ModelConfig& config, std::uint64_t seed);

template <typename T>
BasicModel<T> build_model(const ModelConfig& config) {
  return build_model<T>(config, config.seed);
}

/// Wraps existing parameters; validates them against the config.
template <typename T>
BasicModel<T> assemble_model(ModelConfig config, std::vector<Parameter<T>> params);

/// Orthonormal columns (rows >= cols) or rows (rows < cols) from the QR
/// factorisation of a Gaussian matrix.
template <typename T>
BasicTensor<T> init_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

/// Uniform on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
template <typename T>
BasicTensor<T> init_glorot(std::size_t fan_in, std::size_t fan_out, Shape shape, std::mt19937_64& rng);

/// Parameter ids in model order for a config, without building it.
std::vector<std::string> parameter_ids(const ModelConfig& config);

}  // namespace reseg
