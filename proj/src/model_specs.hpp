// SPDX-License-Identifier: Apache-2.0
// Parameter layout of a model config, shared by construction, validation and
// persistence.
#pragma once

#include <string>
#include <vector>

#include "reseg/model.hpp"

namespace reseg::detail {

enum class ParamInit { glorot, orthonormal, zero };

struct ParamSpec {
  std::string id;
  Shape shape;
  ParamInit init;
  std::size_t fan_in;
  std::size_t fan_out;
  bool frozen;
  bool decays;
};

/// Every parameter of `config` in model order; throws ConfigError on
/// inconsistent architectures.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

ConvSpec upsample_spec(const UpsampleLayerConfig& layer, std::size_t input_channels);
ConvSpec classifier_spec(std::size_t input_channels, std::size_t classes);

}  // namespace reseg::detail
