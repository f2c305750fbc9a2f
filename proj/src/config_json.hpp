// SPDX-License-Identifier: Apache-2.0
// JSON mapping of the configuration structs. Kept out of the public headers so
// the installed API does not depend on nlohmann/json.
#pragma once

#include <json.hpp>

#include "reseg/model.hpp"

namespace reseg::detail {

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Throws ConfigError naming the offending field.
ModelConfig model_config_from_json(const nlohmann::json& doc);

}  // namespace reseg::detail
