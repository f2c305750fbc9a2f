// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model_io.hpp
 * @brief  Binary model and checkpoint files.
 *
 * Layout (all integers and floats little-endian):
 *
 *   "RESEGMDL"  u32 version  u64 n  config JSON (n bytes, UTF-8)
 *   u32 count, then per parameter:
 *     u32 n  id   u8 dtype (1 = f32, 2 = f64)   u8 flags (1 frozen, 2 decays)
 *     u32 rank  u64 extents[rank]  values
 *   u8 has_optimizer
 *     [f64 rho  f64 eps  u32 count  records as above named sq_grad/<id>, sq_update/<id>]
 *   u64 epoch  f64 best_score
 *
 * Files are written to a temporary sibling and renamed into place.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "reseg/model.hpp"
#include "reseg/training.hpp"

namespace reseg {

inline constexpr std::uint32_t kModelFormatVersion = 1;

std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError (bad magic, malformed record, trailing bytes),
/// VersionError, TruncatedError, or ShapeError naming the offending
/// parameter when `expected` is given and the stored tensors do not fit it.
Checkpoint deserialize_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// A checkpoint without optimizer state at epoch 0.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace reseg
