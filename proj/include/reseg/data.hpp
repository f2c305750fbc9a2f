// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Binary NetPBM I/O, ground-truth preparation, dataset manifests,
 *         class-frequency statistics and a synthetic shape dataset.
 *
 * Manifest JSON:
 *   { "classes": ["background", "shape"], "void_index": 255,
 *     "samples": [ {"image": "img/0.ppm", "mask": "mask/0.pgm", "split": "train"} ] }
 * Paths are relative to the manifest's directory. `void_index` is optional.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reseg/label_map.hpp"
#include "reseg/tensor.hpp"

namespace reseg {

/// Raw 8-bit raster as stored in a P5 (1 channel) or P6 (3 channel) file.
struct Image {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

/// Parses P5/P6 with maxval 255. Throws FormatError / TruncatedError.
Image decode_netpbm(std::string_view bytes);
std::string encode_netpbm(const Image& image);
Image read_netpbm(const std::filesystem::path& path);
void write_netpbm(const std::filesystem::path& path, const Image& image);

/// H x W x C tensor with values scaled to [0, 1].
Tensor to_unit_range(const Image& image);
/// Inverse of to_unit_range with rounding and clamping.
Image from_unit_range(const Tensor& map);
/// Raw gray levels of a single-channel image as labels.
LabelMap to_label_map(const Image& gray);
Image to_gray_image(const LabelMap& labels);

/// value < 128 -> 0, value >= 128 -> 1.
LabelMap threshold_mask(const Image& gray);

/// 2x2 mean downscale; extents must be even.
Image downscale_image(const Image& image);
/// 2x2 majority-vote downscale; ties go to the smallest label, and void only
/// wins a block that is entirely void.
LabelMap downscale_mask(const LabelMap& mask, std::optional<std::int32_t> void_class = std::nullopt);

enum class Split { train, valid, test };
const char* to_string(Split split);
/// Throws ConfigError for anything but train/valid/test.
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string image;
  std::string mask;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::optional<std::int32_t> void_index;
  std::vector<ManifestEntry> samples;
  std::filesystem::path base_dir;

  std::size_t class_count() const { return classes.size(); }
  std::filesystem::path resolve(const std::string& relative) const { return base_dir / relative; }
};

/// Throws FormatError on malformed JSON, IoError on unreadable files,
/// ConfigError when a listed path is missing or samples repeat across splits.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct Sample {
  std::string id;
  Tensor image;  // H x W x 3 in [0, 1]
  LabelMap mask;
};

/// Loads every entry of one split, validating extents and label range.
std::vector<Sample> load_split(const DatasetManifest& manifest, Split split);

/// Fraction of non-void pixels per class. Throws ConfigError on an empty set.
std::vector<double> class_frequencies(std::span<const Sample> samples, std::size_t classes,
                                      std::optional<std::int32_t> void_class = std::nullopt);
std::vector<double> compute_class_frequencies(const DatasetManifest& manifest, Split split = Split::train);

struct SynthOptions {
  std::size_t count = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 2;
  std::uint64_t seed = 0;
  /// Shape side (or diameter) range as a fraction of the shorter image side.
  double min_shape_fraction = 0.3;
  double max_shape_fraction = 0.6;
};

struct SynthSet {
  std::vector<Sample> samples;
  std::vector<Split> splits;  // 70/15/15 assignment, parallel to samples
  std::vector<std::string> class_names;
};

/// One solid shape per foreground class over a textured background of class 0.
/// Class k keeps its own hue band; each shape is a rectangle or a disc at random.
SynthSet synth_samples(const SynthOptions& options);

/// Writes images, masks and manifest.json into `out_dir`; returns the manifest.
DatasetManifest synth_dataset(const SynthOptions& options, const std::filesystem::path& out_dir);

}  // namespace reseg
