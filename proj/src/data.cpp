// SPDX-License-Identifier: Apache-2.0
#include "reseg/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace reseg {

namespace fs = std::filesystem;

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) throw TruncatedError(std::string("netpbm: header ends before ") + what);
    if (!std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      throw FormatError(std::string("netpbm: expected a decimal ") + what);
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("netpbm: ") + what + " is implausibly large");
      ++pos_;
    }
    return v;
  }

  /// Consumes the single whitespace byte that separates header and raster.
  void end_of_header() {
    if (pos_ >= bytes_.size()) throw TruncatedError("netpbm: missing raster");
    if (!std::isspace(static_cast<unsigned char>(bytes_[pos_]))) throw FormatError("netpbm: malformed header end");
    ++pos_;
  }

  std::size_t position() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 2;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

Image decode_netpbm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("netpbm: only binary P5 (gray) and P6 (RGB) files are supported");
  }
  Image img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader header(bytes);
  img.cols = header.number("width");
  img.rows = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (img.cols == 0 || img.rows == 0) throw FormatError("netpbm: zero image extent");
  if (maxval != 255) throw FormatError("netpbm: maxval " + std::to_string(maxval) + " unsupported, expected 255");
  header.end_of_header();
  const std::size_t need = img.rows * img.cols * img.channels;
  const std::size_t have = bytes.size() - header.position();
  if (have < need) {
    throw TruncatedError("netpbm: raster needs " + std::to_string(need) + " bytes, file holds " + std::to_string(have));
  }
  const auto* raster = reinterpret_cast<const std::uint8_t*>(bytes.data() + header.position());
  img.pixels.assign(raster, raster + need);
  return img;
}

std::string encode_netpbm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw FormatError("netpbm: images must have 1 or 3 channels");
  if (image.pixels.size() != image.rows * image.cols * image.channels) {
    throw DimensionError("netpbm: pixel count does not match extents");
  }
  std::string out = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.cols) + " " +
                    std::to_string(image.rows) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

Image read_netpbm(const fs::path& path) {
  try {
    return decode_netpbm(read_file(path));
  } catch (const TruncatedError& e) {
    throw TruncatedError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_netpbm(const fs::path& path, const Image& image) {
  write_file(path, encode_netpbm(image));
}

Tensor to_unit_range(const Image& image) {
  Tensor t({image.rows, image.cols, image.channels});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return t;
}

Image from_unit_range(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("from_unit_range: expected an H x W x C map");
  Image img{map.rows(), map.cols(), map.channels(), std::vector<std::uint8_t>(map.size())};
  for (std::size_t i = 0; i < map.size(); ++i) {
    const float v = std::clamp(map[i], 0.0f, 1.0f);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

LabelMap to_label_map(const Image& gray) {
  if (gray.channels != 1) throw FormatError("masks must be single-channel (P5) images");
  LabelMap m(gray.rows, gray.cols);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) m.labels[i] = gray.pixels[i];
  return m;
}

Image to_gray_image(const LabelMap& labels) {
  Image img{labels.rows, labels.cols, 1, std::vector<std::uint8_t>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::int32_t v = labels.labels[i];
    if (v < 0 || v > 255) throw FormatError("label " + std::to_string(v) + " does not fit an 8-bit mask");
    img.pixels[i] = static_cast<std::uint8_t>(v);
  }
  return img;
}

LabelMap threshold_mask(const Image& gray) {
  if (gray.channels != 1) throw FormatError("threshold_mask: expected a single-channel image");
  LabelMap m(gray.rows, gray.cols);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) m.labels[i] = gray.pixels[i] >= 128 ? 1 : 0;
  return m;
}

Image downscale_image(const Image& image) {
  if (image.rows % 2 != 0 || image.cols % 2 != 0) throw ConfigError("downscale_image: extents must be even");
  Image out{image.rows / 2, image.cols / 2, image.channels, {}};
  out.pixels.resize(out.rows * out.cols * out.channels);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        unsigned sum = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            sum += image.pixels[((2 * r + dy) * image.cols + 2 * c + dx) * image.channels + ch];
          }
        }
        out.pixels[(r * out.cols + c) * out.channels + ch] = static_cast<std::uint8_t>((sum + 2) / 4);
      }
    }
  }
  return out;
}

LabelMap downscale_mask(const LabelMap& mask, std::optional<std::int32_t> void_class) {
  if (mask.rows % 2 != 0 || mask.cols % 2 != 0) throw ConfigError("downscale_mask: extents must be even");
  LabelMap out(mask.rows / 2, mask.cols / 2);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      std::map<std::int32_t, int> votes;
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::int32_t v = mask(2 * r + dy, 2 * c + dx);
          if (void_class && v == *void_class) continue;
          ++votes[v];
        }
      }
      if (votes.empty()) {
        out(r, c) = *void_class;
        continue;
      }
      // std::map iterates in ascending label order, so ties keep the smallest.
      auto best = votes.begin();
      for (auto it = votes.begin(); it != votes.end(); ++it) {
        if (it->second > best->second) best = it;
      }
      out(r, c) = best->first;
    }
  }
  return out;
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "valid" || name == "val" || name == "validation") return Split::valid;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, valid or test)");
}

DatasetManifest read_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    if (!doc.is_object() || !doc.contains("classes") || !doc.contains("samples")) {
      throw FormatError(path.string() + ": manifest needs 'classes' and 'samples'");
    }
    for (const auto& c : doc.at("classes")) m.classes.push_back(c.get<std::string>());
    if (m.classes.size() < 2) throw FormatError(path.string() + ": manifest lists fewer than 2 classes");
    if (doc.contains("void_index") && !doc["void_index"].is_null()) m.void_index = doc["void_index"].get<std::int32_t>();
    for (const auto& s : doc.at("samples")) {
      m.samples.push_back({s.at("image").get<std::string>(), s.at("mask").get<std::string>(),
                           parse_split(s.at("split").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest field: " + e.what());
  }

  std::map<std::string, Split> seen;
  for (const auto& e : m.samples) {
    for (const auto* rel : {&e.image, &e.mask}) {
      if (!fs::exists(m.resolve(*rel))) throw ConfigError("manifest references missing file '" + *rel + "'");
    }
    auto [it, inserted] = seen.emplace(e.image, e.split);
    if (!inserted && it->second != e.split) {
      throw ConfigError("image '" + e.image + "' appears in both " + to_string(it->second) + " and " +
                        to_string(e.split) + " splits");
    }
  }
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  nlohmann::json doc;
  doc["classes"] = manifest.classes;
  if (manifest.void_index) doc["void_index"] = *manifest.void_index;
  doc["samples"] = nlohmann::json::array();
  for (const auto& e : manifest.samples) {
    doc["samples"].push_back({{"image", e.image}, {"mask", e.mask}, {"split", to_string(e.split)}});
  }
  write_file(path, doc.dump(2) + "\n");
}

std::vector<Sample> load_split(const DatasetManifest& manifest, Split split) {
  std::vector<Sample> out;
  const auto k = static_cast<std::int32_t>(manifest.class_count());
  for (const auto& e : manifest.samples) {
    if (e.split != split) continue;
    Image img = read_netpbm(manifest.resolve(e.image));
    if (img.channels == 1) {
      Image rgb{img.rows, img.cols, 3, std::vector<std::uint8_t>(img.pixels.size() * 3)};
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = img.pixels[i];
      }
      img = std::move(rgb);
    }
    const Image mask_img = read_netpbm(manifest.resolve(e.mask));
    if (mask_img.channels != 1) throw FormatError(e.mask + ": masks must be P5 gray images");
    if (mask_img.rows != img.rows || mask_img.cols != img.cols) {
      throw FormatError(e.mask + ": mask extents " + std::to_string(mask_img.rows) + "x" +
                        std::to_string(mask_img.cols) + " differ from image " + std::to_string(img.rows) + "x" +
                        std::to_string(img.cols));
    }
    LabelMap mask = to_label_map(mask_img);
    for (std::int32_t v : mask.labels) {
      if (v >= k && !(manifest.void_index && v == *manifest.void_index)) {
        throw FormatError(e.mask + ": label " + std::to_string(v) + " is neither a class index nor void");
      }
    }
    out.push_back({e.image, to_unit_range(img), std::move(mask)});
  }
  return out;
}

std::vector<double> class_frequencies(std::span<const Sample> samples, std::size_t classes,
                                      std::optional<std::int32_t> void_class) {
  if (samples.empty()) throw ConfigError("class frequencies need at least one sample");
  std::vector<std::uint64_t> counts(classes, 0);
  std::uint64_t total = 0;
  for (const auto& s : samples) {
    for (std::int32_t v : s.mask.labels) {
      if (void_class && v == *void_class) continue;
      if (v < 0 || static_cast<std::size_t>(v) >= classes) {
        throw DimensionError("class frequencies: label " + std::to_string(v) + " out of range");
      }
      ++counts[static_cast<std::size_t>(v)];
      ++total;
    }
  }
  if (total == 0) throw ConfigError("class frequencies: every pixel is void");
  std::vector<double> freqs(classes);
  for (std::size_t k = 0; k < classes; ++k) freqs[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
  return freqs;
}

std::vector<double> compute_class_frequencies(const DatasetManifest& manifest, Split split) {
  const auto samples = load_split(manifest, split);
  if (samples.empty()) throw ConfigError(std::string("split '") + to_string(split) + "' is empty");
  return class_frequencies(samples, manifest.class_count(), manifest.void_index);
}

namespace {

constexpr std::array<std::array<double, 3>, 5> kClassHues = {{
    {0.0, 0.0, 0.0},  // background, unused
    {0.85, 0.25, 0.20},
    {0.20, 0.80, 0.30},
    {0.25, 0.35, 0.90},
    {0.90, 0.85, 0.20},
}};

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

SynthSet synth_samples(const SynthOptions& o) {
  if (o.classes < 2 || o.classes > 5) throw ConfigError("synthetic datasets support 2 to 5 classes");
  if (o.height % 4 != 0 || o.width % 4 != 0 || o.height == 0 || o.width == 0) {
    throw ConfigError("synthetic image extents must be positive multiples of 4");
  }
  if (o.count == 0) throw ConfigError("synthetic dataset needs at least one image");
  if (!(o.min_shape_fraction > 0.0) || o.max_shape_fraction < o.min_shape_fraction || o.max_shape_fraction > 1.0) {
    throw ConfigError("shape fractions must satisfy 0 < min <= max <= 1");
  }

  SynthSet set;
  set.class_names.push_back("background");
  for (std::size_t k = 1; k < o.classes; ++k) set.class_names.push_back("shape" + std::to_string(k));

  const std::size_t n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.7 * o.count)));
  const std::size_t n_valid = std::min(o.count - n_train, static_cast<std::size_t>(std::lround(0.15 * o.count)));

  const double short_side = static_cast<double>(std::min(o.height, o.width));
  for (std::size_t n = 0; n < o.count; ++n) {
    std::seed_seq seq{static_cast<std::uint32_t>(o.seed), static_cast<std::uint32_t>(o.seed >> 32),
                      static_cast<std::uint32_t>(n)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    Image img{o.height, o.width, 3, std::vector<std::uint8_t>(o.height * o.width * 3)};
    LabelMap mask(o.height, o.width, 0);

    std::array<double, 3> base{};
    for (auto& b : base) b = 0.1 + 0.25 * unit(rng);
    const double freq = 0.3 + 0.9 * unit(rng);
    const double phase = 6.283185307179586 * unit(rng);
    std::vector<double> canvas(o.height * o.width * 3);
    for (std::size_t r = 0; r < o.height; ++r) {
      for (std::size_t c = 0; c < o.width; ++c) {
        const double stripe = 0.06 * std::sin(freq * (static_cast<double>(r) + 0.5 * static_cast<double>(c)) + phase);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          canvas[(r * o.width + c) * 3 + ch] = base[ch] + stripe + 0.05 * (unit(rng) - 0.5);
        }
      }
    }

    for (std::size_t k = 1; k < o.classes; ++k) {
      const double lo = o.min_shape_fraction * short_side, hi = o.max_shape_fraction * short_side;
      auto extent = [&] { return std::max(2.0, lo + (hi - lo) * unit(rng)); };
      std::array<double, 3> color{};
      for (std::size_t ch = 0; ch < 3; ++ch) color[ch] = kClassHues[k][ch] + 0.1 * (unit(rng) - 0.5);
      const bool disc = unit(rng) < 0.5;
      const double eh = extent(), ew = disc ? eh : extent();
      const double top = unit(rng) * (static_cast<double>(o.height) - eh);
      const double left = unit(rng) * (static_cast<double>(o.width) - ew);
      const double cy = top + eh / 2.0, cx = left + ew / 2.0, radius = eh / 2.0;
      for (std::size_t r = 0; r < o.height; ++r) {
        for (std::size_t c = 0; c < o.width; ++c) {
          const double py = static_cast<double>(r) + 0.5, px = static_cast<double>(c) + 0.5;
          const bool inside = disc ? (py - cy) * (py - cy) + (px - cx) * (px - cx) <= radius * radius
                                   : py >= top && py < top + eh && px >= left && px < left + ew;
          if (!inside) continue;
          mask(r, c) = static_cast<std::int32_t>(k);
          for (std::size_t ch = 0; ch < 3; ++ch) canvas[(r * o.width + c) * 3 + ch] = color[ch];
        }
      }
    }
    for (std::size_t i = 0; i < canvas.size(); ++i) img.pixels[i] = quantize(canvas[i]);

    char id[32];
    std::snprintf(id, sizeof id, "%04zu", n);
    set.samples.push_back({id, to_unit_range(img), std::move(mask)});
    set.splits.push_back(n < n_train ? Split::train : (n < n_train + n_valid ? Split::valid : Split::test));
  }
  return set;
}

DatasetManifest synth_dataset(const SynthOptions& options, const fs::path& out_dir) {
  const SynthSet set = synth_samples(options);
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetManifest m;
  m.classes = set.class_names;
  m.base_dir = out_dir;
  for (std::size_t n = 0; n < set.samples.size(); ++n) {
    const auto& s = set.samples[n];
    const std::string image_rel = "images/" + s.id + ".ppm";
    const std::string mask_rel = "masks/" + s.id + ".pgm";
    write_netpbm(out_dir / image_rel, from_unit_range(s.image));
    write_netpbm(out_dir / mask_rel, to_gray_image(s.mask));
    m.samples.push_back({image_rel, mask_rel, set.splits[n]});
  }
  write_manifest(out_dir / "manifest.json", m);
  return m;
}

}  // namespace reseg
